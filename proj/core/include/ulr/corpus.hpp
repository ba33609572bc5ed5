#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ulr {

using TokenId = std::int32_t;

/// Reserved ids. They always occupy the first five slots of a Vocabulary.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kCls = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

/// Lowercases ASCII letters and splits on everything that is not an ASCII letter or
/// digit. Punctuation, symbols and non-ASCII bytes act as separators.
std::vector<std::string> tokenize(std::string_view text);

struct Document {
    std::int64_t id = 0;
    std::string text;
    std::vector<std::string> tokens;
};

Document make_document(std::int64_t id, std::string text);

/// One document per line; blank (or token-free) lines are skipped. Ids are 0-based line
/// positions among the kept documents.
std::vector<Document> read_corpus(const std::filesystem::path& path);
std::vector<Document> read_corpus(std::istream& in);

using TokenCounts = std::unordered_map<std::string, std::int64_t>;

void count_tokens(std::span<const Document> documents, TokenCounts& counts);
/// Shard merge: summation, associative and commutative.
void merge_counts(TokenCounts& into, const TokenCounts& from);

class Vocabulary {
public:
    struct Entry {
        std::string token;
        std::int64_t count = 0;
    };

    Vocabulary();

    /// Appends a token; used by builders and loaders. Throws on duplicates.
    TokenId add(std::string token, std::int64_t count);

    std::size_t size() const noexcept { return entries_.size(); }
    /// Id of `token`, or special::kUnk.
    TokenId id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::int64_t count(TokenId id) const;
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    /// TSV `token<TAB>id<TAB>count`, specials first.
    void write(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static Vocabulary read(std::istream& in);
    static Vocabulary load(const std::filesystem::path& path);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b);

private:
    struct Hash {
        using is_transparent = void;
        std::size_t operator()(std::string_view s) const noexcept {
            return std::hash<std::string_view>{}(s);
        }
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, TokenId, Hash, std::equal_to<>> index_;
};

/// Keeps tokens with count >= min_count, ranked by count (desc) then token (asc), and
/// truncates so the whole vocabulary, specials included, holds at most max_size entries.
Vocabulary build_vocabulary(const TokenCounts& counts, std::int64_t min_count, std::size_t max_size);
Vocabulary build_vocabulary(std::span<const Document> documents, std::int64_t min_count,
                            std::size_t max_size);

struct EncodedSequence {
    std::vector<TokenId> ids;

    std::size_t size() const noexcept { return ids.size(); }
    bool empty() const noexcept { return ids.empty(); }
    friend bool operator==(const EncodedSequence&, const EncodedSequence&) = default;
};

EncodedSequence encode(std::span<const std::string> tokens, const Vocabulary& vocab);
std::vector<std::string> decode(const EncodedSequence& sequence, const Vocabulary& vocab);

}  // namespace ulr
