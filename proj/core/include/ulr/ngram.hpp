#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include <absl/container/flat_hash_map.h>
#include <absl/hash/hash.h>

#include "ulr/corpus.hpp"

namespace ulr {

/// Longest n-gram the packed key can hold.
inline constexpr std::size_t kMaxNgramOrder = 6;
/// Token ids must stay below this bound to be packed into an NgramKey.
inline constexpr TokenId kMaxPackedTokenId = (TokenId{1} << 21) - 2;

/// Up to six token ids packed into 128 bits as 21-bit (id + 1) fields, first token in the
/// most significant field. Unused fields are zero, so integer order on (hi, lo) equals
/// lexicographic order on the id tuples.
class NgramKey {
public:
    NgramKey() = default;
    explicit NgramKey(std::span<const TokenId> ids);

    std::size_t size() const noexcept;
    TokenId operator[](std::size_t i) const noexcept;
    std::vector<TokenId> ids() const;

    friend auto operator<=>(const NgramKey&, const NgramKey&) = default;

    template <typename H>
    friend H AbslHashValue(H h, const NgramKey& k) {
        return H::combine(std::move(h), k.hi_, k.lo_);
    }

private:
    std::uint64_t hi_ = 0;
    std::uint64_t lo_ = 0;
};

/// Raw n-gram statistics over a set of documents. N-grams never cross documents.
struct NgramCounts {
    std::size_t order = 0;
    std::int64_t total_tokens = 0;
    std::vector<std::int64_t> unigrams;
    absl::flat_hash_map<NgramKey, std::int64_t> ngrams;

    std::int64_t unigram(TokenId id) const noexcept;
    /// Count of any tuple of length 1..order; 0 when unseen.
    std::int64_t count(std::span<const TokenId> ids) const;

    /// Shard merge by summation.
    void merge(const NgramCounts& other);
};

/// Counts every unigram and every contiguous n-gram of length 2..order.
/// Documents are split into `threads` shards whose tables are merged.
NgramCounts count_ngrams(std::span<const EncodedSequence> documents, std::size_t order,
                         unsigned threads = 1);

/// (1/n) * (ln(joint/T) - sum_k ln(unigram_k/T)), n = unigrams.size().
double pmi_from_counts(std::int64_t joint, std::span<const std::int64_t> unigrams,
                       std::int64_t total_tokens);

/// Length-normalized PMI of `ngram`. Throws when the n-gram or one of its tokens is unseen.
double compute_pmi(std::span<const TokenId> ngram, const NgramCounts& counts);

struct NgramEntry {
    std::int64_t count = 0;
    double pmi = 0.0;
    /// Injected entity: exempt from pruning. pmi is +inf when it could not be computed.
    bool privileged = false;

    friend bool operator==(const NgramEntry&, const NgramEntry&) = default;
};

class NgramTable {
public:
    NgramTable() = default;
    NgramTable(std::size_t order, std::int64_t total_tokens) : order_(order), total_tokens_(total_tokens) {}

    std::size_t order() const noexcept { return order_; }
    std::int64_t total_tokens() const noexcept { return total_tokens_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    /// Longest stored n-gram; 0 when empty.
    std::size_t max_length() const noexcept { return max_length_; }

    const NgramEntry* find(std::span<const TokenId> ngram) const;
    const NgramEntry* find(const NgramKey& key) const;
    bool contains(std::span<const TokenId> ngram) const { return find(ngram) != nullptr; }
    void insert(const NgramKey& key, const NgramEntry& entry);

    const absl::flat_hash_map<NgramKey, NgramEntry>& entries() const noexcept { return entries_; }

    /// Keys ordered by pmi desc, count desc, then lexicographic id tuple.
    std::vector<NgramKey> ranked_keys() const;

    /// Header line, then `tok tok ...<TAB>count<TAB>pmi` rows in ranked order; pmi with 9
    /// significant digits.
    void write(std::ostream& out, const Vocabulary& vocab) const;
    void save(const std::filesystem::path& path, const Vocabulary& vocab) const;
    /// Rows with out-of-vocabulary tokens are dropped (and counted in `dropped`, if given).
    static NgramTable read(std::istream& in, const Vocabulary& vocab, std::size_t* dropped = nullptr);
    static NgramTable load(const std::filesystem::path& path, const Vocabulary& vocab,
                           std::size_t* dropped = nullptr);

private:
    std::size_t order_ = 0;
    std::int64_t total_tokens_ = 0;
    std::size_t max_length_ = 0;
    absl::flat_hash_map<NgramKey, NgramEntry> entries_;
};

/// Orders two entries the way every ranking in this module does.
bool ranks_before(const NgramKey& a, const NgramEntry& ea, const NgramKey& b, const NgramEntry& eb);

/// Scores every counted n-gram (length >= 2) whose count is at least `min_count`.
/// N-grams containing special ids (e.g. UNK) are skipped.
NgramTable build_table(const NgramCounts& counts, std::int64_t min_count = 1);

inline constexpr std::size_t kNoPerDocumentCap = std::numeric_limits<std::size_t>::max();

/// Keeps entries with pmi > threshold, then for every document the top `per_doc_top_k`
/// surviving n-grams occurring in it; the result is the union. Privileged entries always
/// survive.
NgramTable prune_table(const NgramTable& table, std::span<const EncodedSequence> documents,
                       double pmi_threshold, std::size_t per_doc_top_k);

/// Adds entity n-grams as privileged entries. Entities whose length is outside 2..order or
/// that contain special ids are skipped with a warning. When `counts` is given and the
/// entity was observed, its count and pmi are recorded.
NgramTable inject_entities(NgramTable table, std::span<const std::vector<TokenId>> entities,
                           const NgramCounts* counts = nullptr);

/// Reads one space-joined n-gram per line, tokenized and encoded with `vocab`.
std::vector<std::vector<TokenId>> read_entity_file(const std::filesystem::path& path,
                                                   const Vocabulary& vocab);

/// Half-open token range [begin, end) of a marked n-gram; end - begin >= 2.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t length() const noexcept { return end - begin; }
    friend bool operator==(const Span&, const Span&) = default;
};

using SpanAnnotation = std::vector<Span>;

/// Greedy left-to-right, longest-match-first, non-overlapping spans.
SpanAnnotation mark_sequence(std::span<const TokenId> sequence, const NgramTable& table);

/// Lengths 2..order → number of entries among the `top` best ranked.
std::vector<std::size_t> length_histogram(const NgramTable& table, std::size_t top);

}  // namespace ulr
