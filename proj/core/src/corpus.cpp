#include "ulr/corpus.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

#include <fmt/format.h>

#include "ulr/error.hpp"

namespace ulr {

namespace {

constexpr std::array<std::string_view, special::kCount> kSpecialTokens = {
    "[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"};

constexpr bool is_word_char(unsigned char c) noexcept {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

constexpr char to_lower_ascii(unsigned char c) noexcept {
    return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
}

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string_view::npos) {
            break;
        }
        start = tab + 1;
    }
    return fields;
}

template <typename Int>
Int parse_int(std::string_view field, std::string_view what) {
    Int value{};
    const auto* end = field.data() + field.size();
    const auto [ptr, ec] = std::from_chars(field.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw IoError(fmt::format("invalid {} '{}'", what, field));
    }
    return value;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (const char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_word_char(c)) {
            current.push_back(to_lower_ascii(c));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

Document make_document(std::int64_t id, std::string text) {
    Document doc{id, std::move(text), {}};
    doc.tokens = tokenize(doc.text);
    return doc;
}

std::vector<Document> read_corpus(std::istream& in) {
    std::vector<Document> docs;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        auto doc = make_document(static_cast<std::int64_t>(docs.size()), std::move(line));
        if (!doc.tokens.empty()) {
            docs.push_back(std::move(doc));
        }
    }
    return docs;
}

std::vector<Document> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open corpus '{}'", path.string()));
    }
    return read_corpus(in);
}

void count_tokens(std::span<const Document> documents, TokenCounts& counts) {
    for (const auto& doc : documents) {
        for (const auto& tok : doc.tokens) {
            ++counts[tok];
        }
    }
}

void merge_counts(TokenCounts& into, const TokenCounts& from) {
    for (const auto& [tok, n] : from) {
        into[tok] += n;
    }
}

Vocabulary::Vocabulary() {
    for (const auto tok : kSpecialTokens) {
        add(std::string(tok), 0);
    }
}

TokenId Vocabulary::add(std::string token, std::int64_t count) {
    const auto id = static_cast<TokenId>(entries_.size());
    const auto [it, inserted] = index_.emplace(token, id);
    if (!inserted) {
        throw Error(fmt::format("duplicate vocabulary token '{}'", token));
    }
    entries_.push_back({std::move(token), count});
    return id;
}

TokenId Vocabulary::id(std::string_view token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? special::kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.find(token) != index_.end();
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
        throw Error(fmt::format("token id {} outside vocabulary of size {}", id, entries_.size()));
    }
    return entries_[static_cast<std::size_t>(id)].token;
}

std::int64_t Vocabulary::count(TokenId id) const {
    token(id);
    return entries_[static_cast<std::size_t>(id)].count;
}

void Vocabulary::write(std::ostream& out) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        out << entries_[i].token << '\t' << i << '\t' << entries_[i].count << '\n';
    }
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) {
        throw IoError(fmt::format("cannot write vocabulary '{}'", path.string()));
    }
    write(out);
}

Vocabulary Vocabulary::read(std::istream& in) {
    Vocabulary vocab;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto fields = split_tabs(line);
        if (fields.size() != 3) {
            throw IoError(fmt::format("vocabulary line {}: expected 3 fields", line_no));
        }
        const auto id = parse_int<TokenId>(fields[1], "token id");
        const auto count = parse_int<std::int64_t>(fields[2], "count");
        if (id < special::kCount) {
            if (fields[0] != kSpecialTokens[static_cast<std::size_t>(id)]) {
                throw IoError(fmt::format("vocabulary line {}: special id {} must be {}", line_no,
                                          id, kSpecialTokens[static_cast<std::size_t>(id)]));
            }
            continue;
        }
        if (static_cast<std::size_t>(id) != vocab.size()) {
            throw IoError(fmt::format("vocabulary line {}: ids must be dense, got {}", line_no, id));
        }
        vocab.add(std::string(fields[0]), count);
    }
    return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open vocabulary '{}'", path.string()));
    }
    return read(in);
}

bool operator==(const Vocabulary& a, const Vocabulary& b) {
    if (a.entries_.size() != b.entries_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
        if (a.entries_[i].token != b.entries_[i].token || a.entries_[i].count != b.entries_[i].count) {
            return false;
        }
    }
    return true;
}

Vocabulary build_vocabulary(const TokenCounts& counts, std::int64_t min_count, std::size_t max_size) {
    if (min_count < 1) {
        throw Error("min_count must be >= 1");
    }
    if (max_size <= special::kCount) {
        throw Error(fmt::format("max_size must exceed the {} special tokens", special::kCount));
    }
    if (counts.empty()) {
        throw Error("empty corpus");
    }
    std::vector<std::pair<std::string_view, std::int64_t>> kept;
    for (const auto& [tok, n] : counts) {
        if (n >= min_count) {
            kept.emplace_back(tok, n);
        }
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    const std::size_t room = max_size - special::kCount;
    if (kept.size() > room) {
        kept.resize(room);
    }
    Vocabulary vocab;
    for (const auto& [tok, n] : kept) {
        vocab.add(std::string(tok), n);
    }
    return vocab;
}

Vocabulary build_vocabulary(std::span<const Document> documents, std::int64_t min_count,
                            std::size_t max_size) {
    TokenCounts counts;
    count_tokens(documents, counts);
    return build_vocabulary(counts, min_count, max_size);
}

EncodedSequence encode(std::span<const std::string> tokens, const Vocabulary& vocab) {
    EncodedSequence seq;
    seq.ids.reserve(tokens.size());
    for (const auto& tok : tokens) {
        seq.ids.push_back(vocab.id(tok));
    }
    return seq;
}

std::vector<std::string> decode(const EncodedSequence& sequence, const Vocabulary& vocab) {
    std::vector<std::string> tokens;
    tokens.reserve(sequence.size());
    for (const auto id : sequence.ids) {
        tokens.push_back(vocab.token(id));
    }
    return tokens;
}

}  // namespace ulr
