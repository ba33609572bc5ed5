#include "ulr/ngram.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ulr/error.hpp"
#include "ulr/parallel.hpp"

namespace ulr {

namespace {

constexpr unsigned kFieldBits = 21;
constexpr std::uint64_t kFieldMask = (std::uint64_t{1} << kFieldBits) - 1;

// Bit offset (from the least significant end of the 128-bit value) of field i.
constexpr unsigned field_offset(std::size_t i) noexcept {
    return static_cast<unsigned>(kFieldBits * (kMaxNgramOrder - 1 - i));
}

constexpr const char* kTableHeader = "ngram\tcount\tpmi";

}  // namespace

NgramKey::NgramKey(std::span<const TokenId> ids) {
    if (ids.empty() || ids.size() > kMaxNgramOrder) {
        throw Error(fmt::format("n-gram length {} outside 1..{}", ids.size(), kMaxNgramOrder));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] > kMaxPackedTokenId) {
            throw Error(fmt::format("token id {} cannot be packed into an n-gram key", ids[i]));
        }
        const auto v = static_cast<std::uint64_t>(ids[i]) + 1;
        const unsigned off = field_offset(i);
        if (off >= 64) {
            hi_ |= v << (off - 64);
        } else {
            lo_ |= v << off;
            if (off + kFieldBits > 64) {
                hi_ |= v >> (64 - off);
            }
        }
    }
}

TokenId NgramKey::operator[](std::size_t i) const noexcept {
    const unsigned off = field_offset(i);
    std::uint64_t v;
    if (off >= 64) {
        v = hi_ >> (off - 64);
    } else {
        v = lo_ >> off;
        if (off + kFieldBits > 64) {
            v |= hi_ << (64 - off);
        }
    }
    return static_cast<TokenId>(v & kFieldMask) - 1;
}

std::size_t NgramKey::size() const noexcept {
    std::size_t n = 0;
    while (n < kMaxNgramOrder && (*this)[n] >= 0) {
        ++n;
    }
    return n;
}

std::vector<TokenId> NgramKey::ids() const {
    std::vector<TokenId> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (*this)[i];
    }
    return out;
}

std::int64_t NgramCounts::unigram(TokenId id) const noexcept {
    if (id < 0 || static_cast<std::size_t>(id) >= unigrams.size()) {
        return 0;
    }
    return unigrams[static_cast<std::size_t>(id)];
}

std::int64_t NgramCounts::count(std::span<const TokenId> ids) const {
    if (ids.size() == 1) {
        return unigram(ids[0]);
    }
    if (ids.empty() || ids.size() > order) {
        return 0;
    }
    const auto it = ngrams.find(NgramKey(ids));
    return it == ngrams.end() ? 0 : it->second;
}

void NgramCounts::merge(const NgramCounts& other) {
    order = std::max(order, other.order);
    total_tokens += other.total_tokens;
    if (unigrams.size() < other.unigrams.size()) {
        unigrams.resize(other.unigrams.size(), 0);
    }
    for (std::size_t i = 0; i < other.unigrams.size(); ++i) {
        unigrams[i] += other.unigrams[i];
    }
    for (const auto& [key, n] : other.ngrams) {
        ngrams[key] += n;
    }
}

NgramCounts count_ngrams(std::span<const EncodedSequence> documents, std::size_t order,
                         unsigned threads) {
    if (order < 2 || order > kMaxNgramOrder) {
        throw Error(fmt::format("n-gram order must lie in 2..{}, got {}", kMaxNgramOrder, order));
    }
    threads = std::max(1u, threads);
    std::vector<NgramCounts> shards(threads);
    parallel_for(threads, threads, [&](std::size_t shard) {
        auto& local = shards[shard];
        local.order = order;
        const std::size_t begin = documents.size() * shard / threads;
        const std::size_t end = documents.size() * (shard + 1) / threads;
        for (std::size_t d = begin; d < end; ++d) {
            const auto& ids = documents[d].ids;
            local.total_tokens += static_cast<std::int64_t>(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const auto id = static_cast<std::size_t>(ids[i]);
                if (id >= local.unigrams.size()) {
                    local.unigrams.resize(id + 1, 0);
                }
                ++local.unigrams[id];
                const std::size_t max_len = std::min(order, ids.size() - i);
                for (std::size_t len = 2; len <= max_len; ++len) {
                    ++local.ngrams[NgramKey(std::span(ids).subspan(i, len))];
                }
            }
        }
    });
    NgramCounts result = std::move(shards[0]);
    for (std::size_t s = 1; s < shards.size(); ++s) {
        result.merge(shards[s]);
    }
    result.order = order;
    if (result.total_tokens == 0) {
        throw Error("empty corpus");
    }
    return result;
}

double pmi_from_counts(std::int64_t joint, std::span<const std::int64_t> unigrams,
                       std::int64_t total_tokens) {
    if (joint <= 0 || total_tokens <= 0 || unigrams.empty()) {
        throw Error("unseen n-gram");
    }
    const double log_t = std::log(static_cast<double>(total_tokens));
    double score = std::log(static_cast<double>(joint)) - log_t;
    for (const auto c : unigrams) {
        if (c <= 0) {
            throw Error("unseen n-gram");
        }
        score -= std::log(static_cast<double>(c)) - log_t;
    }
    return score / static_cast<double>(unigrams.size());
}

double compute_pmi(std::span<const TokenId> ngram, const NgramCounts& counts) {
    std::vector<std::int64_t> unigram_counts;
    unigram_counts.reserve(ngram.size());
    for (const auto id : ngram) {
        unigram_counts.push_back(counts.unigram(id));
    }
    return pmi_from_counts(counts.count(ngram), unigram_counts, counts.total_tokens);
}

const NgramEntry* NgramTable::find(const NgramKey& key) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

const NgramEntry* NgramTable::find(std::span<const TokenId> ngram) const {
    if (ngram.size() < 2 || ngram.size() > kMaxNgramOrder) {
        return nullptr;
    }
    return find(NgramKey(ngram));
}

void NgramTable::insert(const NgramKey& key, const NgramEntry& entry) {
    entries_.insert_or_assign(key, entry);
    max_length_ = std::max(max_length_, key.size());
    order_ = std::max(order_, key.size());
}

bool ranks_before(const NgramKey& a, const NgramEntry& ea, const NgramKey& b, const NgramEntry& eb) {
    if (ea.pmi != eb.pmi) {
        return ea.pmi > eb.pmi;
    }
    if (ea.count != eb.count) {
        return ea.count > eb.count;
    }
    return a < b;
}

std::vector<NgramKey> NgramTable::ranked_keys() const {
    std::vector<std::pair<NgramKey, const NgramEntry*>> items;
    items.reserve(entries_.size());
    for (const auto& [key, entry] : entries_) {
        items.emplace_back(key, &entry);
    }
    std::sort(items.begin(), items.end(), [](const auto& x, const auto& y) {
        return ranks_before(x.first, *x.second, y.first, *y.second);
    });
    std::vector<NgramKey> keys;
    keys.reserve(items.size());
    for (const auto& item : items) {
        keys.push_back(item.first);
    }
    return keys;
}

void NgramTable::write(std::ostream& out, const Vocabulary& vocab) const {
    out << kTableHeader << '\n';
    for (const auto& key : ranked_keys()) {
        const auto& entry = entries_.at(key);
        for (std::size_t i = 0; i < key.size(); ++i) {
            if (i > 0) {
                out << ' ';
            }
            out << vocab.token(key[i]);
        }
        out << fmt::format("\t{}\t{:.9g}\n", entry.count, entry.pmi);
    }
}

void NgramTable::save(const std::filesystem::path& path, const Vocabulary& vocab) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError(fmt::format("cannot write n-gram table '{}'", path.string()));
    }
    write(out, vocab);
}

NgramTable NgramTable::read(std::istream& in, const Vocabulary& vocab, std::size_t* dropped) {
    NgramTable table;
    std::size_t skipped = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1) {
            if (line != kTableHeader) {
                throw IoError("n-gram table: missing header line");
            }
            continue;
        }
        if (line.empty()) {
            continue;
        }
        const auto tab1 = line.find('\t');
        const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
        if (tab2 == std::string::npos || line.find('\t', tab2 + 1) != std::string::npos) {
            throw IoError(fmt::format("n-gram table line {}: expected 3 fields", line_no));
        }
        std::vector<TokenId> ids;
        bool known = true;
        std::size_t start = 0;
        const std::string_view tokens(line.data(), tab1);
        while (start <= tokens.size()) {
            auto sp = tokens.find(' ', start);
            if (sp == std::string_view::npos) {
                sp = tokens.size();
            }
            const auto tok = tokens.substr(start, sp - start);
            if (!vocab.contains(tok)) {
                known = false;
            }
            ids.push_back(vocab.id(tok));
            start = sp + 1;
        }
        NgramEntry entry;
        const char* count_begin = line.data() + tab1 + 1;
        const char* count_end = line.data() + tab2;
        if (auto r = std::from_chars(count_begin, count_end, entry.count);
            r.ec != std::errc{} || r.ptr != count_end) {
            throw IoError(fmt::format("n-gram table line {}: bad count", line_no));
        }
        const char* pmi_begin = line.data() + tab2 + 1;
        const char* pmi_end = line.data() + line.size();
        if (auto r = std::from_chars(pmi_begin, pmi_end, entry.pmi);
            r.ec != std::errc{} || r.ptr != pmi_end) {
            throw IoError(fmt::format("n-gram table line {}: bad pmi", line_no));
        }
        entry.privileged = std::isinf(entry.pmi) && entry.pmi > 0;
        if (ids.size() < 2 || ids.size() > kMaxNgramOrder) {
            throw IoError(fmt::format("n-gram table line {}: length {} outside 2..{}", line_no,
                                      ids.size(), kMaxNgramOrder));
        }
        if (!known) {
            ++skipped;
            continue;
        }
        table.insert(NgramKey(ids), entry);
    }
    if (line_no == 0) {
        throw IoError("n-gram table: missing header line");
    }
    if (dropped != nullptr) {
        *dropped = skipped;
    }
    return table;
}

NgramTable NgramTable::load(const std::filesystem::path& path, const Vocabulary& vocab,
                            std::size_t* dropped) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open n-gram table '{}'", path.string()));
    }
    return read(in, vocab, dropped);
}

NgramTable build_table(const NgramCounts& counts, std::int64_t min_count) {
    NgramTable table(counts.order, counts.total_tokens);
    std::vector<std::int64_t> unigram_counts;
    for (const auto& [key, n] : counts.ngrams) {
        if (n < min_count) {
            continue;
        }
        const std::size_t len = key.size();
        unigram_counts.clear();
        bool special_token = false;
        for (std::size_t i = 0; i < len; ++i) {
            special_token = special_token || key[i] < special::kCount;
            unigram_counts.push_back(counts.unigram(key[i]));
        }
        if (special_token) {
            continue;
        }
        table.insert(key, {n, pmi_from_counts(n, unigram_counts, counts.total_tokens), false});
    }
    return table;
}

NgramTable prune_table(const NgramTable& table, std::span<const EncodedSequence> documents,
                       double pmi_threshold, std::size_t per_doc_top_k) {
    absl::flat_hash_map<NgramKey, NgramEntry> passing;
    NgramTable result(table.order(), table.total_tokens());
    for (const auto& [key, entry] : table.entries()) {
        if (entry.privileged) {
            result.insert(key, entry);
        } else if (entry.pmi > pmi_threshold) {
            passing.emplace(key, entry);
        }
    }
    if (passing.empty()) {
        return result;
    }
    const std::size_t max_len = std::min(table.max_length(), kMaxNgramOrder);
    std::vector<std::pair<NgramKey, const NgramEntry*>> present;
    for (const auto& doc : documents) {
        present.clear();
        const auto& ids = doc.ids;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            for (std::size_t len = 2; len <= std::min(max_len, ids.size() - i); ++len) {
                const NgramKey key(std::span<const TokenId>(ids).subspan(i, len));
                if (const auto it = passing.find(key); it != passing.end()) {
                    present.emplace_back(key, &it->second);
                }
            }
        }
        std::sort(present.begin(), present.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        present.erase(std::unique(present.begin(), present.end(),
                                  [](const auto& a, const auto& b) { return a.first == b.first; }),
                      present.end());
        const auto keep = std::min(per_doc_top_k, present.size());
        const auto cmp = [](const auto& a, const auto& b) {
            return ranks_before(a.first, *a.second, b.first, *b.second);
        };
        std::partial_sort(present.begin(), present.begin() + static_cast<std::ptrdiff_t>(keep),
                          present.end(), cmp);
        for (std::size_t i = 0; i < keep; ++i) {
            result.insert(present[i].first, *present[i].second);
        }
    }
    return result;
}

NgramTable inject_entities(NgramTable table, std::span<const std::vector<TokenId>> entities,
                           const NgramCounts* counts) {
    const std::size_t order = std::max<std::size_t>(table.order(), counts ? counts->order : 0);
    const std::size_t max_len = order == 0 ? kMaxNgramOrder : std::min(order, kMaxNgramOrder);
    for (const auto& entity : entities) {
        if (entity.size() < 2 || entity.size() > max_len) {
            spdlog::warn("skipping entity of length {} (allowed 2..{})", entity.size(), max_len);
            continue;
        }
        if (std::any_of(entity.begin(), entity.end(),
                        [](TokenId id) { return id < special::kCount; })) {
            spdlog::warn("skipping entity with out-of-vocabulary tokens");
            continue;
        }
        NgramEntry entry{0, std::numeric_limits<double>::infinity(), true};
        if (counts != nullptr) {
            entry.count = counts->count(entity);
            if (entry.count > 0) {
                entry.pmi = compute_pmi(entity, *counts);
            }
        }
        table.insert(NgramKey(entity), entry);
    }
    return table;
}

std::vector<std::vector<TokenId>> read_entity_file(const std::filesystem::path& path,
                                                   const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open entity file '{}'", path.string()));
    }
    std::vector<std::vector<TokenId>> entities;
    std::string line;
    while (std::getline(in, line)) {
        const auto tokens = tokenize(line);
        if (!tokens.empty()) {
            entities.push_back(encode(tokens, vocab).ids);
        }
    }
    return entities;
}

SpanAnnotation mark_sequence(std::span<const TokenId> sequence, const NgramTable& table) {
    SpanAnnotation spans;
    const std::size_t longest = std::min(table.max_length(), kMaxNgramOrder);
    if (longest < 2) {
        return spans;
    }
    std::size_t i = 0;
    while (i + 1 < sequence.size()) {
        std::size_t matched = 0;
        for (std::size_t len = std::min(longest, sequence.size() - i); len >= 2; --len) {
            if (table.contains(sequence.subspan(i, len))) {
                matched = len;
                break;
            }
        }
        if (matched != 0) {
            spans.push_back({i, i + matched});
            i += matched;
        } else {
            ++i;
        }
    }
    return spans;
}

std::vector<std::size_t> length_histogram(const NgramTable& table, std::size_t top) {
    std::vector<std::size_t> hist(kMaxNgramOrder + 1, 0);
    const auto keys = table.ranked_keys();
    for (std::size_t i = 0; i < std::min(top, keys.size()); ++i) {
        ++hist[keys[i].size()];
    }
    return hist;
}

}  // namespace ulr
