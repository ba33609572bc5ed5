#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>

#include "ulr/error.hpp"
#include "ulr/evaluation.hpp"
#include "ulr/parallel.hpp"

namespace ulr {

namespace {

std::int64_t parse_id(std::string_view s, std::string_view what, std::size_t line_no) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw IoError(fmt::format("{} line {}: bad id '{}'", what, line_no, s));
    }
    return v;
}

bool next_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) {
        return false;
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    return true;
}

}  // namespace

void RetrievalSet::validate() const {
    if (ids.size() != texts.size()) {
        throw Error("retrieval corpus ids and texts differ in length");
    }
    if (!std::is_sorted(ids.begin(), ids.end()) || std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
        throw Error("retrieval corpus ids must be unique and ascending");
    }
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (queries[i].gold.empty()) {
            throw Error(fmt::format("query {} has no gold id", i));
        }
        for (auto g : queries[i].gold) {
            if (!std::binary_search(ids.begin(), ids.end(), g)) {
                throw Error(fmt::format("query {} names unknown corpus id {}", i, g));
            }
        }
    }
}

RetrievalSet read_retrieval_set(std::istream& corpus, std::istream& queries) {
    std::vector<std::pair<std::int64_t, std::string>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (next_line(corpus, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw IoError(fmt::format("corpus line {}: expected id<TAB>text", line_no));
        }
        rows.emplace_back(parse_id(std::string_view(line).substr(0, tab), "corpus", line_no), line.substr(tab + 1));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].first == rows[i - 1].first) {
            throw IoError(fmt::format("duplicate corpus id {}", rows[i].first));
        }
    }

    RetrievalSet set;
    for (auto& [id, text] : rows) {
        set.ids.push_back(id);
        set.texts.push_back(std::move(text));
    }

    line_no = 0;
    while (next_line(queries, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) {
            throw IoError(fmt::format("queries line {}: expected text<TAB>gold_id[,gold_id...]", line_no));
        }
        RetrievalQuery q;
        q.text = line.substr(0, tab);
        std::string_view golds = std::string_view(line).substr(tab + 1);
        while (!golds.empty()) {
            const auto comma = golds.find(',');
            q.gold.push_back(parse_id(golds.substr(0, comma), "queries", line_no));
            golds = comma == std::string_view::npos ? std::string_view{} : golds.substr(comma + 1);
        }
        set.queries.push_back(std::move(q));
    }
    try {
        set.validate();
    } catch (const Error& e) {
        throw IoError(e.what());
    }
    return set;
}

RetrievalSet read_retrieval_set(const std::filesystem::path& corpus, const std::filesystem::path& queries) {
    std::ifstream c(corpus);
    if (!c) {
        throw IoError(fmt::format("cannot open retrieval corpus '{}'", corpus.string()));
    }
    std::ifstream q(queries);
    if (!q) {
        throw IoError(fmt::format("cannot open retrieval queries '{}'", queries.string()));
    }
    return read_retrieval_set(c, q);
}

Eigen::MatrixXd embed_corpus(std::span<const std::string> texts, const Embedder& embedder, unsigned threads) {
    if (texts.empty()) {
        throw Error("cannot embed an empty corpus");
    }
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (tokenize(texts[i]).empty()) {
            throw Error(fmt::format("text {} is empty", i));
        }
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(embedder.dimension()));
    parallel_for(texts.size(), threads, [&](std::size_t i) {
        const auto v = embedder.embed(texts[i]);
        if (v.size() != out.cols()) {
            throw Error(fmt::format("embedder returned dimension {} for text {}, expected {}", v.size(), i,
                                    out.cols()));
        }
        out.row(static_cast<Eigen::Index>(i)) = v.transpose();
    });
    return out;
}

std::vector<std::size_t> rank_by_score(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
    return order;
}

std::vector<std::size_t> retrieve_topk(const Eigen::VectorXd& query, const Eigen::MatrixXd& corpus, std::size_t k) {
    if (query.size() != corpus.cols()) {
        throw Error(fmt::format("query dimension {} does not match corpus dimension {}", query.size(), corpus.cols()));
    }
    const double qn = query.norm();
    std::vector<double> scores(static_cast<std::size_t>(corpus.rows()), 0.0);
    for (Eigen::Index i = 0; i < corpus.rows(); ++i) {
        const double denom = qn * corpus.row(i).norm();
        scores[static_cast<std::size_t>(i)] = denom > 0.0 ? corpus.row(i).dot(query) / denom : 0.0;
    }
    k = std::min(k, scores.size());
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t x, std::size_t y) {
                          return scores[x] != scores[y] ? scores[x] > scores[y] : x < y;
                      });
    order.resize(k);
    return order;
}

std::vector<double> topk_accuracy(std::span<const std::vector<std::int64_t>> rankings,
                                  std::span<const std::vector<std::int64_t>> gold, std::span<const std::size_t> ks) {
    if (rankings.size() != gold.size()) {
        throw Error(fmt::format("{} rankings for {} gold sets", rankings.size(), gold.size()));
    }
    std::vector<double> acc(ks.size(), 0.0);
    if (rankings.empty()) {
        return acc;
    }
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        if (gold[q].empty()) {
            throw Error(fmt::format("query {} has no gold set", q));
        }
        // First rank (0-based) at which a gold id appears.
        std::size_t first = rankings[q].size();
        for (std::size_t r = 0; r < rankings[q].size(); ++r) {
            if (std::find(gold[q].begin(), gold[q].end(), rankings[q][r]) != gold[q].end()) {
                first = r;
                break;
            }
        }
        for (std::size_t i = 0; i < ks.size(); ++i) {
            acc[i] += first < ks[i] ? 1.0 : 0.0;
        }
    }
    for (auto& a : acc) {
        a /= static_cast<double>(rankings.size());
    }
    return acc;
}

std::vector<GroupedAccuracy> topk_accuracy_by_group(std::span<const std::vector<std::int64_t>> rankings,
                                                    std::span<const std::vector<std::int64_t>> gold,
                                                    std::span<const std::string> groups,
                                                    std::span<const std::size_t> ks) {
    if (groups.size() != rankings.size()) {
        throw Error(fmt::format("{} group labels for {} rankings", groups.size(), rankings.size()));
    }
    std::vector<std::string> labels;
    for (const auto& g : groups) {
        if (std::find(labels.begin(), labels.end(), g) == labels.end()) {
            labels.push_back(g);
        }
    }
    std::vector<GroupedAccuracy> out;
    for (const auto& label : labels) {
        std::vector<std::vector<std::int64_t>> r;
        std::vector<std::vector<std::int64_t>> g;
        for (std::size_t q = 0; q < groups.size(); ++q) {
            if (groups[q] == label) {
                r.push_back(rankings[q]);
                g.push_back(gold[q]);
            }
        }
        out.push_back({label, r.size(), topk_accuracy(r, g, ks)});
    }
    return out;
}

}  // namespace ulr
