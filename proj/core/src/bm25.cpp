#include <cmath>

#include <fmt/format.h>

#include "ulr/error.hpp"
#include "ulr/evaluation.hpp"

namespace ulr {

Bm25Index::Bm25Index(std::span<const std::vector<std::string>> documents, double k1, double b) : k1_(k1), b_(b) {
    if (k1 < 0.0 || b < 0.0 || b > 1.0) {
        throw Error(fmt::format("invalid BM25 parameters k1={} b={}", k1, b));
    }
    std::size_t total = 0;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        lengths_.push_back(documents[d].size());
        total += documents[d].size();
        for (const auto& term : documents[d]) {
            auto& list = postings_[term];
            if (!list.empty() && list.back().first == d) {
                ++list.back().second;
            } else {
                list.emplace_back(d, 1);
            }
        }
    }
    avg_length_ = documents.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(documents.size());
}

double Bm25Index::idf(const std::string& term) const {
    const auto it = postings_.find(term);
    const double df = it == postings_.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(lengths_.size());
    return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

std::vector<double> Bm25Index::scores(std::span<const std::string> query) const {
    std::vector<double> out(lengths_.size(), 0.0);
    if (avg_length_ == 0.0) {
        return out;
    }
    for (const auto& term : query) {
        const auto it = postings_.find(term);
        if (it == postings_.end()) {
            continue;
        }
        const double w = idf(term);
        for (const auto& [doc, tf] : it->second) {
            const double f = static_cast<double>(tf);
            const double norm = k1_ * (1.0 - b_ + b_ * static_cast<double>(lengths_[doc]) / avg_length_);
            out[doc] += w * f * (k1_ + 1.0) / (f + norm);
        }
    }
    return out;
}

std::vector<std::size_t> Bm25Index::rank(std::span<const std::string> query) const {
    const auto s = scores(query);
    return rank_by_score(s);
}

std::vector<std::size_t> bm25_rank(std::span<const std::string> query,
                                   std::span<const std::vector<std::string>> documents, double k1, double b) {
    return Bm25Index(documents, k1, b).rank(query);
}

}  // namespace ulr
