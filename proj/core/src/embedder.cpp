#include <cmath>
#include <fstream>
#include <istream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ulr/error.hpp"
#include "ulr/evaluation.hpp"

namespace ulr {

Eigen::VectorXd unit_normalized(const Eigen::VectorXd& v) {
    const double norm = v.norm();
    if (!std::isfinite(norm) || norm == 0.0) {
        throw NumericError("cannot normalize a zero or non-finite vector");
    }
    return v / norm;
}

EncoderEmbedder::EncoderEmbedder(Checkpoint checkpoint, Vocabulary vocab, Pooling pooling)
    : checkpoint_(std::move(checkpoint)), vocab_(std::move(vocab)), pooling_(pooling) {
    if (vocab_.size() != checkpoint_.config.vocab_size) {
        throw Error(fmt::format("vocabulary has {} entries but the checkpoint expects {}", vocab_.size(),
                                checkpoint_.config.vocab_size));
    }
}

Eigen::VectorXd EncoderEmbedder::embed(std::string_view text) const {
    const auto tokens = tokenize(text);
    return embed_tokens(tokens);
}

Eigen::VectorXd EncoderEmbedder::embed_tokens(std::span<const std::string> tokens) const {
    if (tokens.empty()) {
        throw Error("cannot embed a text without tokens");
    }
    const auto& config = checkpoint_.config;
    const auto encoded = encode(tokens, vocab_);
    if (encoded.size() + 2 > config.max_len) {
        spdlog::warn("truncating a {}-token text to {} tokens", encoded.size(), config.max_len - 2);
    }
    const auto framed = frame_sequence(encoded.ids, config.max_len);
    SequenceCache<float> cache;
    forward_sequence<float>(checkpoint_.params, config, framed, framed.size(), DropoutContext::disabled(), cache);
    const RowVector<float> pooled = pool_sequence<float>(cache.hidden, framed.size(), pooling_, cache.pooled);
    return unit_normalized(pooled.transpose().cast<double>());
}

BagOfWordsEmbedder::BagOfWordsEmbedder(std::unordered_map<std::string, Eigen::VectorXd> vectors)
    : vectors_(std::move(vectors)) {
    if (vectors_.empty()) {
        throw Error("word vector table is empty");
    }
    dimension_ = static_cast<std::size_t>(vectors_.begin()->second.size());
    for (const auto& [token, v] : vectors_) {
        if (static_cast<std::size_t>(v.size()) != dimension_) {
            throw Error(fmt::format("word vector '{}' has dimension {}, expected {}", token, v.size(), dimension_));
        }
    }
}

BagOfWordsEmbedder BagOfWordsEmbedder::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open word vectors '{}'", path.string()));
    }
    return read(in);
}

BagOfWordsEmbedder BagOfWordsEmbedder::read(std::istream& in) {
    std::unordered_map<std::string, Eigen::VectorXd> vectors;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string token;
        if (!(fields >> token)) {
            continue;
        }
        std::vector<double> values;
        double x;
        while (fields >> x) {
            values.push_back(x);
        }
        if (!fields.eof()) {
            throw IoError(fmt::format("word vectors line {}: non-numeric component", line_no));
        }
        if (values.empty()) {
            throw IoError(fmt::format("word vectors line {}: no components", line_no));
        }
        vectors[token] = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    }
    return BagOfWordsEmbedder(std::move(vectors));
}

Eigen::VectorXd BagOfWordsEmbedder::embed(std::string_view text) const {
    const auto tokens = tokenize(text);
    if (tokens.empty()) {
        throw Error("cannot embed a text without tokens");
    }
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dimension_));
    std::size_t known = 0;
    for (const auto& t : tokens) {
        if (auto it = vectors_.find(t); it != vectors_.end()) {
            sum += it->second;
            ++known;
        }
    }
    if (known == 0) {
        throw Error(fmt::format("no word vector for any token of '{}'", text));
    }
    return unit_normalized(sum / static_cast<double>(known));
}

}  // namespace ulr
