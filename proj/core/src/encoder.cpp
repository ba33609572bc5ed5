#include "ulr/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "ulr/error.hpp"
#include "ulr/parallel.hpp"
#include "ulr/random.hpp"

namespace ulr {

namespace {

constexpr double kLayerNormEps = 1e-12;
constexpr double kInitStddev = 0.02;
// Examples per gradient accumulator. Fixed so the reduction order does not depend on the
// thread count.
constexpr std::size_t kGradientChunk = 8;

template <typename P, typename F>
void visit_tensors(P& p, F&& f) {
    f(std::string("embeddings.token"), 2, p.token_embedding);
    f(std::string("embeddings.position"), 2, p.position_embedding);
    f(std::string("embeddings.norm.gain"), 1, p.embedding_norm.gain);
    f(std::string("embeddings.norm.bias"), 1, p.embedding_norm.bias);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const auto prefix = fmt::format("layers.{}.", i);
        f(prefix + "attention.query.weight", 2, l.query.weight);
        f(prefix + "attention.query.bias", 1, l.query.bias);
        f(prefix + "attention.key.weight", 2, l.key.weight);
        f(prefix + "attention.key.bias", 1, l.key.bias);
        f(prefix + "attention.value.weight", 2, l.value.weight);
        f(prefix + "attention.value.bias", 1, l.value.bias);
        f(prefix + "attention.output.weight", 2, l.output.weight);
        f(prefix + "attention.output.bias", 1, l.output.bias);
        f(prefix + "attention.norm.gain", 1, l.attention_norm.gain);
        f(prefix + "attention.norm.bias", 1, l.attention_norm.bias);
        f(prefix + "ff.in.weight", 2, l.ff_in.weight);
        f(prefix + "ff.in.bias", 1, l.ff_in.bias);
        f(prefix + "ff.out.weight", 2, l.ff_out.weight);
        f(prefix + "ff.out.bias", 1, l.ff_out.bias);
        f(prefix + "ff.norm.gain", 1, l.ff_norm.gain);
        f(prefix + "ff.norm.bias", 1, l.ff_norm.bias);
    }
    f(std::string("pooler.weight"), 2, p.pooler.weight);
    f(std::string("pooler.bias"), 1, p.pooler.bias);
    f(std::string("mlm.transform.weight"), 2, p.mlm_transform.weight);
    f(std::string("mlm.transform.bias"), 1, p.mlm_transform.bias);
    f(std::string("mlm.norm.gain"), 1, p.mlm_norm.gain);
    f(std::string("mlm.norm.bias"), 1, p.mlm_norm.bias);
    f(std::string("mlm.bias"), 1, p.mlm_bias);
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Linear<T>& p) {
    Matrix<T> out = x * p.weight;
    out.rowwise() += p.bias.row(0);
    return out;
}

template <typename T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& d_out, Linear<T>& g) {
    g.weight.noalias() += x.transpose() * d_out;
    g.bias += d_out.colwise().sum();
}

template <typename T>
void layer_norm_forward(const Matrix<T>& x, const LayerNormParams<T>& p, LayerNormCache<T>& cache,
                        Matrix<T>& out) {
    const auto rows = x.rows();
    cache.normalized.resize(rows, x.cols());
    cache.inv_std.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).eval();
        const T var = centered.square().mean();
        const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
        cache.inv_std(r) = inv;
        cache.normalized.row(r) = (centered * inv).matrix();
    }
    out = cache.normalized.array().rowwise() * p.gain.row(0).array();
    out.rowwise() += p.bias.row(0);
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& d_out, const LayerNormParams<T>& p,
                              const LayerNormCache<T>& cache, LayerNormParams<T>& g) {
    g.gain += d_out.cwiseProduct(cache.normalized).colwise().sum();
    g.bias += d_out.colwise().sum();
    const Matrix<T> d_hat = d_out.array().rowwise() * p.gain.row(0).array();
    Matrix<T> d_x(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        const T mean_d = d_hat.row(r).mean();
        const T mean_dx = d_hat.row(r).cwiseProduct(cache.normalized.row(r)).mean();
        d_x.row(r) = cache.inv_std(r) *
                     (d_hat.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dx).matrix();
    }
    return d_x;
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, const DropoutContext& ctx,
                       std::uint64_t site) {
    const KeyedUniform uniform(hash_combine(ctx.key, site));
    const T scale = T(1) / T(1 - ctx.rate);
    Matrix<T> mask(rows, cols);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
        mask.data()[i] = uniform(static_cast<std::uint64_t>(i)) < ctx.rate ? T(0) : scale;
    }
    return mask;
}

constexpr std::uint64_t site_id(std::size_t layer, std::uint64_t slot) noexcept {
    return (static_cast<std::uint64_t>(layer) + 1) * 1024 + slot;
}
constexpr std::uint64_t kEmbeddingSite = 0;
constexpr std::uint64_t kAttentionOutSlot = 1000;
constexpr std::uint64_t kFeedForwardSlot = 1001;

template <typename T>
void log_softmax_rows(Matrix<T>& logits) {
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T m = logits.row(r).maxCoeff();
        const T lse = m + std::log((logits.row(r).array() - m).exp().sum());
        logits.row(r).array() -= lse;
    }
}

template <typename T>
std::string first_non_finite_tensor(const EncoderParams<T>& params) {
    for (const auto& t : params.tensors()) {
        if (!t.tensor->allFinite()) {
            return t.name;
        }
    }
    return {};
}

}  // namespace

Pooling parse_pooling(std::string_view name) {
    if (name == "cls") {
        return Pooling::cls;
    }
    if (name == "mean") {
        return Pooling::mean;
    }
    if (name == "max") {
        return Pooling::max;
    }
    throw Error(fmt::format("unknown pooling '{}' (expected cls, mean or max)", name));
}

std::string_view to_string(Pooling pooling) noexcept {
    switch (pooling) {
        case Pooling::cls:
            return "cls";
        case Pooling::mean:
            return "mean";
        case Pooling::max:
            return "max";
    }
    return "?";
}

void EncoderConfig::validate() const {
    if (vocab_size <= static_cast<std::size_t>(special::kCount)) {
        throw Error(fmt::format("vocab_size must exceed {} (the special tokens)", special::kCount));
    }
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw Error(fmt::format("d_model ({}) must be divisible by n_heads ({})", d_model, n_heads));
    }
    if (n_layers == 0) {
        throw Error("n_layers must be at least 1");
    }
    if (d_ff == 0) {
        throw Error("d_ff must be positive");
    }
    if (max_len < 3) {
        throw Error(fmt::format("max_len must be at least 3, got {}", max_len));
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw Error(fmt::format("dropout must lie in [0, 1), got {}", dropout));
    }
}

template <typename T>
std::vector<NamedTensor<T>> EncoderParams<T>::tensors() {
    std::vector<NamedTensor<T>> out;
    visit_tensors(*this, [&](std::string name, int rank, Matrix<T>& m) {
        out.push_back({std::move(name), rank, &m});
    });
    return out;
}

template <typename T>
std::vector<ConstNamedTensor<T>> EncoderParams<T>::tensors() const {
    std::vector<ConstNamedTensor<T>> out;
    visit_tensors(*this, [&](std::string name, int rank, const Matrix<T>& m) {
        out.push_back({std::move(name), rank, &m});
    });
    return out;
}

template <typename T>
std::size_t EncoderParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) {
        n += static_cast<std::size_t>(t.tensor->size());
    }
    return n;
}

template <typename T>
EncoderParams<T> EncoderParams<T>::zeros_like() const {
    EncoderParams copy = *this;
    copy.set_zero();
    return copy;
}

template <typename T>
void EncoderParams<T>::set_zero() {
    for (auto& t : tensors()) {
        t.tensor->setZero();
    }
}

template <typename T>
void EncoderParams<T>::accumulate(const EncoderParams& other) {
    auto mine = tensors();
    const auto theirs = other.tensors();
    for (std::size_t i = 0; i < mine.size(); ++i) {
        *mine[i].tensor += *theirs[i].tensor;
    }
}

template <typename T>
template <typename U>
EncoderParams<U> EncoderParams<T>::cast() const {
    EncoderParams<U> out;
    out.layers.resize(layers.size());
    auto dst = out.tensors();
    const auto src = tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
        *dst[i].tensor = src[i].tensor->template cast<U>();
    }
    return out;
}

template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config) {
    config.validate();
    const auto v = static_cast<Eigen::Index>(config.vocab_size);
    const auto d = static_cast<Eigen::Index>(config.d_model);
    const auto ff = static_cast<Eigen::Index>(config.d_ff);
    const auto len = static_cast<Eigen::Index>(config.max_len);
    const auto linear_of = [](Eigen::Index in, Eigen::Index out) {
        return Linear<T>{Matrix<T>(in, out), Matrix<T>(1, out)};
    };
    const auto norm_of = [](Eigen::Index n) { return LayerNormParams<T>{Matrix<T>(1, n), Matrix<T>(1, n)}; };

    EncoderParams<T> p;
    p.token_embedding.resize(v, d);
    p.position_embedding.resize(len, d);
    p.embedding_norm = norm_of(d);
    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.query = linear_of(d, d);
        l.key = linear_of(d, d);
        l.value = linear_of(d, d);
        l.output = linear_of(d, d);
        l.attention_norm = norm_of(d);
        l.ff_in = linear_of(d, ff);
        l.ff_out = linear_of(ff, d);
        l.ff_norm = norm_of(d);
    }
    p.pooler = linear_of(d, d);
    p.mlm_transform = linear_of(d, d);
    p.mlm_norm = norm_of(d);
    p.mlm_bias.resize(1, v);

    Rng rng(config.seed);
    for (auto& t : p.tensors()) {
        if (t.rank == 2) {
            for (Eigen::Index i = 0; i < t.tensor->size(); ++i) {
                t.tensor->data()[i] = static_cast<T>(rng.truncated_normal(kInitStddev));
            }
        } else if (t.name.ends_with(".gain")) {
            t.tensor->setOnes();
        } else {
            t.tensor->setZero();
        }
    }
    return p;
}

std::vector<TokenId> frame_sequence(std::span<const TokenId> tokens, std::size_t max_len) {
    if (max_len < 3) {
        throw Error("max_len must be at least 3");
    }
    const std::size_t keep = std::min(tokens.size(), max_len - 2);
    std::vector<TokenId> framed;
    framed.reserve(keep + 2);
    framed.push_back(special::kCls);
    framed.insert(framed.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
    framed.push_back(special::kSep);
    return framed;
}

Batch Batch::frame(std::span<const std::vector<TokenId>> sequences, std::size_t max_len) {
    Batch batch;
    batch.rows = sequences.size();
    std::vector<std::vector<TokenId>> framed;
    framed.reserve(sequences.size());
    for (const auto& s : sequences) {
        framed.push_back(frame_sequence(s, max_len));
        batch.cols = std::max(batch.cols, framed.back().size());
    }
    batch.ids.assign(batch.rows * batch.cols, special::kPad);
    batch.mask.assign(batch.rows * batch.cols, 0);
    for (std::size_t r = 0; r < batch.rows; ++r) {
        std::copy(framed[r].begin(), framed[r].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(r * batch.cols));
        std::fill_n(batch.mask.begin() + static_cast<std::ptrdiff_t>(r * batch.cols), framed[r].size(), 1);
        batch.lengths.push_back(framed[r].size());
    }
    return batch;
}

void Batch::validate() const {
    if (ids.size() != rows * cols || mask.size() != rows * cols || lengths.size() != rows) {
        throw Error("batch: inconsistent shapes");
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const auto m = row_mask(r);
        const auto len = lengths[r];
        if (len < 2 || len > cols) {
            throw Error(fmt::format("batch row {}: length {} outside 2..{}", r, len, cols));
        }
        for (std::size_t c = 0; c < cols; ++c) {
            if ((m[c] != 0) != (c < len)) {
                throw Error(fmt::format("batch row {}: padding must be a contiguous tail", r));
            }
        }
        if (row(r)[0] != special::kCls || row(r)[len - 1] != special::kSep) {
            throw Error(fmt::format("batch row {}: must start with [CLS] and end with [SEP]", r));
        }
    }
}

DropoutContext DropoutContext::keyed(double rate, std::uint64_t seed, std::uint64_t step,
                                     std::uint64_t stream) noexcept {
    return {rate, hash_combine(hash_combine(mix64(seed), step), stream)};
}

template <typename T>
void forward_sequence(const EncoderParams<T>& params, const EncoderConfig& config,
                      std::span<const TokenId> ids, std::size_t length,
                      const DropoutContext& dropout, SequenceCache<T>& cache) {
    const auto len = static_cast<Eigen::Index>(ids.size());
    if (ids.empty() || ids.size() > config.max_len) {
        throw Error(fmt::format("sequence length {} outside 1..max_len ({})", ids.size(), config.max_len));
    }
    if (length == 0 || length > ids.size()) {
        throw Error(fmt::format("real length {} outside 1..{}", length, ids.size()));
    }
    const auto d = static_cast<Eigen::Index>(config.d_model);
    const auto heads = config.n_heads;
    const auto dh = static_cast<Eigen::Index>(config.head_dim());
    const auto real = static_cast<Eigen::Index>(length);
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    cache.ids.assign(ids.begin(), ids.end());
    cache.length = length;

    Matrix<T> x(len, d);
    for (Eigen::Index i = 0; i < len; ++i) {
        const auto id = ids[static_cast<std::size_t>(i)];
        if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
            throw Error(fmt::format("token id {} outside vocabulary of size {}", id, config.vocab_size));
        }
        x.row(i) = params.token_embedding.row(id) + params.position_embedding.row(i);
    }
    Matrix<T> h;
    layer_norm_forward(x, params.embedding_norm, cache.embedding_norm, h);
    if (dropout.active()) {
        cache.embedding_dropout = dropout_mask<T>(len, d, dropout, kEmbeddingSite);
        h = h.cwiseProduct(cache.embedding_dropout);
    } else {
        cache.embedding_dropout.resize(0, 0);
    }

    cache.layers.resize(params.layers.size());
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        const auto& p = params.layers[li];
        auto& c = cache.layers[li];
        c.input = h;
        c.q = linear(h, p.query);
        c.k = linear(h, p.key);
        c.v = linear(h, p.value);
        c.context.resize(len, d);
        c.attention.resize(heads);
        c.attention_dropout.resize(dropout.active() ? heads : 0);
        for (std::size_t hd = 0; hd < heads; ++hd) {
            const auto off = static_cast<Eigen::Index>(hd) * dh;
            const Matrix<T> scores = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
            auto& probs = c.attention[hd];
            probs.setZero(len, len);
            for (Eigen::Index r = 0; r < len; ++r) {
                // Padded keys get -inf logits, i.e. exactly zero probability.
                const auto row = scores.row(r).head(real);
                const T m = row.maxCoeff();
                probs.row(r).head(real) = (row.array() - m).exp().matrix();
                probs.row(r).head(real) /= probs.row(r).head(real).sum();
            }
            if (dropout.active()) {
                c.attention_dropout[hd] = dropout_mask<T>(len, len, dropout, site_id(li, hd));
                c.context.middleCols(off, dh).noalias() =
                    probs.cwiseProduct(c.attention_dropout[hd]) * c.v.middleCols(off, dh);
            } else {
                c.context.middleCols(off, dh).noalias() = probs * c.v.middleCols(off, dh);
            }
        }
        Matrix<T> attn = linear(c.context, p.output);
        if (dropout.active()) {
            c.attention_out_dropout = dropout_mask<T>(len, d, dropout, site_id(li, kAttentionOutSlot));
            attn = attn.cwiseProduct(c.attention_out_dropout);
        } else {
            c.attention_out_dropout.resize(0, 0);
        }
        layer_norm_forward<T>(h + attn, p.attention_norm, c.attention_norm, c.attention_normed);

        c.ff_pre = linear(c.attention_normed, p.ff_in);
        c.ff_act = c.ff_pre.unaryExpr([](T v) { return gelu(v); });
        Matrix<T> ff = linear(c.ff_act, p.ff_out);
        if (dropout.active()) {
            c.ff_out_dropout = dropout_mask<T>(len, d, dropout, site_id(li, kFeedForwardSlot));
            ff = ff.cwiseProduct(c.ff_out_dropout);
        } else {
            c.ff_out_dropout.resize(0, 0);
        }
        layer_norm_forward<T>(c.attention_normed + ff, p.ff_norm, c.ff_norm, h);
    }
    cache.hidden = std::move(h);
    cache.pooled = (cache.hidden.row(0) * params.pooler.weight + params.pooler.bias).array().tanh().matrix();
}

template <typename T>
void backward_sequence(const EncoderParams<T>& params, const EncoderConfig& config,
                       const SequenceCache<T>& cache, Matrix<T> d_hidden,
                       const RowVector<T>& d_pooled, EncoderParams<T>& grads) {
    const auto len = cache.hidden.rows();
    const auto d = cache.hidden.cols();
    const auto dh = static_cast<Eigen::Index>(config.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    if (d_hidden.size() == 0) {
        d_hidden.setZero(len, d);
    }
    if (d_pooled.size() != 0) {
        const RowVector<T> dz = d_pooled.cwiseProduct((T(1) - cache.pooled.array().square()).matrix());
        grads.pooler.weight.noalias() += cache.hidden.row(0).transpose() * dz;
        grads.pooler.bias += dz;
        d_hidden.row(0).noalias() += dz * params.pooler.weight.transpose();
    }

    Matrix<T> dh_cur = std::move(d_hidden);
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& p = params.layers[li];
        const auto& c = cache.layers[li];
        auto& g = grads.layers[li];

        Matrix<T> d_sum = layer_norm_backward(dh_cur, p.ff_norm, c.ff_norm, g.ff_norm);
        Matrix<T> d_ff = c.ff_out_dropout.size() ? Matrix<T>(d_sum.cwiseProduct(c.ff_out_dropout)) : d_sum;
        linear_backward(c.ff_act, d_ff, g.ff_out);
        Matrix<T> d_pre = (d_ff * p.ff_out.weight.transpose()).cwiseProduct(
            c.ff_pre.unaryExpr([](T v) { return gelu_derivative(v); }));
        linear_backward(c.attention_normed, d_pre, g.ff_in);
        Matrix<T> d_normed = d_sum;
        d_normed.noalias() += d_pre * p.ff_in.weight.transpose();

        Matrix<T> d_res = layer_norm_backward(d_normed, p.attention_norm, c.attention_norm, g.attention_norm);
        Matrix<T> d_attn =
            c.attention_out_dropout.size() ? Matrix<T>(d_res.cwiseProduct(c.attention_out_dropout)) : d_res;
        linear_backward(c.context, d_attn, g.output);
        const Matrix<T> d_context = d_attn * p.output.weight.transpose();

        Matrix<T> dq(len, d);
        Matrix<T> dk(len, d);
        Matrix<T> dv(len, d);
        for (std::size_t hd = 0; hd < config.n_heads; ++hd) {
            const auto off = static_cast<Eigen::Index>(hd) * dh;
            const auto& probs = c.attention[hd];
            const bool dropped = !c.attention_dropout.empty();
            const Matrix<T> probs_used = dropped ? Matrix<T>(probs.cwiseProduct(c.attention_dropout[hd])) : probs;
            const auto d_ctx = d_context.middleCols(off, dh);
            dv.middleCols(off, dh).noalias() = probs_used.transpose() * d_ctx;
            Matrix<T> d_probs = d_ctx * c.v.middleCols(off, dh).transpose();
            if (dropped) {
                d_probs = d_probs.cwiseProduct(c.attention_dropout[hd]);
            }
            Matrix<T> d_scores(len, len);
            for (Eigen::Index r = 0; r < len; ++r) {
                const T dot = d_probs.row(r).dot(probs.row(r));
                d_scores.row(r) = probs.row(r).cwiseProduct((d_probs.row(r).array() - dot).matrix());
            }
            d_scores *= scale;
            dq.middleCols(off, dh).noalias() = d_scores * c.k.middleCols(off, dh);
            dk.middleCols(off, dh).noalias() = d_scores.transpose() * c.q.middleCols(off, dh);
        }
        linear_backward(c.input, dq, g.query);
        linear_backward(c.input, dk, g.key);
        linear_backward(c.input, dv, g.value);
        dh_cur = d_res;
        dh_cur.noalias() += dq * p.query.weight.transpose();
        dh_cur.noalias() += dk * p.key.weight.transpose();
        dh_cur.noalias() += dv * p.value.weight.transpose();
    }

    if (cache.embedding_dropout.size()) {
        dh_cur = dh_cur.cwiseProduct(cache.embedding_dropout);
    }
    const Matrix<T> d_embed = layer_norm_backward(dh_cur, params.embedding_norm, cache.embedding_norm,
                                                  grads.embedding_norm);
    for (Eigen::Index i = 0; i < len; ++i) {
        grads.token_embedding.row(cache.ids[static_cast<std::size_t>(i)]) += d_embed.row(i);
        grads.position_embedding.row(i) += d_embed.row(i);
    }
}

template <typename T>
ForwardOutput<T> forward(const Batch& batch, const EncoderParams<T>& params, const EncoderConfig& config,
                         bool train_mode, std::uint64_t step) {
    batch.validate();
    if (batch.cols > config.max_len) {
        throw Error(fmt::format("batch length {} exceeds max_len {}", batch.cols, config.max_len));
    }
    ForwardOutput<T> out;
    out.sequences.resize(batch.rows);
    out.pooled.resize(static_cast<Eigen::Index>(batch.rows), static_cast<Eigen::Index>(config.d_model));
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const auto ctx = (train_mode && config.dropout > 0.0)
                             ? DropoutContext::keyed(config.dropout, config.seed, step, r)
                             : DropoutContext::disabled();
        const auto length = batch.lengths[r];
        auto& seq = out.sequences[r];
        forward_sequence(params, config, batch.row(r).first(length), length, ctx, seq);
        const auto real = seq.hidden.rows();
        seq.hidden.conservativeResize(static_cast<Eigen::Index>(batch.cols), Eigen::NoChange);
        seq.hidden.bottomRows(seq.hidden.rows() - real).setZero();
        out.pooled.row(static_cast<Eigen::Index>(r)) = seq.pooled;
    }
    return out;
}

template <typename T>
RowVector<T> pool_sequence(const Matrix<T>& hidden, std::size_t length, Pooling strategy,
                           const RowVector<T>& pooled_cls) {
    if (length == 0 || static_cast<Eigen::Index>(length) > hidden.rows()) {
        throw Error("pooling over an empty mask");
    }
    const auto n = static_cast<Eigen::Index>(length);
    switch (strategy) {
        case Pooling::cls:
            return pooled_cls;
        case Pooling::mean:
            return hidden.topRows(n).colwise().mean();
        case Pooling::max:
            return hidden.topRows(n).colwise().maxCoeff();
    }
    throw Error("unknown pooling strategy");
}

template <typename T>
void pool_backward(const Matrix<T>& hidden, std::size_t length, Pooling strategy,
                   const RowVector<T>& d_out, Matrix<T>& d_hidden, RowVector<T>& d_pooled_cls) {
    const auto n = static_cast<Eigen::Index>(length);
    switch (strategy) {
        case Pooling::cls:
            d_pooled_cls += d_out;
            return;
        case Pooling::mean:
            d_hidden.topRows(n).rowwise() += d_out / static_cast<T>(n);
            return;
        case Pooling::max:
            for (Eigen::Index c = 0; c < hidden.cols(); ++c) {
                Eigen::Index arg = 0;
                hidden.col(c).head(n).maxCoeff(&arg);
                d_hidden(arg, c) += d_out(c);
            }
            return;
    }
}

template <typename T>
Matrix<T> pool(const ForwardOutput<T>& output, const Batch& batch, Pooling strategy) {
    const auto d = output.pooled.cols();
    Matrix<T> pooled(static_cast<Eigen::Index>(batch.rows), d);
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const auto m = batch.row_mask(r);
        const auto length = static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
        if (length == 0) {
            throw Error(fmt::format("pooling row {}: all-zero mask", r));
        }
        const auto& seq = output.sequences[r];
        pooled.row(static_cast<Eigen::Index>(r)) = pool_sequence(seq.hidden, length, strategy, seq.pooled);
    }
    return pooled;
}

template <typename T>
void mlm_head_forward(const EncoderParams<T>& params, const Matrix<T>& rows, MlmHeadCache<T>& cache) {
    cache.input = rows;
    cache.pre = linear(rows, params.mlm_transform);
    cache.act = cache.pre.unaryExpr([](T v) { return gelu(v); });
    layer_norm_forward(cache.act, params.mlm_norm, cache.norm, cache.normed);
    cache.log_probs.noalias() = cache.normed * params.token_embedding.transpose();
    cache.log_probs.rowwise() += params.mlm_bias.row(0);
    log_softmax_rows(cache.log_probs);
}

template <typename T>
Matrix<T> mlm_head_backward(const EncoderParams<T>& params, const MlmHeadCache<T>& cache,
                            const Matrix<T>& d_logits, EncoderParams<T>& grads) {
    grads.token_embedding.noalias() += d_logits.transpose() * cache.normed;
    grads.mlm_bias += d_logits.colwise().sum();
    const Matrix<T> d_normed = d_logits * params.token_embedding;
    const Matrix<T> d_act = layer_norm_backward(d_normed, params.mlm_norm, cache.norm, grads.mlm_norm);
    const Matrix<T> d_pre = d_act.cwiseProduct(cache.pre.unaryExpr([](T v) { return gelu_derivative(v); }));
    linear_backward(cache.input, d_pre, grads.mlm_transform);
    return d_pre * params.mlm_transform.weight.transpose();
}

template <typename T>
std::vector<Matrix<T>> mlm_log_probs(const ForwardOutput<T>& output, const EncoderParams<T>& params) {
    std::vector<Matrix<T>> out;
    out.reserve(output.sequences.size());
    MlmHeadCache<T> head;
    for (const auto& seq : output.sequences) {
        mlm_head_forward(params, seq.hidden, head);
        out.push_back(head.log_probs);
    }
    return out;
}

template <typename T>
T misad_loss(const RowVector<T>& e_w, const RowVector<T>& e_r, const RowVector<T>& e_s,
             RowVector<T>* d_w, RowVector<T>* d_r, RowVector<T>* d_s) {
    if (e_w.size() != e_r.size() || e_w.size() != e_s.size() || e_w.size() == 0) {
        throw Error("misad_loss: embeddings must share a positive dimension");
    }
    const T nw = e_w.norm();
    const T nr = e_r.norm();
    const T ns = e_s.norm();
    if (!(nw > T(0)) || !(nr > T(0)) || !(ns > T(0))) {
        throw NumericError("degenerate embedding");
    }
    const RowVector<T> uw = e_w / nw;
    const RowVector<T> ur = e_r / nr;
    const RowVector<T> us = e_s / ns;
    const RowVector<T> diff = uw + ur - us;
    const T dim = static_cast<T>(diff.size());
    const T loss = diff.squaredNorm() / dim;
    // d/dx (x/|x|) applied to g: (g - u (u.g)) / |x|
    const RowVector<T> g = diff * (T(2) / dim);
    if (d_w != nullptr) {
        *d_w = (g - uw * uw.dot(g)) / nw;
    }
    if (d_r != nullptr) {
        *d_r = (g - ur * ur.dot(g)) / nr;
    }
    if (d_s != nullptr) {
        *d_s = (-g + us * us.dot(g)) / ns;
    }
    return loss;
}

template <typename T>
T mlm_loss(const Matrix<T>& log_probs, std::span<const MaskedLabel> labels) {
    if (labels.empty()) {
        return T(0);
    }
    T sum = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        sum -= log_probs(static_cast<Eigen::Index>(i), labels[i].token);
    }
    return sum / static_cast<T>(labels.size());
}

namespace {

template <typename T>
LossReport objective(const EncoderParams<T>& params, const EncoderConfig& config,
                     std::span<const PreparedExample> batch, const ObjectiveOptions& options,
                     EncoderParams<T>* grads) {
    std::size_t n_split = 0;
    std::size_t n_labels = 0;
    for (const auto& ex : batch) {
        n_split += ex.has_split ? 1 : 0;
        n_labels += ex.labels.size();
    }
    const auto d = static_cast<Eigen::Index>(config.d_model);
    const T misad_scale = n_split ? T(options.weights.misad / static_cast<double>(n_split)) : T(0);
    const T mlm_scale = n_labels ? T(options.weights.mlm / static_cast<double>(n_labels)) : T(0);

    const auto context = [&](std::size_t example, std::uint64_t role) {
        return options.dropout > 0.0
                   ? DropoutContext::keyed(options.dropout, options.seed, options.step, example * 3 + role)
                   : DropoutContext::disabled();
    };

    struct ChunkResult {
        double misad = 0.0;
        double mlm = 0.0;
        EncoderParams<T> grads;
    };
    const std::size_t n_chunks = (batch.size() + kGradientChunk - 1) / kGradientChunk;
    std::vector<ChunkResult> chunks(n_chunks);

    const auto run_chunk = [&](std::size_t chunk) {
        auto& out = chunks[chunk];
        if (grads != nullptr) {
            out.grads = params.zeros_like();
        }
        SequenceCache<T> s_cache;
        SequenceCache<T> w_cache;
        SequenceCache<T> r_cache;
        MlmHeadCache<T> head;
        const std::size_t end = std::min(batch.size(), (chunk + 1) * kGradientChunk);
        for (std::size_t e = chunk * kGradientChunk; e < end; ++e) {
            const auto& ex = batch[e];
            forward_sequence(params, config, ex.sequence, ex.sequence.size(), context(e, 0), s_cache);
            Matrix<T> d_hidden_s;
            RowVector<T> d_pooled_s;
            if (grads != nullptr) {
                d_hidden_s.setZero(s_cache.hidden.rows(), d);
                d_pooled_s.setZero(d);
            }
            if (!ex.labels.empty()) {
                Matrix<T> rows(static_cast<Eigen::Index>(ex.labels.size()), d);
                for (std::size_t i = 0; i < ex.labels.size(); ++i) {
                    rows.row(static_cast<Eigen::Index>(i)) =
                        s_cache.hidden.row(static_cast<Eigen::Index>(ex.labels[i].position));
                }
                mlm_head_forward(params, rows, head);
                out.mlm += static_cast<double>(mlm_loss<T>(head.log_probs, ex.labels)) *
                           static_cast<double>(ex.labels.size());
                if (grads != nullptr && options.weights.mlm != 0.0) {
                    Matrix<T> d_logits = head.log_probs.array().exp();
                    for (std::size_t i = 0; i < ex.labels.size(); ++i) {
                        d_logits(static_cast<Eigen::Index>(i), ex.labels[i].token) -= T(1);
                    }
                    d_logits *= mlm_scale;
                    const Matrix<T> d_rows = mlm_head_backward(params, head, d_logits, out.grads);
                    for (std::size_t i = 0; i < ex.labels.size(); ++i) {
                        d_hidden_s.row(static_cast<Eigen::Index>(ex.labels[i].position)) +=
                            d_rows.row(static_cast<Eigen::Index>(i));
                    }
                }
            }
            if (ex.has_split) {
                forward_sequence(params, config, ex.ngram, ex.ngram.size(), context(e, 1), w_cache);
                forward_sequence(params, config, ex.remainder, ex.remainder.size(), context(e, 2), r_cache);
                const auto p_w = pool_sequence(w_cache.hidden, w_cache.length, options.pooling, w_cache.pooled);
                const auto p_r = pool_sequence(r_cache.hidden, r_cache.length, options.pooling, r_cache.pooled);
                const auto p_s = pool_sequence(s_cache.hidden, s_cache.length, options.pooling, s_cache.pooled);
                RowVector<T> g_w;
                RowVector<T> g_r;
                RowVector<T> g_s;
                const bool want = grads != nullptr && options.weights.misad != 0.0;
                out.misad += static_cast<double>(
                    misad_loss<T>(p_w, p_r, p_s, want ? &g_w : nullptr, want ? &g_r : nullptr, want ? &g_s : nullptr));
                if (want) {
                    for (auto [cache, grad] : {std::pair{&w_cache, &g_w}, std::pair{&r_cache, &g_r}}) {
                        Matrix<T> d_h = Matrix<T>::Zero(cache->hidden.rows(), d);
                        RowVector<T> d_cls = RowVector<T>::Zero(d);
                        pool_backward<T>(cache->hidden, cache->length, options.pooling, *grad * misad_scale, d_h, d_cls);
                        backward_sequence(params, config, *cache, std::move(d_h), d_cls, out.grads);
                    }
                    pool_backward<T>(s_cache.hidden, s_cache.length, options.pooling, g_s * misad_scale, d_hidden_s,
                                     d_pooled_s);
                }
            }
            if (grads != nullptr) {
                backward_sequence(params, config, s_cache, std::move(d_hidden_s), d_pooled_s, out.grads);
            }
        }
    };

    double misad_sum = 0.0;
    double mlm_sum = 0.0;
    if (grads != nullptr) {
        grads->set_zero();
    }
    const auto reduce = [&](ChunkResult& c) {
        misad_sum += c.misad;
        mlm_sum += c.mlm;
        if (grads != nullptr) {
            grads->accumulate(c.grads);
            c.grads = EncoderParams<T>{};
        }
    };
    if (options.threads <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) {
            run_chunk(c);
            reduce(chunks[c]);
        }
    } else {
        parallel_for(n_chunks, options.threads, run_chunk);
        for (auto& c : chunks) {
            reduce(c);
        }
    }

    LossReport report;
    report.l_misad = n_split ? misad_sum / static_cast<double>(n_split) : 0.0;
    report.l_mlm = n_labels ? mlm_sum / static_cast<double>(n_labels) : 0.0;
    report.l_total = report.l_misad + report.l_mlm;
    if (!std::isfinite(report.l_total)) {
        throw NumericError("non-finite loss");
    }
    return report;
}

}  // namespace

template <typename T>
LossReport loss_and_gradients(const EncoderParams<T>& params, const EncoderConfig& config,
                              std::span<const PreparedExample> batch, const ObjectiveOptions& options,
                              EncoderParams<T>* grads) {
    try {
        return objective(params, config, batch, options, grads);
    } catch (const NumericError& e) {
        // NaN parameters usually surface earlier (e.g. as a degenerate embedding); report
        // the tensor responsible instead.
        const auto name = first_non_finite_tensor(params);
        if (name.empty()) {
            throw;
        }
        throw NumericError(fmt::format("{}: tensor '{}' is not finite", e.what(), name));
    }
}

#define ULR_INSTANTIATE(T)                                                                                   \
    template struct EncoderParams<T>;                                                                        \
    template EncoderParams<T> init_params<T>(const EncoderConfig&);                                          \
    template void forward_sequence<T>(const EncoderParams<T>&, const EncoderConfig&, std::span<const TokenId>, \
                                      std::size_t, const DropoutContext&, SequenceCache<T>&);                \
    template void backward_sequence<T>(const EncoderParams<T>&, const EncoderConfig&, const SequenceCache<T>&, \
                                       Matrix<T>, const RowVector<T>&, EncoderParams<T>&);                   \
    template ForwardOutput<T> forward<T>(const Batch&, const EncoderParams<T>&, const EncoderConfig&, bool,   \
                                         std::uint64_t);                                                     \
    template RowVector<T> pool_sequence<T>(const Matrix<T>&, std::size_t, Pooling, const RowVector<T>&);      \
    template void pool_backward<T>(const Matrix<T>&, std::size_t, Pooling, const RowVector<T>&, Matrix<T>&,   \
                                   RowVector<T>&);                                                           \
    template Matrix<T> pool<T>(const ForwardOutput<T>&, const Batch&, Pooling);                               \
    template void mlm_head_forward<T>(const EncoderParams<T>&, const Matrix<T>&, MlmHeadCache<T>&);           \
    template Matrix<T> mlm_head_backward<T>(const EncoderParams<T>&, const MlmHeadCache<T>&, const Matrix<T>&, \
                                            EncoderParams<T>&);                                              \
    template std::vector<Matrix<T>> mlm_log_probs<T>(const ForwardOutput<T>&, const EncoderParams<T>&);       \
    template T misad_loss<T>(const RowVector<T>&, const RowVector<T>&, const RowVector<T>&, RowVector<T>*,    \
                             RowVector<T>*, RowVector<T>*);                                                  \
    template T mlm_loss<T>(const Matrix<T>&, std::span<const MaskedLabel>);                                  \
    template LossReport loss_and_gradients<T>(const EncoderParams<T>&, const EncoderConfig&,                  \
                                              std::span<const PreparedExample>, const ObjectiveOptions&,     \
                                              EncoderParams<T>*);

ULR_INSTANTIATE(float)
ULR_INSTANTIATE(double)

template EncoderParams<double> EncoderParams<float>::cast<double>() const;
template EncoderParams<float> EncoderParams<double>::cast<float>() const;
template EncoderParams<float> EncoderParams<float>::cast<float>() const;
template EncoderParams<double> EncoderParams<double>::cast<double>() const;

}  // namespace ulr
