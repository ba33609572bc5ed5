#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "ulr/corpus.hpp"

namespace ulr {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Pooling { cls, mean, max };

Pooling parse_pooling(std::string_view name);
std::string_view to_string(Pooling pooling) noexcept;

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ff = 256;
    std::size_t max_len = 128;
    double dropout = 0.1;
    std::uint64_t seed = 0;

    /// Throws ulr::Error naming the first violated constraint.
    void validate() const;
    std::size_t head_dim() const noexcept { return d_model / n_heads; }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Every tensor is a row-major matrix; biases and gains are 1×n.
template <typename T>
struct Linear {
    Matrix<T> weight;  // in × out, applied as x * weight + bias
    Matrix<T> bias;    // 1 × out
};

template <typename T>
struct LayerNormParams {
    Matrix<T> gain;  // 1 × d
    Matrix<T> bias;  // 1 × d
};

template <typename T>
struct EncoderLayerParams {
    Linear<T> query;
    Linear<T> key;
    Linear<T> value;
    Linear<T> output;
    LayerNormParams<T> attention_norm;
    Linear<T> ff_in;
    Linear<T> ff_out;
    LayerNormParams<T> ff_norm;
};

template <typename T>
struct NamedTensor {
    std::string name;
    int rank;
    Matrix<T>* tensor;
};

template <typename T>
struct ConstNamedTensor {
    std::string name;
    int rank;
    const Matrix<T>* tensor;
};

template <typename T>
struct EncoderParams {
    Matrix<T> token_embedding;     // V × d, shared with the MLM output projection
    Matrix<T> position_embedding;  // max_len × d
    LayerNormParams<T> embedding_norm;
    std::vector<EncoderLayerParams<T>> layers;
    Linear<T> pooler;
    Linear<T> mlm_transform;
    LayerNormParams<T> mlm_norm;
    Matrix<T> mlm_bias;  // 1 × V

    /// Stable, checkpoint-order view of every tensor.
    std::vector<NamedTensor<T>> tensors();
    std::vector<ConstNamedTensor<T>> tensors() const;

    std::size_t parameter_count() const;
    /// Same shapes, all zeros.
    EncoderParams zeros_like() const;
    void set_zero();
    /// this += other, tensor by tensor.
    void accumulate(const EncoderParams& other);

    template <typename U>
    EncoderParams<U> cast() const;
};

/// Truncated normal(0, 0.02) weights, zero biases, unit layer-norm gains. Deterministic in
/// config.seed.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& config);

/// Padded batch of framed sequences: [CLS] tokens [SEP] [PAD]...
struct Batch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<TokenId> ids;          // rows × cols, row-major
    std::vector<std::uint8_t> mask;    // 1 for real positions
    std::vector<std::size_t> lengths;  // real positions per row, specials included

    std::span<const TokenId> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
    std::span<const std::uint8_t> row_mask(std::size_t r) const { return {mask.data() + r * cols, cols}; }

    /// Frames each token sequence with [CLS]/[SEP], truncating to max_len - 2 tokens, and
    /// pads to the longest row.
    static Batch frame(std::span<const std::vector<TokenId>> sequences, std::size_t max_len);
    /// Throws unless every row starts with [CLS], ends its real part with [SEP] and pads only
    /// at the tail.
    void validate() const;
};

/// Wraps tokens as [CLS] tokens [SEP], truncated to max_len - 2 tokens.
std::vector<TokenId> frame_sequence(std::span<const TokenId> tokens, std::size_t max_len);

/// Dropout settings for one forward pass. Masks are drawn from a counter-based stream keyed
/// by `key`, so the same key reproduces the same masks regardless of evaluation order.
struct DropoutContext {
    double rate = 0.0;
    std::uint64_t key = 0;

    bool active() const noexcept { return rate > 0.0; }
    static DropoutContext disabled() noexcept { return {}; }
    /// Key derived from (seed, step, stream).
    static DropoutContext keyed(double rate, std::uint64_t seed, std::uint64_t step, std::uint64_t stream) noexcept;
};

template <typename T>
struct LayerNormCache {
    Matrix<T> normalized;  // x-hat
    ColVector<T> inv_std;
};

template <typename T>
struct EncoderLayerCache {
    Matrix<T> input;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> attention;          // per head, softmax rows (before dropout)
    std::vector<Matrix<T>> attention_dropout;  // per head scale factors; empty when inactive
    Matrix<T> context;
    Matrix<T> attention_out_dropout;
    LayerNormCache<T> attention_norm;
    Matrix<T> attention_normed;
    Matrix<T> ff_pre;
    Matrix<T> ff_act;
    Matrix<T> ff_out_dropout;
    LayerNormCache<T> ff_norm;
};

/// Activations of one sequence, kept for the backward pass.
template <typename T>
struct SequenceCache {
    std::vector<TokenId> ids;
    std::size_t length = 0;  // real positions; the rest are padding
    LayerNormCache<T> embedding_norm;
    Matrix<T> embedding_dropout;
    std::vector<EncoderLayerCache<T>> layers;
    Matrix<T> hidden;       // L × d
    RowVector<T> pooled;    // tanh(pooler(hidden[0]))
};

/// Runs the encoder over `ids` whose first `length` positions are real.
template <typename T>
void forward_sequence(const EncoderParams<T>& params, const EncoderConfig& config,
                      std::span<const TokenId> ids, std::size_t length,
                      const DropoutContext& dropout, SequenceCache<T>& cache);

/// Accumulates parameter gradients given dLoss/dhidden (L × d, may be empty) and
/// dLoss/dpooled (may be empty).
template <typename T>
void backward_sequence(const EncoderParams<T>& params, const EncoderConfig& config,
                       const SequenceCache<T>& cache, Matrix<T> d_hidden,
                       const RowVector<T>& d_pooled, EncoderParams<T>& grads);

template <typename T>
struct ForwardOutput {
    std::vector<SequenceCache<T>> sequences;
    Matrix<T> pooled;  // B × d

    const Matrix<T>& hidden(std::size_t row) const { return sequences[row].hidden; }
};

/// Batched forward for inference. Each row runs over its real positions only, so results
/// do not depend on how much padding the batch carries; hidden rows at pad positions are
/// zero. Dropout is active only in train mode; each row draws from its own stream
/// (seed, step, row).
template <typename T>
ForwardOutput<T> forward(const Batch& batch, const EncoderParams<T>& params, const EncoderConfig& config,
                         bool train_mode, std::uint64_t step = 0);

/// Pools one sequence over its first `length` positions. `pooled_cls` is required for
/// Pooling::cls.
template <typename T>
RowVector<T> pool_sequence(const Matrix<T>& hidden, std::size_t length, Pooling strategy,
                           const RowVector<T>& pooled_cls);

/// dLoss/dpooled → (dLoss/dhidden, dLoss/d pooled_cls).
template <typename T>
void pool_backward(const Matrix<T>& hidden, std::size_t length, Pooling strategy,
                   const RowVector<T>& d_out, Matrix<T>& d_hidden, RowVector<T>& d_pooled_cls);

/// Batch pooling. Throws when a row's mask is all zero.
template <typename T>
Matrix<T> pool(const ForwardOutput<T>& output, const Batch& batch, Pooling strategy);

template <typename T>
struct MlmHeadCache {
    Matrix<T> input;
    Matrix<T> pre;
    Matrix<T> act;
    LayerNormCache<T> norm;
    Matrix<T> normed;
    Matrix<T> log_probs;  // rows × V
};

/// MLM head over selected hidden rows: layer-norm(GELU(x W + b)) E^T + bias, log-softmax.
template <typename T>
void mlm_head_forward(const EncoderParams<T>& params, const Matrix<T>& rows, MlmHeadCache<T>& cache);

/// Given dLoss/dlogits (rows × V), accumulates head gradients and returns dLoss/drows.
template <typename T>
Matrix<T> mlm_head_backward(const EncoderParams<T>& params, const MlmHeadCache<T>& cache,
                            const Matrix<T>& d_logits, EncoderParams<T>& grads);

/// Full (L × V) log-probabilities for every row of a forward output.
template <typename T>
std::vector<Matrix<T>> mlm_log_probs(const ForwardOutput<T>& output, const EncoderParams<T>& params);

// ---------------------------------------------------------------------------------------
// Training objective: one example = (S with MLM masking, optional w/R split).

struct MaskedLabel {
    std::size_t position = 0;  // in framed S coordinates
    TokenId token = 0;

    friend bool operator==(const MaskedLabel&, const MaskedLabel&) = default;
};

struct PreparedExample {
    std::vector<TokenId> sequence;  // framed S after masking
    std::vector<MaskedLabel> labels;
    bool has_split = false;
    std::vector<TokenId> ngram;      // framed w
    std::vector<TokenId> remainder;  // framed R
};

struct LossWeights {
    double misad = 1.0;
    double mlm = 1.0;
};

struct LossReport {
    double l_misad = 0.0;
    double l_mlm = 0.0;
    double l_total = 0.0;
};

struct ObjectiveOptions {
    LossWeights weights;
    Pooling pooling = Pooling::cls;
    double dropout = 0.0;  // 0 disables dropout
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    unsigned threads = 1;
};

/// Mean squared difference between (e_w + e_r) and e_s after normalizing each to unit
/// length. Throws NumericError("degenerate embedding") on a zero vector. When the gradient
/// outputs are non-null they receive dLoss/d(unnormalized input).
template <typename T>
T misad_loss(const RowVector<T>& e_w, const RowVector<T>& e_r, const RowVector<T>& e_s,
             RowVector<T>* d_w = nullptr, RowVector<T>* d_r = nullptr, RowVector<T>* d_s = nullptr);

/// Mean NLL of the labelled tokens. `log_probs` row i belongs to label i. 0 when no labels.
template <typename T>
T mlm_loss(const Matrix<T>& log_probs, std::span<const MaskedLabel> labels);

/// Batch loss: mean L_MiSAD over split examples plus mean L_MLM over every masked position,
/// and (when `grads` is non-null) its exact gradient with component weights applied.
/// Throws NumericError naming the offending tensor when the loss is not finite.
template <typename T>
LossReport loss_and_gradients(const EncoderParams<T>& params, const EncoderConfig& config,
                              std::span<const PreparedExample> batch, const ObjectiveOptions& options,
                              EncoderParams<T>* grads);

// ---------------------------------------------------------------------------------------
// Checkpoints: "ULRM", u32 version, config block, tensor directory, float32 payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    EncoderConfig config;
    EncoderParams<float> params;
};

void save_checkpoint(const EncoderParams<float>& params, const EncoderConfig& config,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ulr
