#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ulr/corpus.hpp"
#include "ulr/encoder.hpp"
#include "ulr/ngram.hpp"
#include "ulr/random.hpp"

namespace ulr {

/// A sequence S (without [CLS]/[SEP]) and the n-gram spans marked in it.
struct TrainingExample {
    EncodedSequence sequence;
    SpanAnnotation spans;
};

/// Truncates each document to max_len - 2 tokens and marks it against `table`. Empty
/// documents are dropped.
std::vector<TrainingExample> make_examples(std::span<const EncodedSequence> documents,
                                           const NgramTable& table, std::size_t max_len);

/// Average probability of the true tokens of each span when that span alone is replaced by
/// [MASK]. Dropout is off. Throws when a span lies outside the sequence.
template <typename T>
std::vector<double> score_spans(const EncoderParams<T>& params, const EncoderConfig& config,
                                std::span<const TokenId> sequence, std::span<const Span> spans);

/// Index of the lowest score, leftmost on ties; nullopt when there are no scores.
std::optional<std::size_t> select_span(std::span<const double> scores);

/// Framed w, R and S inputs. R is S with the span removed and no placeholder.
struct SplitInputs {
    std::vector<TokenId> ngram;
    std::vector<TokenId> remainder;
    std::vector<TokenId> sequence;
};

/// nullopt when the span covers the whole sequence (empty R): the example trains on MLM
/// only. Throws on spans outside the sequence or shorter than two tokens.
std::optional<SplitInputs> split_sequence(std::span<const TokenId> sequence, const Span& span,
                                          std::size_t max_len);

struct MaskedSequence {
    std::vector<TokenId> ids;
    std::vector<MaskedLabel> labels;
};

/// BERT-style masking of a framed sequence: every real token except [CLS], [SEP] and the
/// protected span (framed coordinates) is selected with probability `mask_rate`; a
/// selected token becomes [MASK] 80% of the time, a random non-special token 10%, and
/// stays unchanged 10%.
MaskedSequence mask_for_mlm(std::span<const TokenId> framed, std::optional<Span> protected_span,
                            double mask_rate, std::size_t vocab_size, Rng& rng);

struct LrSchedule {
    double peak_lr = 5e-5;
    std::uint64_t total_steps = 0;
    double warmup_fraction = 0.1;

    std::uint64_t warmup_steps() const noexcept;
};

/// Linear warmup from 0 to peak, then linear decay to 0 at total_steps; 0 beyond.
double lr_at(std::uint64_t step, const LrSchedule& schedule);

template <typename T>
struct OptimizerState {
    LrSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    std::vector<Matrix<T>> first_moment;
    std::vector<Matrix<T>> second_moment;
};

/// Adam with bias correction. Increments state.step and uses lr_at(new step). Every gradient
/// is checked before anything is updated; a non-finite one throws NumericError naming it.
template <typename T>
void adam_step(std::span<const NamedTensor<T>> params, std::span<const ConstNamedTensor<T>> grads,
               OptimizerState<T>& state);

template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, OptimizerState<T>& state);

struct StepOptions {
    bool use_misad = true;
    Pooling misad_pooling = Pooling::cls;
    double mask_rate = 0.15;
    double dropout = 0.1;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

/// Chooses the span (scoring pass), splits, and masks one example.
PreparedExample prepare_example(const TrainingExample& example, const EncoderParams<float>& params,
                                const EncoderConfig& config, const StepOptions& options, Rng& rng);

/// One optimizer step over `batch`: span selection, w/R/S split, masking, joint loss and Adam.
LossReport train_step(std::span<const TrainingExample> batch, EncoderParams<float>& params,
                      const EncoderConfig& config, OptimizerState<float>& state, const StepOptions& options,
                      Rng& rng);

/// Walks a corpus of examples in seeded shuffled epochs and applies train_step.
class Trainer {
public:
    Trainer(EncoderConfig config, EncoderParams<float> params, std::vector<TrainingExample> examples,
            std::size_t batch_size, LrSchedule schedule, StepOptions options);

    LossReport step();

    std::uint64_t steps_done() const noexcept { return state_.step; }
    double current_lr() const { return lr_at(state_.step, state_.schedule); }
    const EncoderParams<float>& params() const noexcept { return params_; }
    const EncoderConfig& config() const noexcept { return config_; }

private:
    EncoderConfig config_;
    EncoderParams<float> params_;
    std::vector<TrainingExample> examples_;
    std::size_t batch_size_;
    StepOptions options_;
    OptimizerState<float> state_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// Mean MSE(e_w + e_r, e_s) over every valid span of every example (dropout off), a held-out
/// measure of how additive the embeddings are. NaN when no example has a valid span.
double composition_error(const EncoderParams<float>& params, const EncoderConfig& config,
                         std::span<const TrainingExample> examples, Pooling pooling);

}  // namespace ulr
