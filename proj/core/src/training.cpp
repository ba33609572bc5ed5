#include "ulr/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "ulr/error.hpp"
#include "ulr/parallel.hpp"

namespace ulr {

namespace {

void check_span(const Span& span, std::size_t length) {
    if (span.end > length || span.begin >= span.end || span.length() < 2) {
        throw Error(fmt::format("span [{}, {}) invalid for a sequence of {} tokens", span.begin, span.end, length));
    }
}

template <typename T>
RowVector<T> pooled_embedding(const EncoderParams<T>& params, const EncoderConfig& config,
                              std::span<const TokenId> framed, Pooling pooling, SequenceCache<T>& cache) {
    forward_sequence(params, config, framed, framed.size(), DropoutContext::disabled(), cache);
    return pool_sequence(cache.hidden, cache.length, pooling, cache.pooled);
}

}  // namespace

std::vector<TrainingExample> make_examples(std::span<const EncodedSequence> documents,
                                           const NgramTable& table, std::size_t max_len) {
    if (max_len < 3) {
        throw Error("max_len must be at least 3");
    }
    std::vector<TrainingExample> examples;
    examples.reserve(documents.size());
    for (const auto& doc : documents) {
        if (doc.empty()) {
            continue;
        }
        TrainingExample ex;
        const auto keep = std::min(doc.size(), max_len - 2);
        ex.sequence.ids.assign(doc.ids.begin(), doc.ids.begin() + static_cast<std::ptrdiff_t>(keep));
        ex.spans = mark_sequence(ex.sequence.ids, table);
        examples.push_back(std::move(ex));
    }
    return examples;
}

template <typename T>
std::vector<double> score_spans(const EncoderParams<T>& params, const EncoderConfig& config,
                                std::span<const TokenId> sequence, std::span<const Span> spans) {
    for (const auto& s : spans) {
        check_span(s, sequence.size());
    }
    const auto framed = frame_sequence(sequence, config.max_len);
    if (framed.size() != sequence.size() + 2) {
        throw Error("sequence longer than max_len - 2");
    }
    std::vector<double> scores;
    scores.reserve(spans.size());
    SequenceCache<T> cache;
    MlmHeadCache<T> head;
    std::vector<TokenId> masked;
    const auto d = static_cast<Eigen::Index>(config.d_model);
    for (const auto& s : spans) {
        masked = framed;
        for (std::size_t i = s.begin; i < s.end; ++i) {
            masked[i + 1] = special::kMask;
        }
        forward_sequence(params, config, masked, masked.size(), DropoutContext::disabled(), cache);
        Matrix<T> rows(static_cast<Eigen::Index>(s.length()), d);
        for (std::size_t i = 0; i < s.length(); ++i) {
            rows.row(static_cast<Eigen::Index>(i)) = cache.hidden.row(static_cast<Eigen::Index>(s.begin + i + 1));
        }
        mlm_head_forward(params, rows, head);
        double total = 0.0;
        for (std::size_t i = 0; i < s.length(); ++i) {
            total += std::exp(static_cast<double>(head.log_probs(static_cast<Eigen::Index>(i), sequence[s.begin + i])));
        }
        scores.push_back(total / static_cast<double>(s.length()));
    }
    return scores;
}

std::optional<std::size_t> select_span(std::span<const double> scores) {
    if (scores.empty()) {
        return std::nullopt;
    }
    // min_element returns the first minimum, i.e. the leftmost span on ties.
    return static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
}

std::optional<SplitInputs> split_sequence(std::span<const TokenId> sequence, const Span& span,
                                          std::size_t max_len) {
    check_span(span, sequence.size());
    if (sequence.size() > max_len - 2) {
        throw Error("sequence longer than max_len - 2");
    }
    if (span.begin == 0 && span.end == sequence.size()) {
        return std::nullopt;
    }
    std::vector<TokenId> rest(sequence.begin(), sequence.begin() + static_cast<std::ptrdiff_t>(span.begin));
    rest.insert(rest.end(), sequence.begin() + static_cast<std::ptrdiff_t>(span.end), sequence.end());
    return SplitInputs{frame_sequence(sequence.subspan(span.begin, span.length()), max_len),
                       frame_sequence(rest, max_len), frame_sequence(sequence, max_len)};
}

MaskedSequence mask_for_mlm(std::span<const TokenId> framed, std::optional<Span> protected_span,
                            double mask_rate, std::size_t vocab_size, Rng& rng) {
    MaskedSequence out{{framed.begin(), framed.end()}, {}};
    if (framed.size() < 2) {
        return out;
    }
    const auto non_special = static_cast<std::uint64_t>(vocab_size) - special::kCount;
    for (std::size_t pos = 1; pos + 1 < framed.size(); ++pos) {
        if (protected_span && pos >= protected_span->begin && pos < protected_span->end) {
            continue;
        }
        if (rng.uniform() >= mask_rate) {
            continue;
        }
        out.labels.push_back({pos, framed[pos]});
        const double action = rng.uniform();
        if (action < 0.8) {
            out.ids[pos] = special::kMask;
        } else if (action < 0.9 && non_special > 0) {
            out.ids[pos] = static_cast<TokenId>(special::kCount + rng.below(non_special));
        }
    }
    return out;
}

std::uint64_t LrSchedule::warmup_steps() const noexcept {
    return static_cast<std::uint64_t>(std::floor(warmup_fraction * static_cast<double>(total_steps)));
}

double lr_at(std::uint64_t step, const LrSchedule& schedule) {
    if (step > schedule.total_steps) {
        return 0.0;
    }
    const auto warmup = schedule.warmup_steps();
    if (step < warmup) {
        return schedule.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    if (schedule.total_steps == warmup) {
        return schedule.peak_lr;
    }
    return schedule.peak_lr * static_cast<double>(schedule.total_steps - step) /
           static_cast<double>(schedule.total_steps - warmup);
}

template <typename T>
void adam_step(std::span<const NamedTensor<T>> params, std::span<const ConstNamedTensor<T>> grads,
               OptimizerState<T>& state) {
    if (params.size() != grads.size()) {
        throw Error("adam_step: parameter and gradient lists differ in length");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].tensor->rows() != grads[i].tensor->rows() || params[i].tensor->cols() != grads[i].tensor->cols()) {
            throw Error(fmt::format("adam_step: shape mismatch for '{}'", params[i].name));
        }
        if (!grads[i].tensor->allFinite()) {
            throw NumericError(fmt::format("non-finite gradient in '{}'", grads[i].name));
        }
    }
    if (state.first_moment.size() != params.size()) {
        state.first_moment.clear();
        state.second_moment.clear();
        for (const auto& p : params) {
            state.first_moment.push_back(Matrix<T>::Zero(p.tensor->rows(), p.tensor->cols()));
            state.second_moment.push_back(Matrix<T>::Zero(p.tensor->rows(), p.tensor->cols()));
        }
    }
    ++state.step;
    const double lr = lr_at(state.step, state.schedule);
    const double t = static_cast<double>(state.step);
    const T c1 = T(1.0 / (1.0 - std::pow(state.beta1, t)));
    const T c2 = T(1.0 / (1.0 - std::pow(state.beta2, t)));
    const T b1 = T(state.beta1);
    const T b2 = T(state.beta2);
    const T eps = T(state.epsilon);
    const T rate = T(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        const auto& g = *grads[i].tensor;
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
        params[i].tensor->array() -= rate * (m.array() * c1) / ((v.array() * c2).sqrt() + eps);
    }
}

template <typename T>
void adam_step(EncoderParams<T>& params, const EncoderParams<T>& grads, OptimizerState<T>& state) {
    const auto p = params.tensors();
    const auto g = grads.tensors();
    adam_step<T>(std::span<const NamedTensor<T>>(p), std::span<const ConstNamedTensor<T>>(g), state);
}

namespace {

PreparedExample split_and_mask(const TrainingExample& example, std::optional<std::size_t> chosen,
                               const EncoderConfig& config, const StepOptions& options, Rng& rng) {
    PreparedExample out;
    std::optional<Span> protect;
    if (chosen) {
        const auto& s = example.spans[*chosen];
        if (auto split = split_sequence(example.sequence.ids, s, config.max_len)) {
            out.has_split = true;
            out.ngram = std::move(split->ngram);
            out.remainder = std::move(split->remainder);
            protect = Span{s.begin + 1, s.end + 1};
        }
    }
    auto masked = mask_for_mlm(frame_sequence(example.sequence.ids, config.max_len), protect, options.mask_rate,
                               config.vocab_size, rng);
    out.sequence = std::move(masked.ids);
    out.labels = std::move(masked.labels);
    return out;
}

std::optional<std::size_t> choose_span(const TrainingExample& example, const EncoderParams<float>& params,
                                       const EncoderConfig& config, const StepOptions& options) {
    if (!options.use_misad || example.spans.empty()) {
        return std::nullopt;
    }
    const auto scores = score_spans(params, config, example.sequence.ids, example.spans);
    return select_span(scores);
}

}  // namespace

PreparedExample prepare_example(const TrainingExample& example, const EncoderParams<float>& params,
                                const EncoderConfig& config, const StepOptions& options, Rng& rng) {
    return split_and_mask(example, choose_span(example, params, config, options), config, options, rng);
}

LossReport train_step(std::span<const TrainingExample> batch, EncoderParams<float>& params,
                      const EncoderConfig& config, OptimizerState<float>& state, const StepOptions& options,
                      Rng& rng) {
    // Span scoring is the expensive, rng-free part; it runs in parallel. Masking draws from
    // the sequential rng afterwards so the draw order never depends on the thread count.
    std::vector<std::optional<std::size_t>> chosen(batch.size());
    parallel_for(batch.size(), options.threads,
                 [&](std::size_t i) { chosen[i] = choose_span(batch[i], params, config, options); });
    std::vector<PreparedExample> prepared;
    prepared.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        prepared.push_back(split_and_mask(batch[i], chosen[i], config, options, rng));
    }

    ObjectiveOptions objective;
    objective.pooling = options.misad_pooling;
    objective.dropout = options.dropout;
    objective.seed = options.seed;
    objective.step = state.step + 1;
    objective.threads = options.threads;
    auto grads = params.zeros_like();
    const auto report = loss_and_gradients<float>(params, config, prepared, objective, &grads);
    adam_step(params, grads, state);
    return report;
}

Trainer::Trainer(EncoderConfig config, EncoderParams<float> params, std::vector<TrainingExample> examples,
                 std::size_t batch_size, LrSchedule schedule, StepOptions options)
    : config_(config),
      params_(std::move(params)),
      examples_(std::move(examples)),
      batch_size_(batch_size),
      options_(options),
      rng_(options.seed) {
    if (examples_.empty()) {
        throw Error("no training examples");
    }
    if (batch_size_ == 0) {
        throw Error("batch_size must be positive");
    }
    state_.schedule = schedule;
    order_.resize(examples_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_.begin(), order_.end());
}

LossReport Trainer::step() {
    std::vector<TrainingExample> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
        if (cursor_ == order_.size()) {
            rng_.shuffle(order_.begin(), order_.end());
            cursor_ = 0;
        }
        batch.push_back(examples_[order_[cursor_++]]);
    }
    return train_step(batch, params_, config_, state_, options_, rng_);
}

double composition_error(const EncoderParams<float>& params, const EncoderConfig& config,
                         std::span<const TrainingExample> examples, Pooling pooling) {
    double total = 0.0;
    std::size_t n = 0;
    SequenceCache<float> cache;
    for (const auto& ex : examples) {
        std::optional<RowVector<float>> e_s;
        for (const auto& span : ex.spans) {
            const auto split = split_sequence(ex.sequence.ids, span, config.max_len);
            if (!split) {
                continue;
            }
            if (!e_s) {
                e_s = pooled_embedding(params, config, split->sequence, pooling, cache);
            }
            const auto e_w = pooled_embedding(params, config, split->ngram, pooling, cache);
            const auto e_r = pooled_embedding(params, config, split->remainder, pooling, cache);
            total += static_cast<double>(misad_loss<float>(e_w, e_r, *e_s));
            ++n;
        }
    }
    return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

template std::vector<double> score_spans<float>(const EncoderParams<float>&, const EncoderConfig&,
                                                std::span<const TokenId>, std::span<const Span>);
template std::vector<double> score_spans<double>(const EncoderParams<double>&, const EncoderConfig&,
                                                 std::span<const TokenId>, std::span<const Span>);
template void adam_step<float>(std::span<const NamedTensor<float>>, std::span<const ConstNamedTensor<float>>,
                               OptimizerState<float>&);
template void adam_step<double>(std::span<const NamedTensor<double>>, std::span<const ConstNamedTensor<double>>,
                                OptimizerState<double>&);
template void adam_step<float>(EncoderParams<float>&, const EncoderParams<float>&, OptimizerState<float>&);
template void adam_step<double>(EncoderParams<double>&, const EncoderParams<double>&, OptimizerState<double>&);

}  // namespace ulr
