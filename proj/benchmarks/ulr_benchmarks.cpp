// Microbenchmarks for the hot paths: counting, marking, training steps and ranking.

#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "ulr/corpus.hpp"
#include "ulr/encoder.hpp"
#include "ulr/evaluation.hpp"
#include "ulr/ngram.hpp"
#include "ulr/random.hpp"
#include "ulr/training.hpp"

namespace {

using namespace ulr;

// Skewed token draws with planted repeats, so that long n-grams recur.
std::vector<EncodedSequence> synthetic_corpus(std::size_t documents, std::size_t length, TokenId symbols) {
    Rng rng(7);
    std::vector<EncodedSequence> out(documents);
    for (auto& d : out) {
        while (d.ids.size() < length) {
            if (rng.below(5) == 0) {
                for (TokenId t = 0; t < 3; ++t) d.ids.push_back(special::kCount + t);
            } else {
                d.ids.push_back(special::kCount + static_cast<TokenId>(std::min(rng.below(symbols), rng.below(symbols))));
            }
        }
        d.ids.resize(length);
    }
    return out;
}

void BM_CountNgrams(benchmark::State& state) {
    const auto docs = synthetic_corpus(1000, 100, 500);
    for (auto _ : state) {
        benchmark::DoNotOptimize(count_ngrams(docs, static_cast<std::size_t>(state.range(0))));
    }
    state.SetItemsProcessed(state.iterations() * 100000);
}
BENCHMARK(BM_CountNgrams)->Arg(2)->Arg(6)->Unit(benchmark::kMillisecond);

void BM_MarkSequence(benchmark::State& state) {
    const auto docs = synthetic_corpus(1000, 100, 500);
    const auto table = prune_table(build_table(count_ngrams(docs, 6), 5), docs, 0.0, 3000);
    for (auto _ : state) {
        for (const auto& d : docs) benchmark::DoNotOptimize(mark_sequence(d.ids, table));
    }
    state.SetItemsProcessed(state.iterations() * 100000);
}
BENCHMARK(BM_MarkSequence)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    const auto docs = synthetic_corpus(256, 30, 200);
    const auto table = prune_table(build_table(count_ngrams(docs, 4), 5), docs, 0.0, 3000);
    EncoderConfig c;
    c.vocab_size = 200 + special::kCount;
    c.d_model = static_cast<std::size_t>(state.range(0));
    c.n_heads = 4;
    c.n_layers = 2;
    c.d_ff = 4 * c.d_model;
    c.max_len = 32;
    StepOptions opt;
    opt.use_misad = state.range(1) != 0;
    Trainer trainer(c, init_params<float>(c), make_examples(docs, table, c.max_len), 16, {1e-3, 1u << 30, 0.1},
                    opt);
    for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
}
BENCHMARK(BM_TrainStep)->ArgsProduct({{32, 64}, {0, 1}})->ArgNames({"d", "misad"})->Unit(benchmark::kMillisecond);

void BM_RetrieveTopk(benchmark::State& state) {
    Rng rng(3);
    Eigen::MatrixXd corpus(state.range(0), 64);
    for (Eigen::Index i = 0; i < corpus.size(); ++i) corpus.data()[i] = rng.normal();
    Eigen::VectorXd query(64);
    for (Eigen::Index i = 0; i < query.size(); ++i) query(i) = rng.normal();
    for (auto _ : state) benchmark::DoNotOptimize(retrieve_topk(query, corpus, 10));
}
BENCHMARK(BM_RetrieveTopk)->Arg(1000)->Arg(10000)->Unit(benchmark::kMicrosecond);

void BM_Bm25Rank(benchmark::State& state) {
    Rng rng(5);
    std::vector<std::vector<std::string>> docs(static_cast<std::size_t>(state.range(0)));
    for (auto& d : docs) {
        for (int i = 0; i < 12; ++i) d.push_back("w" + std::to_string(std::min(rng.below(2000), rng.below(2000))));
    }
    const Bm25Index index(docs);
    const std::vector<std::string> query{"w1", "w17", "w250", "w999"};
    for (auto _ : state) benchmark::DoNotOptimize(index.rank(query));
}
BENCHMARK(BM_Bm25Rank)->Arg(1000)->Arg(10000)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
