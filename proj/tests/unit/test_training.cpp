#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include <Eigen/QR>

#include "ulr/error.hpp"
#include "ulr/training.hpp"

using namespace ulr;
using Ids = std::vector<TokenId>;

namespace {

EncoderConfig small_config(std::uint64_t seed = 1) {
    EncoderConfig c;
    c.vocab_size = 30;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ff = 32;
    c.max_len = 24;
    c.dropout = 0.1;
    c.seed = seed;
    return c;
}

Ids framed(Ids tokens) {
    tokens.insert(tokens.begin(), special::kCls);
    tokens.push_back(special::kSep);
    return tokens;
}

RowVector<double> vec(std::initializer_list<double> v) {
    RowVector<double> out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) {
        out(i++) = x;
    }
    return out;
}

bool params_bit_equal(const EncoderParams<float>& a, const EncoderParams<float>& b) {
    const auto ta = a.tensors();
    const auto tb = b.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (std::memcmp(ta[i].tensor->data(), tb[i].tensor->data(),
                        sizeof(float) * static_cast<std::size_t>(ta[i].tensor->size())) != 0) {
            return false;
        }
    }
    return true;
}

/// 32 sentences over ids 5..29 built from a few repeated phrases.
std::vector<TrainingExample> toy_examples() {
    const std::vector<Ids> phrases{{5, 6}, {7, 8, 9}, {10, 11}, {12, 13, 14}, {15, 16}, {17, 18}};
    NgramTable table(3, 100);
    for (const auto& p : phrases) {
        table.insert(NgramKey(p), {1, 1.0, false});
    }
    std::vector<EncodedSequence> docs;
    Rng rng(99);
    for (int s = 0; s < 32; ++s) {
        EncodedSequence d;
        const auto units = 2 + rng.below(3);
        for (std::size_t u = 0; u < units; ++u) {
            const auto& p = phrases[rng.below(phrases.size())];
            d.ids.insert(d.ids.end(), p.begin(), p.end());
            if (rng.below(2)) {
                d.ids.push_back(19 + static_cast<TokenId>(rng.below(11)));
            }
        }
        docs.push_back(std::move(d));
    }
    return make_examples(docs, table, 24);
}

}  // namespace

TEST_CASE("make_examples truncates, marks and drops empty documents") {
    NgramTable table(2, 10);
    table.insert(NgramKey(Ids{5, 6}), {1, 1.0, false});
    const std::vector<EncodedSequence> docs{{Ids{7, 5, 6, 8}}, {Ids{}}, {Ids{5, 6, 5, 6, 5, 6}}};
    const auto ex = make_examples(docs, table, 6);
    REQUIRE(ex.size() == 2);
    CHECK(ex[0].spans == SpanAnnotation{{1, 3}});
    CHECK(ex[1].sequence.ids == Ids{5, 6, 5, 6});
    CHECK(ex[1].spans == SpanAnnotation{{0, 2}, {2, 4}});
}

TEST_CASE("score_spans") {
    const auto c = small_config(3);
    const Ids seq{5, 6, 7, 8, 9, 10};
    const SpanAnnotation spans{{0, 2}, {2, 5}, {4, 6}};

    SUBCASE("uniform head scores 1/V") {
        auto p = init_params<double>(c);
        p.mlm_transform.weight.setZero();
        p.mlm_transform.bias.setZero();
        p.mlm_bias.setZero();
        for (double s : score_spans(p, c, seq, spans)) {
            CHECK(std::abs(s - 1.0 / 30.0) < 1e-12);
        }
    }
    SUBCASE("matches the average probability of a batched forward") {
        const auto p = init_params<double>(c);
        const auto scores = score_spans(p, c, seq, spans);
        REQUIRE(scores.size() == spans.size());
        for (std::size_t k = 0; k < spans.size(); ++k) {
            auto masked = framed(seq);
            for (std::size_t i = spans[k].begin; i < spans[k].end; ++i) {
                masked[i + 1] = special::kMask;
            }
            Batch b;
            b.rows = 1;
            b.cols = masked.size();
            b.ids = masked;
            b.mask.assign(masked.size(), 1);
            b.lengths = {masked.size()};
            const auto lp = mlm_log_probs(forward<double>(b, p, c, false), p)[0];
            double sum = 0.0;
            for (std::size_t i = spans[k].begin; i < spans[k].end; ++i) {
                sum += std::exp(lp(static_cast<Eigen::Index>(i + 1), seq[i]));
            }
            CHECK(std::abs(scores[k] - sum / static_cast<double>(spans[k].length())) < 1e-12);
            CHECK(scores[k] > 0.0);
            CHECK(scores[k] <= 1.0);
        }
    }
    SUBCASE("dropout does not affect scoring") {
        const auto p = init_params<float>(c);
        const auto a = score_spans(p, c, seq, spans);
        auto c0 = c;
        c0.dropout = 0.0;
        CHECK(a == score_spans(p, c0, seq, spans));
    }
    SUBCASE("invalid spans") {
        const auto p = init_params<float>(c);
        CHECK_THROWS_AS(score_spans(p, c, seq, SpanAnnotation{{5, 7}}), Error);
        CHECK_THROWS_AS(score_spans(p, c, seq, SpanAnnotation{{2, 3}}), Error);
    }
}

TEST_CASE("select_span") {
    CHECK(select_span(std::vector<double>{0.3, 0.1, 0.2}) == 1);
    CHECK(select_span(std::vector<double>{0.1, 0.1}) == 0);
    CHECK(select_span(std::vector<double>{0.7}) == 0);
    CHECK(!select_span(std::vector<double>{}).has_value());

    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> s(1 + rng.below(8));
        for (auto& x : s) {
            x = static_cast<double>(rng.below(5)) / 5.0 + 0.01;
        }
        std::vector<double> t(s);
        for (auto& x : t) {
            x = std::log(x) * 3.0 + 1.0;
        }
        CHECK(select_span(s) == select_span(t));
    }
}

TEST_CASE("split_sequence") {
    const Ids s{5, 6, 7, 8};
    const auto split = split_sequence(s, Span{1, 3}, 16);
    REQUIRE(split.has_value());
    CHECK(split->ngram == framed({6, 7}));
    CHECK(split->remainder == framed({5, 8}));
    CHECK(split->sequence == framed(s));
    CHECK(!split_sequence(s, Span{0, 4}, 16).has_value());
    CHECK_THROWS_AS(split_sequence(s, Span{3, 5}, 16), Error);
    CHECK_THROWS_AS(split_sequence(s, Span{2, 3}, 16), Error);

    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        Ids seq(3 + rng.below(20));
        for (auto& x : seq) x = 5 + static_cast<TokenId>(rng.below(6));
        const auto b = rng.below(seq.size() - 1);
        const auto e = b + 2 + rng.below(seq.size() - b - 1);
        const auto out = split_sequence(seq, Span{b, e}, 32);
        if (!out) {
            CHECK((b == 0 && e == seq.size()));
            continue;
        }
        Ids merged(out->ngram.begin() + 1, out->ngram.end() - 1);
        merged.insert(merged.end(), out->remainder.begin() + 1, out->remainder.end() - 1);
        Ids sorted_s(seq);
        std::sort(merged.begin(), merged.end());
        std::sort(sorted_s.begin(), sorted_s.end());
        CHECK(merged == sorted_s);
    }
}

TEST_CASE("misad_loss") {
    const double h = std::sqrt(3.0) / 2.0;
    CHECK(std::abs(misad_loss<double>(vec({0.5, h}), vec({0.5, -h}), vec({1, 0}))) < 1e-15);
    CHECK(misad_loss<double>(vec({1, 0}), vec({0, 1}), vec({1, 0})) == doctest::Approx(0.5).epsilon(1e-15));
    // Normalization happens first: scaled inputs give the same loss.
    CHECK(misad_loss<double>(vec({3, 0}), vec({0, 0.2}), vec({7, 0})) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_WITH_AS(misad_loss<double>(vec({0, 0}), vec({0, 1}), vec({1, 0})), "degenerate embedding",
                         NumericError);

    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        RowVector<double> w(4), r(4), s(4);
        for (int i = 0; i < 4; ++i) {
            w(i) = rng.normal();
            r(i) = rng.normal();
            s(i) = rng.normal();
        }
        // Random rotation from a QR decomposition.
        Eigen::MatrixXd g(4, 4);
        for (int i = 0; i < 16; ++i) g.data()[i] = rng.normal();
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        const double base = misad_loss<double>(w, r, s);
        CHECK(std::abs(misad_loss<double>(w * q, r * q, s * q) - base) < 1e-12);

        // Analytic gradient against central differences.
        RowVector<double> dw, dr, ds;
        misad_loss<double>(w, r, s, &dw, &dr, &ds);
        for (int i = 0; i < 4; ++i) {
            for (auto [x, g_x] : {std::pair{&w, &dw}, std::pair{&r, &dr}, std::pair{&s, &ds}}) {
                const double saved = (*x)(i);
                (*x)(i) = saved + 1e-6;
                const double plus = misad_loss<double>(w, r, s);
                (*x)(i) = saved - 1e-6;
                const double minus = misad_loss<double>(w, r, s);
                (*x)(i) = saved;
                CHECK(std::abs((plus - minus) / 2e-6 - (*g_x)(i)) < 1e-7);
            }
        }
    }
}

TEST_CASE("mask_for_mlm") {
    const Ids f = framed({5, 6, 7, 8, 9, 10, 11, 12});
    SUBCASE("protected span and specials are never masked") {
        Rng rng(1);
        const Span protect{2, 5};
        for (int trial = 0; trial < 10000; ++trial) {
            const auto m = mask_for_mlm(f, protect, 0.5, 30, rng);
            for (const auto& l : m.labels) {
                REQUIRE((l.position < protect.begin || l.position >= protect.end));
                REQUIRE(l.position != 0);
                REQUIRE(l.position != f.size() - 1);
                REQUIRE(l.token == f[l.position]);
            }
            for (std::size_t i = protect.begin; i < protect.end; ++i) {
                REQUIRE(m.ids[i] == f[i]);
            }
        }
    }
    SUBCASE("rate zero masks nothing") {
        Rng rng(2);
        const auto m = mask_for_mlm(f, std::nullopt, 0.0, 30, rng);
        CHECK(m.labels.empty());
        CHECK(m.ids == f);
        CHECK(mlm_loss<double>(Matrix<double>(0, 30), m.labels) == 0.0);
    }
    SUBCASE("selection rate and 80/10/10 split within 3 sigma") {
        Rng rng(3);
        const double rate = 0.15;
        std::size_t eligible = 0, selected = 0, to_mask = 0, kept = 0;
        for (int trial = 0; trial < 12500; ++trial) {
            const auto m = mask_for_mlm(f, std::nullopt, rate, 30, rng);
            eligible += f.size() - 2;
            selected += m.labels.size();
            for (const auto& l : m.labels) {
                to_mask += m.ids[l.position] == special::kMask;
                kept += m.ids[l.position] == l.token;
                REQUIRE(m.ids[l.position] >= 0);
                REQUIRE(m.ids[l.position] < 30);
            }
        }
        const auto within = [](std::size_t hits, std::size_t n, double p) {
            const double mean = p * static_cast<double>(n);
            const double sd = std::sqrt(static_cast<double>(n) * p * (1 - p));
            return std::abs(static_cast<double>(hits) - mean) <= 3 * sd;
        };
        CHECK(eligible == 100000);
        CHECK(within(selected, eligible, rate));
        CHECK(within(to_mask, selected, 0.8));
        // "unchanged" also catches random replacements that drew the original token.
        CHECK(within(kept, selected, 0.1 + 0.1 / 25.0));
    }
}

TEST_CASE("mlm_loss") {
    const int V = 7;
    const Matrix<double> uniform = Matrix<double>::Constant(3, V, -std::log(double(V)));
    const std::vector<MaskedLabel> labels{{1, 5}, {2, 6}, {4, 5}};
    CHECK(mlm_loss<double>(uniform, labels) == doctest::Approx(std::log(double(V))).epsilon(1e-15));

    Matrix<double> perfect = Matrix<double>::Constant(3, V, -1e300);
    perfect(0, 5) = perfect(1, 6) = perfect(2, 5) = 0.0;
    CHECK(mlm_loss<double>(perfect, labels) == 0.0);

    // Two positions with known rows: -(ln 0.5 + ln 0.25)/2.
    Matrix<double> rows = Matrix<double>::Constant(2, 4, std::log(0.25));
    rows(0, 0) = std::log(0.5);
    rows(0, 1) = rows(0, 2) = rows(0, 3) = std::log(0.5 / 3);
    const std::vector<MaskedLabel> two{{1, 0}, {3, 2}};
    CHECK(mlm_loss<double>(rows, two) == doctest::Approx(-(std::log(0.5) + std::log(0.25)) / 2).epsilon(1e-15));
}

TEST_CASE("lr_at") {
    LrSchedule s;
    s.total_steps = 1000;
    CHECK(s.warmup_steps() == 100);
    CHECK(lr_at(0, s) == 0.0);
    CHECK(lr_at(50, s) == doctest::Approx(2.5e-5));
    CHECK(lr_at(100, s) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(lr_at(550, s) == doctest::Approx(2.5e-5));
    CHECK(lr_at(1000, s) == 0.0);
    CHECK(lr_at(1001, s) == 0.0);
    LrSchedule none;
    none.total_steps = 5;
    CHECK(none.warmup_steps() == 0);
    CHECK(lr_at(0, none) == 5e-5);
    CHECK(lr_at(5, none) == 0.0);
}

TEST_CASE("adam_step") {
    Matrix<double> p = Matrix<double>::Constant(1, 1, 0.5);
    Matrix<double> g = Matrix<double>::Constant(1, 1, 1.0);
    std::vector<NamedTensor<double>> ps{{"x", 2, &p}};
    std::vector<ConstNamedTensor<double>> gs{{"x", 2, &g}};
    OptimizerState<double> st;
    st.schedule = {1e-3, 10, 0.0};
    adam_step<double>(ps, gs, st);
    CHECK(st.step == 1);
    // m-hat = v-hat = 1, so the step is lr / (1 + eps).
    CHECK(p(0, 0) == doctest::Approx(0.5 - lr_at(1, st.schedule) / (1.0 + 1e-8)).epsilon(1e-14));

    SUBCASE("zero gradients leave parameters unchanged") {
        Matrix<double> q = Matrix<double>::Random(3, 4);
        const Matrix<double> q0 = q;
        Matrix<double> zero = Matrix<double>::Zero(3, 4);
        std::vector<NamedTensor<double>> qs{{"q", 2, &q}};
        std::vector<ConstNamedTensor<double>> zs{{"q", 2, &zero}};
        OptimizerState<double> s2;
        s2.schedule = {1e-2, 10, 0.0};
        adam_step<double>(qs, zs, s2);
        CHECK(q == q0);
        CHECK(s2.step == 1);
    }
    SUBCASE("non-finite gradient names the tensor and changes nothing") {
        g(0, 0) = std::numeric_limits<double>::infinity();
        const double before = p(0, 0);
        CHECK_THROWS_WITH_AS(adam_step<double>(ps, gs, st), doctest::Contains("'x'"), NumericError);
        CHECK(p(0, 0) == before);
        CHECK(st.step == 1);
    }
}

TEST_CASE("train_step") {
    const auto c = small_config(5);
    const auto examples = toy_examples();
    REQUIRE(examples.size() == 32);

    SUBCASE("all-MLM batch has zero MiSAD loss") {
        auto p = init_params<float>(c);
        OptimizerState<float> st;
        st.schedule = {1e-3, 10, 0.1};
        StepOptions opt;
        opt.use_misad = false;
        Rng rng(1);
        const auto r = train_step(examples, p, c, st, opt, rng);
        CHECK(r.l_misad == 0.0);
        CHECK(r.l_mlm > 0.0);
        CHECK(st.step == 1);
    }
    SUBCASE("overfitting run lowers the loss and reruns bit-identically") {
        const auto run = [&](unsigned threads) {
            StepOptions opt;
            opt.seed = 21;
            opt.threads = threads;
            opt.mask_rate = 0.3;
            Trainer t(c, init_params<float>(c), examples, 16, {3e-3, 200, 0.1}, opt);
            std::vector<LossReport> log;
            for (int i = 0; i < 200; ++i) {
                log.push_back(t.step());
            }
            return std::pair{log, t.params()};
        };
        const auto [log, params] = run(1);
        double first = 0.0, last = 0.0;
        for (int i = 0; i < 20; ++i) {
            first += log[static_cast<std::size_t>(i)].l_total / 20;
            last += log[log.size() - 1 - static_cast<std::size_t>(i)].l_total / 20;
        }
        MESSAGE("mean l_total first 20 steps ", first, ", last 20 steps ", last);
        CHECK(last < first);
        CHECK(log.back().l_total < log.front().l_total);

        const auto [log2, params2] = run(3);
        CHECK(params_bit_equal(params, params2));
        for (std::size_t i = 0; i < log.size(); ++i) {
            REQUIRE(log[i].l_total == log2[i].l_total);
        }
    }
}

TEST_CASE("composition_error") {
    const auto c = small_config(6);
    const auto p = init_params<float>(c);
    const auto examples = toy_examples();
    const double err = composition_error(p, c, examples, Pooling::mean);
    CHECK(std::isfinite(err));
    CHECK(err >= 0.0);
    std::vector<TrainingExample> none{{EncodedSequence{Ids{5, 6}}, {}}};
    CHECK(std::isnan(composition_error(p, c, none, Pooling::cls)));
}
