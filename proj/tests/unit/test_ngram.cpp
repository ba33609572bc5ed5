#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "interval_scan.hpp"
#include "recount.hpp"
#include "sort_oracle.hpp"
#include "ulr/error.hpp"
#include "ulr/ngram.hpp"
#include "ulr/random.hpp"

using namespace ulr;
using Ids = std::vector<TokenId>;

namespace {

std::vector<EncodedSequence> seqs(std::initializer_list<Ids> lists) {
    std::vector<EncodedSequence> out;
    for (const auto& l : lists) {
        out.push_back({l});
    }
    return out;
}

std::vector<EncodedSequence> random_corpus(std::uint64_t seed, std::size_t tokens, TokenId vocab) {
    Rng rng(seed);
    std::vector<EncodedSequence> out;
    std::size_t total = 0;
    while (total < tokens) {
        const auto len = std::min<std::size_t>(1 + rng.below(30), tokens - total);
        EncodedSequence s;
        for (std::size_t i = 0; i < len; ++i) {
            // Skewed draw so some n-grams repeat.
            const auto a = rng.below(static_cast<std::uint64_t>(vocab));
            const auto b = rng.below(static_cast<std::uint64_t>(vocab));
            s.ids.push_back(special::kCount + static_cast<TokenId>(std::min(a, b)));
        }
        total += len;
        out.push_back(std::move(s));
    }
    return out;
}

NgramKey key(Ids ids) { return NgramKey(ids); }

}  // namespace

TEST_CASE("NgramKey packs and orders lexicographically") {
    const NgramKey k(Ids{7, 0, 42});
    CHECK(k.size() == 3);
    CHECK(k[0] == 7);
    CHECK(k[1] == 0);
    CHECK(k[2] == 42);
    CHECK(k.ids() == Ids{7, 0, 42});
    CHECK(NgramKey(Ids{1, 2}) < NgramKey(Ids{1, 2, 0}));
    CHECK(NgramKey(Ids{1, 3}) > NgramKey(Ids{1, 2, 9}));
    CHECK(NgramKey(Ids{kMaxPackedTokenId, kMaxPackedTokenId}).ids() == Ids{kMaxPackedTokenId, kMaxPackedTokenId});
    CHECK_THROWS_AS(NgramKey(Ids{kMaxPackedTokenId + 1, 1}), Error);
    CHECK_THROWS_AS(NgramKey(Ids{1, 2, 3, 4, 5, 6, 7}), Error);

    Rng rng(3);
    for (int i = 0; i < 2000; ++i) {
        Ids a(1 + rng.below(6));
        Ids b(1 + rng.below(6));
        for (auto& x : a) x = static_cast<TokenId>(rng.below(4));
        for (auto& x : b) x = static_cast<TokenId>(rng.below(4));
        CHECK((NgramKey(a) < NgramKey(b)) == (a < b));
    }
}

TEST_CASE("count_ngrams on a b a b") {
    const auto c = count_ngrams(seqs({{5, 6, 5, 6}}), 6);
    CHECK(c.total_tokens == 4);
    CHECK(c.unigram(5) == 2);
    CHECK(c.unigram(6) == 2);
    CHECK(c.count(Ids{5, 6}) == 2);
    CHECK(c.count(Ids{6, 5}) == 1);
    CHECK(c.count(Ids{5, 6, 5, 6}) == 1);
    CHECK(c.count(Ids{6, 6}) == 0);
    CHECK_THROWS_WITH(count_ngrams(std::vector<EncodedSequence>{}, 3), "empty corpus");
    CHECK_THROWS_AS(count_ngrams(seqs({{5}}), 1), Error);
    CHECK_THROWS_AS(count_ngrams(seqs({{5}}), 7), Error);
}

TEST_CASE("n-grams never cross documents") {
    const auto c = count_ngrams(seqs({{5, 6}, {7, 8}}), 3);
    CHECK(c.count(Ids{6, 7}) == 0);
    CHECK(c.count(Ids{5, 6}) == 1);
}

TEST_CASE("PMI hand-derived fixtures") {
    const auto abab = count_ngrams(seqs({{5, 6, 5, 6}}), 6);
    CHECK(std::abs(compute_pmi(Ids{5, 6}, abab) - 0.5 * std::numbers::ln2) < 1e-12);

    // the cat sat the cat ran
    const auto cats = count_ngrams(seqs({{5, 6, 7, 5, 6, 8}}), 6);
    CHECK(std::abs(compute_pmi(Ids{5, 6}, cats) - 0.5 * std::log(3.0)) < 1e-12);

    // Independence: a b b a gives P(a,b) = P(a) P(b).
    const auto indep = count_ngrams(seqs({{5, 6, 6, 5}}), 2);
    CHECK(std::abs(compute_pmi(Ids{5, 6}, indep)) < 1e-15);

    CHECK_THROWS_WITH(compute_pmi(Ids{6, 6}, abab), "unseen n-gram");
    CHECK_THROWS_WITH(compute_pmi(Ids{5, 9}, abab), "unseen n-gram");
}

TEST_CASE("counts and PMI match the brute-force oracle") {
    const auto corpus = random_corpus(17, 1000, 12);
    std::vector<Ids> raw;
    for (const auto& s : corpus) {
        raw.push_back(s.ids);
    }
    const auto expected = oracle::count_ngrams(raw, 4);
    const auto counts = count_ngrams(corpus, 4);
    const auto sharded = count_ngrams(corpus, 4, 3);
    CHECK(counts.total_tokens == 1000);

    std::size_t ngram_entries = 0;
    for (const auto& [w, n] : expected) {
        REQUIRE(counts.count(w) == n);
        REQUIRE(sharded.count(w) == n);
        ngram_entries += w.size() >= 2 ? 1 : 0;
    }
    CHECK(counts.ngrams.size() == ngram_entries);

    std::int64_t unigram_sum = 0;
    for (auto u : counts.unigrams) {
        unigram_sum += u;
    }
    CHECK(unigram_sum == counts.total_tokens);

    const auto table = build_table(counts);
    CHECK(table.size() == ngram_entries);
    for (const auto& [k, e] : table.entries()) {
        const auto w = k.ids();
        REQUIRE(e.count == expected.at(w));
        REQUIRE(std::abs(e.pmi - oracle::pmi(expected, w, 1000)) <= 1e-12);
    }
}

TEST_CASE("PMI is scale invariant and monotone in the joint count") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const std::int64_t total = 100 + static_cast<std::int64_t>(rng.below(1000));
        std::vector<std::int64_t> uni(2 + rng.below(4));
        for (auto& u : uni) {
            u = 5 + static_cast<std::int64_t>(rng.below(90));
        }
        const std::int64_t joint = 1 + static_cast<std::int64_t>(rng.below(5));
        const std::int64_t scale = 2 + static_cast<std::int64_t>(rng.below(7));
        std::vector<std::int64_t> scaled(uni);
        for (auto& u : scaled) {
            u *= scale;
        }
        const double base = pmi_from_counts(joint, uni, total);
        CHECK(std::abs(pmi_from_counts(joint * scale, scaled, total * scale) - base) < 1e-12);
        CHECK(pmi_from_counts(joint + 1, uni, total) > base);
    }
}

TEST_CASE("build_table skips special ids and honours min_count") {
    const auto counts = count_ngrams(seqs({{5, 6, special::kUnk, 5, 6}}), 3);
    const auto table = build_table(counts);
    CHECK(table.contains(Ids{5, 6}));
    CHECK(!table.contains(Ids{6, special::kUnk}));
    CHECK(!table.contains(Ids{5, 6, special::kUnk}));
    const auto frequent = build_table(counts, 2);
    CHECK(frequent.size() == 1);
}

TEST_CASE("prune_table") {
    // Twenty bigrams over one document, pmis with ties.
    NgramTable table(2, 100);
    Ids doc;
    for (TokenId i = 0; i <= 20; ++i) {
        doc.push_back(5 + i);
    }
    for (TokenId i = 0; i < 20; ++i) {
        table.insert(key({5 + i, 6 + i}), {1 + i % 3, static_cast<double>((i * 7) % 5), false});
    }
    const std::vector<EncodedSequence> docs{{doc}};

    SUBCASE("infinite threshold empties the table") {
        CHECK(prune_table(table, docs, std::numeric_limits<double>::infinity(), kNoPerDocumentCap).empty());
    }
    SUBCASE("top-k per document equals the full-sort prefix") {
        const auto kept = prune_table(table, docs, -std::numeric_limits<double>::infinity(), 5);
        const auto sorted = oracle::sorted_entries(table);
        REQUIRE(kept.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) {
            const auto* e = kept.find(sorted[i].first);
            REQUIRE(e != nullptr);
            CHECK(*e == sorted[i].second);
        }
    }
    SUBCASE("threshold is strict and output is a subset with unchanged entries") {
        const auto kept = prune_table(table, docs, 2.0, kNoPerDocumentCap);
        for (const auto& [k, e] : kept.entries()) {
            CHECK(e.pmi > 2.0);
            REQUIRE(table.find(k) != nullptr);
            CHECK(*table.find(k) == e);
        }
        std::size_t expected = 0;
        for (const auto& [k, e] : table.entries()) {
            expected += e.pmi > 2.0 ? 1 : 0;
        }
        CHECK(kept.size() == expected);
    }
    SUBCASE("union over documents") {
        const std::vector<EncodedSequence> two{{Ids{5, 6, 7}}, {Ids{20, 21, 22}}};
        const auto kept = prune_table(table, two, -1.0, 1);
        CHECK(kept.size() == 2);
    }
}

TEST_CASE("inject_entities") {
    const NgramTable empty(3, 10);
    const std::vector<Ids> entity{{9, 10}};
    const auto one = inject_entities(empty, entity);
    REQUIRE(one.contains(Ids{9, 10}));
    CHECK(one.find(Ids{9, 10})->privileged);
    CHECK(std::isinf(one.find(Ids{9, 10})->pmi));
    CHECK(inject_entities(one, entity).size() == 1);

    const auto pruned = prune_table(one, std::vector<EncodedSequence>{{Ids{9, 10}}},
                                    std::numeric_limits<double>::infinity(), kNoPerDocumentCap);
    CHECK(pruned.contains(Ids{9, 10}));

    const std::vector<Ids> bad{{9}, {5, 6, 7, 8}, {9, special::kUnk}};
    CHECK(inject_entities(empty, bad).empty());

    const auto counts = count_ngrams(seqs({{9, 10, 11, 9, 10}}), 3);
    const auto observed = inject_entities(empty, entity, &counts);
    CHECK(observed.find(Ids{9, 10})->count == 2);
    CHECK(std::abs(observed.find(Ids{9, 10})->pmi - compute_pmi(Ids{9, 10}, counts)) < 1e-15);
}

TEST_CASE("mark_sequence greedy rules") {
    NgramTable t1(3, 10);
    t1.insert(key({5, 6, 7}), {1, 1.0, false});
    t1.insert(key({5, 6}), {1, 2.0, false});
    CHECK(mark_sequence(Ids{5, 6, 7}, t1) == SpanAnnotation{{0, 3}});

    NgramTable t2(2, 10);
    t2.insert(key({5, 6}), {1, 1.0, false});
    t2.insert(key({6, 7}), {1, 1.0, false});
    CHECK(mark_sequence(Ids{5, 6, 6, 7}, t2) == SpanAnnotation{{0, 2}, {2, 4}});
    CHECK(mark_sequence(Ids{5, 6, 7}, t2) == SpanAnnotation{{0, 2}});
    CHECK(mark_sequence(Ids{}, t2).empty());
    CHECK(mark_sequence(Ids{8, 9}, t2).empty());
}

TEST_CASE("mark_sequence matches the interval-scan oracle") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        NgramTable table(6, 1000);
        for (int i = 0; i < 40; ++i) {
            Ids w(2 + rng.below(5));
            for (auto& x : w) x = 5 + static_cast<TokenId>(rng.below(4));
            table.insert(NgramKey(w), {1, 0.5, false});
        }
        for (int s = 0; s < 10; ++s) {
            Ids seq(50);
            for (auto& x : seq) x = 5 + static_cast<TokenId>(rng.below(4));
            const auto spans = mark_sequence(seq, table);
            REQUIRE(spans == oracle::interval_scan(seq, table));
            for (std::size_t i = 0; i < spans.size(); ++i) {
                CHECK(spans[i].length() >= 2);
                CHECK(table.contains(std::span<const TokenId>(seq).subspan(spans[i].begin, spans[i].length())));
                if (i) {
                    CHECK(spans[i - 1].end <= spans[i].begin);
                }
            }
        }
    }
}

TEST_CASE("table file round trip") {
    Vocabulary vocab;
    for (const char* w : {"new", "york", "city", "the"}) {
        vocab.add(w, 1);
    }
    const auto corpus = seqs({{5, 6, 7, 8, 5, 6}, {8, 5, 6, 7}});
    auto table = build_table(count_ngrams(corpus, 3));
    table = inject_entities(std::move(table), std::vector<Ids>{{7, 5}});

    std::stringstream first;
    table.write(first, vocab);
    CHECK(first.str().rfind("ngram\tcount\tpmi\n", 0) == 0);
    const auto back = NgramTable::read(first, vocab);
    CHECK(back.size() == table.size());
    for (const auto& [k, e] : table.entries()) {
        REQUIRE(back.find(k) != nullptr);
        CHECK(back.find(k)->count == e.count);
        CHECK(back.find(k)->privileged == e.privileged);
    }
    std::stringstream second;
    back.write(second, vocab);
    CHECK(second.str() == first.str());

    std::stringstream empty_out;
    NgramTable(3, 0).write(empty_out, vocab);
    CHECK(empty_out.str() == "ngram\tcount\tpmi\n");

    std::istringstream with_oov("ngram\tcount\tpmi\nnew york\t2\t0.5\nnew jersey\t1\t0.25\n");
    std::size_t dropped = 0;
    const auto partial = NgramTable::read(with_oov, vocab, &dropped);
    CHECK(partial.size() == 1);
    CHECK(dropped == 1);

    std::istringstream headerless("new york\t2\t0.5\n");
    CHECK_THROWS_AS(NgramTable::read(headerless, vocab), IoError);
}

TEST_CASE("length_histogram counts the top-ranked entries") {
    NgramTable t(4, 10);
    t.insert(key({5, 6}), {1, 3.0, false});
    t.insert(key({5, 6, 7}), {1, 2.0, false});
    t.insert(key({6, 7}), {1, 1.0, false});
    t.insert(key({5, 6, 7, 8}), {1, 0.5, false});
    const auto h = length_histogram(t, 3);
    REQUIRE(h.size() >= 4);
    CHECK(h[2] == 2);
    CHECK(h[3] == 1);
    CHECK(h[4] == 0);
}
