#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "ulr/error.hpp"
#include "ulr/evaluation.hpp"
#include "ulr/parallel.hpp"
#include "ulr/random.hpp"

namespace ulr {

namespace {

constexpr std::string_view kSlot = "{X}";

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

std::string fill_slot(const std::string& templ, const std::string& word) {
    std::string out = templ;
    out.replace(out.find(kSlot), kSlot.size(), word);
    return out;
}

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) {
        ++n;
    }
    return n;
}

std::uint64_t hash_text(std::string_view s) {
    std::uint64_t h = 0x84222325CBF29CE4ULL;
    for (unsigned char ch : s) {
        h = hash_combine(h, ch);
    }
    return h;
}

}  // namespace

void AnalogyQuestion::validate() const {
    if (candidates.empty()) {
        throw Error(fmt::format("analogy question '{} : {} :: {} : ?' has no candidates", a, b, c));
    }
    if (answer_index >= candidates.size()) {
        throw Error(fmt::format("answer index {} out of range for {} candidates", answer_index, candidates.size()));
    }
    std::unordered_set<std::string_view> seen;
    for (const auto& cand : candidates) {
        if (!seen.insert(cand).second) {
            throw Error(fmt::format("duplicate candidate '{}'", cand));
        }
    }
}

std::vector<AnalogyQuestion> read_analogy_questions(std::istream& in) {
    std::vector<AnalogyQuestion> questions;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = split(line, '\t');
        if (fields.size() != 6) {
            throw IoError(fmt::format("analogy line {}: expected 6 tab-separated fields, got {}", line_no,
                                      fields.size()));
        }
        AnalogyQuestion q;
        q.category = std::string(fields[0]);
        q.a = std::string(fields[1]);
        q.b = std::string(fields[2]);
        q.c = std::string(fields[3]);
        for (auto cand : split(fields[4], '|')) {
            q.candidates.emplace_back(cand);
        }
        const auto idx = fields[5];
        const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), q.answer_index);
        if (ec != std::errc() || ptr != idx.data() + idx.size()) {
            throw IoError(fmt::format("analogy line {}: bad answer index '{}'", line_no, idx));
        }
        try {
            q.validate();
        } catch (const Error& e) {
            throw IoError(fmt::format("analogy line {}: {}", line_no, e.what()));
        }
        questions.push_back(std::move(q));
    }
    return questions;
}

std::vector<AnalogyQuestion> read_analogy_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open analogy file '{}'", path.string()));
    }
    return read_analogy_questions(in);
}

void write_analogy_questions(std::ostream& out, std::span<const AnalogyQuestion> questions) {
    for (const auto& q : questions) {
        out << q.category << '\t' << q.a << '\t' << q.b << '\t' << q.c << '\t';
        for (std::size_t i = 0; i < q.candidates.size(); ++i) {
            out << (i ? "|" : "") << q.candidates[i];
        }
        out << '\t' << q.answer_index << '\n';
    }
}

std::size_t answer_analogy(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                           std::span<const Eigen::VectorXd> candidates) {
    if (candidates.empty()) {
        throw Error("analogy question has no candidates");
    }
    const Eigen::VectorXd target = unit_normalized(c) + unit_normalized(b) - unit_normalized(a);
    const double norm = target.norm();
    if (norm == 0.0) {
        spdlog::warn("analogy target vector is zero; answering with the first candidate");
        return 0;
    }
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double score = target.dot(unit_normalized(candidates[i])) / norm;
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return best;
}

std::size_t answer_analogy(const AnalogyQuestion& question, const Embedder& embedder) {
    question.validate();
    std::vector<Eigen::VectorXd> candidates;
    candidates.reserve(question.candidates.size());
    for (const auto& text : question.candidates) {
        candidates.push_back(embedder.embed(text));
    }
    return answer_analogy(embedder.embed(question.a), embedder.embed(question.b), embedder.embed(question.c),
                          candidates);
}

bool is_semantic_category(std::string_view category) {
    static constexpr std::array<std::string_view, 10> kSemantic = {
        "capital-common-countries", "capital-common", "capital-world", "capital-country", "currency",
        "country-currency",         "city-in-state",  "city-state",    "family",          "male-female"};
    return std::find(kSemantic.begin(), kSemantic.end(), category) != kSemantic.end();
}

void AnalogyReport::write(std::ostream& out) const {
    const auto fmt_opt = [](const std::optional<double>& v) {
        return v ? fmt::format("{:.4f}", *v) : std::string("absent");
    };
    out << "category\tgroup\tcorrect\ttotal\taccuracy\n";
    for (const auto& c : categories) {
        out << fmt::format("{}\t{}\t{}\t{}\t{:.4f}\n", c.category, c.semantic ? "sem" : "syn", c.correct, c.total,
                           c.accuracy());
    }
    out << "sem\tsummary\t-\t-\t" << fmt_opt(semantic) << '\n';
    out << "syn\tsummary\t-\t-\t" << fmt_opt(syntactic) << '\n';
    out << "avg\tsummary\t-\t-\t" << fmt_opt(average) << '\n';
}

AnalogyReport evaluate_analogy(std::span<const AnalogyQuestion> questions, const Embedder& embedder,
                               unsigned threads) {
    // Embed each distinct text once.
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::string> texts;
    const auto intern = [&](const std::string& t) {
        if (index.emplace(t, texts.size()).second) {
            texts.push_back(t);
        }
    };
    for (const auto& q : questions) {
        q.validate();
        intern(q.a);
        intern(q.b);
        intern(q.c);
        for (const auto& cand : q.candidates) {
            intern(cand);
        }
    }
    std::vector<Eigen::VectorXd> vectors(texts.size());
    parallel_for(texts.size(), threads, [&](std::size_t i) { vectors[i] = embedder.embed(texts[i]); });

    AnalogyReport report;
    report.predictions.resize(questions.size());
    parallel_for(questions.size(), threads, [&](std::size_t i) {
        const auto& q = questions[i];
        std::vector<Eigen::VectorXd> cands;
        cands.reserve(q.candidates.size());
        for (const auto& cand : q.candidates) {
            cands.push_back(vectors[index.at(cand)]);
        }
        report.predictions[i] =
            answer_analogy(vectors[index.at(q.a)], vectors[index.at(q.b)], vectors[index.at(q.c)], cands);
    });

    std::unordered_map<std::string, std::size_t> slot;
    std::array<std::size_t, 2> correct{};
    std::array<std::size_t, 2> total{};
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const auto& q = questions[i];
        auto [it, fresh] = slot.emplace(q.category, report.categories.size());
        if (fresh) {
            report.categories.push_back({q.category, is_semantic_category(q.category), 0, 0});
        }
        auto& score = report.categories[it->second];
        const bool hit = report.predictions[i] == q.answer_index;
        score.correct += hit;
        ++score.total;
        const std::size_t g = score.semantic ? 0 : 1;
        correct[g] += hit;
        ++total[g];
    }
    if (total[0]) {
        report.semantic = static_cast<double>(correct[0]) / static_cast<double>(total[0]);
    }
    if (total[1]) {
        report.syntactic = static_cast<double>(correct[1]) / static_cast<double>(total[1]);
    }
    if (report.semantic && report.syntactic) {
        report.average = (*report.semantic + *report.syntactic) / 2.0;
    } else if (report.semantic || report.syntactic) {
        report.average = report.semantic ? report.semantic : report.syntactic;
    }
    return report;
}

EmbeddedVocabulary EmbeddedVocabulary::build(std::vector<std::string> texts, const Embedder& reference) {
    EmbeddedVocabulary v;
    v.vectors.resize(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(reference.dimension()));
    for (std::size_t i = 0; i < texts.size(); ++i) {
        v.vectors.row(static_cast<Eigen::Index>(i)) = reference.embed(texts[i]).transpose();
    }
    v.texts = std::move(texts);
    return v;
}

std::vector<std::string> build_candidates(const std::string& a, const std::string& b, const std::string& c,
                                          const std::string& gold, const EmbeddedVocabulary& vocabulary,
                                          const Embedder& reference, std::size_t k) {
    if (k == 0) {
        throw Error("candidate count must be positive");
    }
    const Eigen::VectorXd target = reference.embed(c) + reference.embed(b) - reference.embed(a);
    const Eigen::VectorXd scores = vocabulary.vectors * target;
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < vocabulary.texts.size(); ++i) {
        const auto& t = vocabulary.texts[i];
        if (t != a && t != b && t != c) {
            order.push_back(i);
        }
    }
    if (order.size() < k) {
        throw Error(fmt::format("candidate vocabulary has {} usable items, fewer than k = {}", order.size(), k));
    }
    const auto take = k;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t x, std::size_t y) {
                          const double sx = scores(static_cast<Eigen::Index>(x));
                          const double sy = scores(static_cast<Eigen::Index>(y));
                          return sx != sy ? sx > sy : x < y;
                      });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < take; ++i) {
        out.push_back(vocabulary.texts[order[i]]);
    }
    if (std::find(out.begin(), out.end(), gold) == out.end()) {
        out.back() = gold;
    }
    return out;
}

std::string apply_synonyms(std::string text, std::span<const std::pair<std::string, std::string>> synonyms) {
    for (const auto& [from, to] : synonyms) {
        if (from.empty()) {
            continue;
        }
        std::string out;
        std::size_t start = 0;
        for (auto pos = text.find(from); pos != std::string::npos; pos = text.find(from, start)) {
            out.append(text, start, pos - start);
            out += to;
            start = pos + from.size();
        }
        out.append(text, start);
        text = std::move(out);
    }
    return text;
}

ExpansionResult expand_templates(std::span<const AnalogyCategory> categories,
                                 std::span<const std::string> templates,
                                 std::span<const std::pair<std::string, std::string>> synonyms,
                                 std::size_t semantic_candidates, std::uint64_t seed) {
    if (semantic_candidates < 2) {
        throw Error("semantic candidate count must be at least 2");
    }
    std::vector<std::string> variants;
    for (const auto& t : templates) {
        if (count_occurrences(t, kSlot) != 1) {
            throw Error(fmt::format("template '{}' must contain exactly one {} slot", t, kSlot));
        }
        auto v = apply_synonyms(t, synonyms);
        if (v == t) {
            spdlog::warn("template '{}' has no synonym substitution; its questions keep lexical overlap", t);
        }
        if (count_occurrences(v, kSlot) != 1) {
            throw Error(fmt::format("synonym substitution broke the slot of template '{}'", t));
        }
        variants.push_back(std::move(v));
    }

    ExpansionResult result;
    double length_sum = 0.0;
    std::size_t length_count = 0;
    for (const auto& category : categories) {
        if (category.name.find("currency") != std::string::npos) {
            ++result.skipped_categories;
            spdlog::info("skipping category '{}'", category.name);
            continue;
        }
        const auto& pairs = category.pairs;
        for (std::size_t t = 0; t < templates.size(); ++t) {
            const auto& plain = templates[t];
            const auto& swapped = variants[t];
            for (std::size_t p = 0; p < pairs.size(); ++p) {
                for (std::size_t q = 0; q < pairs.size(); ++q) {
                    if (p == q) {
                        continue;
                    }
                    AnalogyQuestion question;
                    question.category = category.name;
                    question.a = fill_slot(plain, pairs[p].a);
                    question.b = fill_slot(swapped, pairs[p].b);
                    question.c = fill_slot(swapped, pairs[q].a);
                    const auto gold = fill_slot(plain, pairs[q].b);

                    Rng rng(hash_combine(hash_combine(hash_combine(seed, hash_text(category.name)), t),
                                         p * pairs.size() + q));
                    std::vector<std::string> cands{gold};
                    if (!pairs[q].distractors.empty()) {
                        for (const auto& d : pairs[q].distractors) {
                            auto text = fill_slot(plain, d);
                            if (std::find(cands.begin(), cands.end(), text) == cands.end()) {
                                cands.push_back(std::move(text));
                            }
                        }
                    } else {
                        std::vector<std::size_t> others;
                        for (std::size_t j = 0; j < pairs.size(); ++j) {
                            if (j != q && pairs[j].b != pairs[q].b) {
                                others.push_back(j);
                            }
                        }
                        rng.shuffle(others.begin(), others.end());
                        std::unordered_set<std::string> seen{pairs[q].b};
                        for (auto j : others) {
                            if (cands.size() >= semantic_candidates) {
                                break;
                            }
                            if (seen.insert(pairs[j].b).second) {
                                cands.push_back(fill_slot(plain, pairs[j].b));
                            }
                        }
                    }
                    std::vector<std::size_t> perm(cands.size());
                    std::iota(perm.begin(), perm.end(), std::size_t{0});
                    rng.shuffle(perm.begin(), perm.end());
                    for (std::size_t i = 0; i < perm.size(); ++i) {
                        question.candidates.push_back(cands[perm[i]]);
                        if (perm[i] == 0) {
                            question.answer_index = i;
                        }
                    }
                    for (const std::string* s : std::array<const std::string*, 4>{&question.a, &question.b, &question.c, &gold}) {
                        length_sum += static_cast<double>(tokenize(*s).size());
                        ++length_count;
                    }
                    result.questions.push_back(std::move(question));
                }
            }
        }
    }
    result.mean_length = length_count ? length_sum / static_cast<double>(length_count) : 0.0;
    return result;
}

}  // namespace ulr
