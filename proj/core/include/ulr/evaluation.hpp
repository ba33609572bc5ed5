#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ulr/corpus.hpp"
#include "ulr/encoder.hpp"

namespace ulr {

// ---------------------------------------------------------------------------------------
// Embedders

/// Maps text to a unit-norm vector of fixed dimension.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dimension() const = 0;
    virtual Eigen::VectorXd embed(std::string_view text) const = 0;
};

/// v / |v|; throws NumericError on a zero or non-finite vector.
Eigen::VectorXd unit_normalized(const Eigen::VectorXd& v);

/// Encoder checkpoint + vocabulary + pooling strategy. Sequences longer than max_len - 2
/// tokens are truncated with a warning; texts without tokens are rejected.
class EncoderEmbedder final : public Embedder {
public:
    EncoderEmbedder(Checkpoint checkpoint, Vocabulary vocab, Pooling pooling);

    std::size_t dimension() const override { return checkpoint_.config.d_model; }
    Eigen::VectorXd embed(std::string_view text) const override;
    Eigen::VectorXd embed_tokens(std::span<const std::string> tokens) const;

    const EncoderConfig& config() const noexcept { return checkpoint_.config; }

private:
    Checkpoint checkpoint_;
    Vocabulary vocab_;
    Pooling pooling_;
};

/// Averages static word vectors of the tokens it knows (bag of words).
class BagOfWordsEmbedder final : public Embedder {
public:
    explicit BagOfWordsEmbedder(std::unordered_map<std::string, Eigen::VectorXd> vectors);

    /// `token v1 v2 ... vd` per line, space separated.
    static BagOfWordsEmbedder load(const std::filesystem::path& path);
    static BagOfWordsEmbedder read(std::istream& in);

    std::size_t dimension() const override { return dimension_; }
    Eigen::VectorXd embed(std::string_view text) const override;
    bool contains(std::string_view token) const { return vectors_.contains(std::string(token)); }

private:
    std::unordered_map<std::string, Eigen::VectorXd> vectors_;
    std::size_t dimension_ = 0;
};

// ---------------------------------------------------------------------------------------
// Analogy

struct AnalogyQuestion {
    std::string category;
    std::string a;
    std::string b;
    std::string c;
    std::vector<std::string> candidates;
    std::size_t answer_index = 0;

    void validate() const;
    friend bool operator==(const AnalogyQuestion&, const AnalogyQuestion&) = default;
};

/// TSV `category<TAB>a<TAB>b<TAB>c<TAB>cand1|cand2|...<TAB>answer_index`.
std::vector<AnalogyQuestion> read_analogy_questions(std::istream& in);
std::vector<AnalogyQuestion> read_analogy_file(const std::filesystem::path& path);
void write_analogy_questions(std::ostream& out, std::span<const AnalogyQuestion> questions);

/// argmax_i cos(c + b - a, candidate_i) over unit-normalized inputs, lowest index on ties.
/// A zero target makes every score 0, so index 0 wins (with a warning).
std::size_t answer_analogy(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
                           std::span<const Eigen::VectorXd> candidates);
std::size_t answer_analogy(const AnalogyQuestion& question, const Embedder& embedder);

/// Google analogy semantic categories and their merged/renamed variants.
bool is_semantic_category(std::string_view category);

struct CategoryScore {
    std::string category;
    bool semantic = false;
    std::size_t correct = 0;
    std::size_t total = 0;

    double accuracy() const noexcept { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Per-category accuracy plus the sem / syn / average summary. Group accuracies are pooled
/// over the questions of the group; `average` is the mean of the groups that are present.
struct AnalogyReport {
    std::vector<CategoryScore> categories;  // in first-appearance order
    std::optional<double> semantic;
    std::optional<double> syntactic;
    std::optional<double> average;
    std::vector<std::size_t> predictions;  // per question

    void write(std::ostream& out) const;
};

AnalogyReport evaluate_analogy(std::span<const AnalogyQuestion> questions, const Embedder& embedder,
                               unsigned threads = 1);

/// Candidate texts with cached reference embeddings.
struct EmbeddedVocabulary {
    std::vector<std::string> texts;
    Eigen::MatrixXd vectors;  // row i = unit embedding of texts[i]

    static EmbeddedVocabulary build(std::vector<std::string> texts, const Embedder& reference);
};

/// Top-k vocabulary items by cosine to (c + b - a), excluding a, b and c. When the gold
/// answer is missing, it replaces the last candidate. Throws when fewer than k items remain.
std::vector<std::string> build_candidates(const std::string& a, const std::string& b, const std::string& c,
                                          const std::string& gold, const EmbeddedVocabulary& vocabulary,
                                          const Embedder& reference, std::size_t k = 5);

struct WordPair {
    std::string a;
    std::string b;
    /// Alternative forms of b used as the only distractors (syntactic categories).
    std::vector<std::string> distractors;
};

struct AnalogyCategory {
    std::string name;
    std::vector<WordPair> pairs;
};

struct ExpansionResult {
    std::vector<AnalogyQuestion> questions;
    double mean_length = 0.0;  // tokens per phrase over a, b, c and the gold answer
    std::size_t skipped_categories = 0;
};

/// For every category, template and ordered pair (p, q) with p != q, emits
///   a = T(p.a), b = T'(p.b), c = T'(q.a), answer = T(q.b)
/// where T is the template and T' its synonym-substituted variant. Candidates are the gold
/// answer plus either q's own distractors or the b-sides of other pairs (up to
/// `semantic_candidates` in total), all in variant T, in a seeded order. Currency categories
/// are skipped. Throws when a template lacks exactly one "{X}" slot.
ExpansionResult expand_templates(std::span<const AnalogyCategory> categories,
                                 std::span<const std::string> templates,
                                 std::span<const std::pair<std::string, std::string>> synonyms,
                                 std::size_t semantic_candidates = 5, std::uint64_t seed = 0);

/// Replaces every occurrence of each synonym key, in order.
std::string apply_synonyms(std::string text, std::span<const std::pair<std::string, std::string>> synonyms);

// ---------------------------------------------------------------------------------------
// Retrieval

struct RetrievalQuery {
    std::string text;
    std::vector<std::int64_t> gold;
};

struct RetrievalSet {
    std::vector<std::int64_t> ids;  // ascending; row i of an embedded corpus is ids[i]
    std::vector<std::string> texts;
    std::vector<RetrievalQuery> queries;

    /// Throws when a gold set is empty or names an unknown id.
    void validate() const;
};

/// Corpus TSV `id<TAB>text`; queries TSV `text<TAB>gold_id[,gold_id...]`.
RetrievalSet read_retrieval_set(std::istream& corpus, std::istream& queries);
RetrievalSet read_retrieval_set(const std::filesystem::path& corpus, const std::filesystem::path& queries);

/// Row i = embedder.embed(texts[i]). Throws on an empty (token-free) text, naming its index.
Eigen::MatrixXd embed_corpus(std::span<const std::string> texts, const Embedder& embedder, unsigned threads = 1);

/// Row indices of the k best rows by cosine (descending), ties by ascending index.
std::vector<std::size_t> retrieve_topk(const Eigen::VectorXd& query, const Eigen::MatrixXd& corpus, std::size_t k);

/// Fraction of queries with a gold id among the first k ranked ids, per k.
std::vector<double> topk_accuracy(std::span<const std::vector<std::int64_t>> rankings,
                                  std::span<const std::vector<std::int64_t>> gold,
                                  std::span<const std::size_t> ks);

struct GroupedAccuracy {
    std::string group;
    std::size_t queries = 0;
    std::vector<double> accuracy;
};

/// topk_accuracy restricted to each distinct group label (first-appearance order).
std::vector<GroupedAccuracy> topk_accuracy_by_group(std::span<const std::vector<std::int64_t>> rankings,
                                                    std::span<const std::vector<std::int64_t>> gold,
                                                    std::span<const std::string> groups,
                                                    std::span<const std::size_t> ks);

/// Okapi BM25 over tokenized documents. idf = ln(1 + (N - df + 0.5) / (df + 0.5)).
class Bm25Index {
public:
    explicit Bm25Index(std::span<const std::vector<std::string>> documents, double k1 = 1.2, double b = 0.75);

    std::vector<double> scores(std::span<const std::string> query) const;
    /// All document indices by score (descending), ties by ascending index.
    std::vector<std::size_t> rank(std::span<const std::string> query) const;
    double idf(const std::string& term) const;

private:
    double k1_;
    double b_;
    double avg_length_ = 0.0;
    std::vector<std::size_t> lengths_;
    std::unordered_map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> postings_;
};

std::vector<std::size_t> bm25_rank(std::span<const std::string> query,
                                   std::span<const std::vector<std::string>> documents, double k1 = 1.2,
                                   double b = 0.75);

/// Indices of `scores` sorted descending, ties by ascending index.
std::vector<std::size_t> rank_by_score(std::span<const double> scores);

}  // namespace ulr
