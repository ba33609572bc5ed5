#include "commands.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "ulr/corpus.hpp"
#include "ulr/encoder.hpp"
#include "ulr/error.hpp"
#include "ulr/evaluation.hpp"
#include "ulr/ngram.hpp"
#include "ulr/parallel.hpp"
#include "ulr/run_config.hpp"
#include "ulr/training.hpp"

namespace ulr::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::array<ConfigKey, 10> kExtractKeys{{
    {"corpus", "", "corpus file, one document per line"},
    {"order", "6", "longest n-gram length (2..6)"},
    {"threshold", "0.0", "keep n-grams with PMI above this value (inf keeps none)"},
    {"top_k", "3000", "per-document cap on kept n-grams"},
    {"min_count", "1", "minimum n-gram count"},
    {"vocab_min_count", "5", "minimum token count for the vocabulary"},
    {"vocab_max_size", "50000", "vocabulary size cap, specials included"},
    {"entities", "", "optional file of entity n-grams, one per line"},
    {"histogram_top", "2000", "number of top-ranked n-grams in the length histogram"},
    {"seed", "0", "random seed"},
}};

constexpr std::array<ConfigKey, 18> kTrainKeys{{
    {"corpus", "", "corpus file, one document per line"},
    {"vocab", "", "vocabulary TSV written by extract-ngrams"},
    {"ngrams", "", "n-gram table written by extract-ngrams"},
    {"d_model", "64", "hidden size"},
    {"n_heads", "4", "attention heads"},
    {"n_layers", "2", "encoder layers"},
    {"d_ff", "256", "feed-forward size"},
    {"max_len", "128", "maximum framed sequence length"},
    {"dropout", "0.1", "dropout rate"},
    {"batch_size", "64", "examples per step"},
    {"total_steps", "1000", "optimizer steps"},
    {"peak_lr", "5e-5", "peak learning rate"},
    {"warmup_fraction", "0.1", "fraction of steps spent warming up"},
    {"mask_rate", "0.15", "MLM selection probability"},
    {"use_misad", "true", "add the composition loss"},
    {"pooling_for_misad", "cls", "pooling feeding the composition loss (cls, mean, max)"},
    {"log_every", "1", "write a metrics row every this many steps"},
    {"seed", "0", "random seed"},
}};

constexpr std::array<ConfigKey, 6> kAnalogyKeys{{
    {"dataset", "", "analogy TSV"},
    {"checkpoint", "", "encoder checkpoint"},
    {"vocab", "", "vocabulary TSV (default: vocab.tsv beside the checkpoint)"},
    {"vectors", "", "word vector file for the bag-of-words baseline"},
    {"pooling", "mean", "pooling for checkpoint embeddings (cls, mean, max)"},
    {"seed", "0", "random seed"},
}};

constexpr std::array<ConfigKey, 12> kRetrievalKeys{{
    {"backend", "checkpoint", "checkpoint, vectors or bm25"},
    {"corpus", "", "retrieval corpus TSV (id, text)"},
    {"queries", "", "queries TSV (text, gold ids)"},
    {"checkpoint", "", "encoder checkpoint"},
    {"vocab", "", "vocabulary TSV (default: vocab.tsv beside the checkpoint)"},
    {"vectors", "", "word vector file"},
    {"pooling", "mean", "pooling for checkpoint embeddings (cls, mean, max)"},
    {"ks", "1,5,10", "comma-separated cutoffs"},
    {"length_bins", "", "comma-separated upper bounds on query length for grouped rows"},
    {"k1", "1.2", "BM25 k1"},
    {"b", "0.75", "BM25 b"},
    {"seed", "0", "random seed"},
}};

constexpr std::array<ConfigKey, 6> kEmbedKeys{{
    {"texts", "", "text file, one text per line"},
    {"checkpoint", "", "encoder checkpoint"},
    {"vocab", "", "vocabulary TSV (default: vocab.tsv beside the checkpoint)"},
    {"vectors", "", "word vector file"},
    {"pooling", "mean", "pooling for checkpoint embeddings (cls, mean, max)"},
    {"seed", "0", "random seed"},
}};

constexpr std::array<std::string_view, 3> kBackends{"checkpoint", "vectors", "bm25"};

struct Invocation {
    RunConfig config;
    unsigned threads = 1;
    std::string out;
};

std::string flag_name(std::string_view key) {
    std::string s(key);
    std::replace(s.begin(), s.end(), '_', '-');
    return "--" + s;
}

void log_config(const Invocation& inv) {
    spdlog::info("ulr {} (threads = {})", inv.config.command(), inv.threads);
    std::istringstream lines(inv.config.echo());
    std::string line;
    while (std::getline(lines, line)) {
        spdlog::info("  {}", line);
    }
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError(fmt::format("cannot write '{}'", path.string()));
    }
    return out;
}

/// Writes to --out when given, else to the command's standard output.
template <typename Writer>
void emit(const Invocation& inv, std::ostream& stdout_stream, Writer&& write) {
    if (inv.out.empty()) {
        write(stdout_stream);
        return;
    }
    auto file = open_output(inv.out);
    write(file);
    if (!file) {
        throw IoError(fmt::format("error writing '{}'", inv.out));
    }
}

fs::path output_dir(const Invocation& inv) {
    const fs::path dir = inv.out.empty() ? fs::path(".") : fs::path(inv.out);
    fs::create_directories(dir);
    return dir;
}

std::vector<EncodedSequence> encode_all(std::span<const Document> docs, const Vocabulary& vocab) {
    std::vector<EncodedSequence> out;
    out.reserve(docs.size());
    for (const auto& d : docs) {
        out.push_back(encode(d.tokens, vocab));
    }
    return out;
}

std::vector<std::size_t> parse_size_list(const std::string& text, std::string_view key) {
    std::vector<std::size_t> out;
    std::string_view rest = text;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const auto item = rest.substr(0, comma);
        std::size_t v = 0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size() || v == 0) {
            throw Error(fmt::format("setting '{}' must be a list of positive integers, got '{}'", key, text));
        }
        out.push_back(v);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    return out;
}

std::unique_ptr<Embedder> make_embedder(const RunConfig& c) {
    const bool checkpoint = c.has("checkpoint");
    const bool vectors = c.has("vectors");
    if (checkpoint == vectors) {
        throw Error("set exactly one of 'checkpoint' and 'vectors'");
    }
    if (vectors) {
        return std::make_unique<BagOfWordsEmbedder>(BagOfWordsEmbedder::load(c.get("vectors")));
    }
    const fs::path ckpt = c.get("checkpoint");
    const fs::path vocab = c.has("vocab") ? fs::path(c.get("vocab")) : ckpt.parent_path() / "vocab.tsv";
    return std::make_unique<EncoderEmbedder>(load_checkpoint(ckpt), Vocabulary::load(vocab),
                                             parse_pooling(c.get("pooling")));
}

// ---------------------------------------------------------------------------------------

void cmd_extract_ngrams(const Invocation& inv, std::ostream&) {
    const auto& c = inv.config;
    const auto order = c.get_uint("order");
    if (order < 2 || order > kMaxNgramOrder) {
        throw Error(fmt::format("setting 'order' must be in 2..{}, got {}", kMaxNgramOrder, order));
    }
    const auto docs = read_corpus(c.require("corpus"));
    if (docs.empty()) {
        throw Error(fmt::format("corpus '{}' has no documents", c.get("corpus")));
    }
    const auto vocab = build_vocabulary(docs, c.get_int("vocab_min_count"), c.get_uint("vocab_max_size"));
    const auto encoded = encode_all(docs, vocab);
    const auto counts = count_ngrams(encoded, order, inv.threads);
    auto table = prune_table(build_table(counts, c.get_int("min_count")), encoded, c.get_double("threshold"),
                             c.get_uint("top_k"));
    if (c.has("entities")) {
        table = inject_entities(std::move(table), read_entity_file(c.get("entities"), vocab), &counts);
    }

    const auto dir = output_dir(inv);
    vocab.save(dir / "vocab.tsv");
    table.save(dir / "ngrams.tsv", vocab);

    const auto top = c.get_uint("histogram_top");
    const auto hist = length_histogram(table, top);
    std::size_t ranked = 0;
    for (auto h : hist) ranked += h;
    auto summary = open_output(dir / "summary.tsv");
    summary << "documents\t" << docs.size() << '\n'
            << "tokens\t" << counts.total_tokens << '\n'
            << "vocabulary\t" << vocab.size() << '\n'
            << "ngrams\t" << table.size() << '\n'
            << "histogram_top\t" << ranked << '\n';
    for (std::size_t n = 2; n <= order; ++n) {
        summary << "length_" << n << '\t' << hist[n] << '\n';
    }
    spdlog::info("{} documents, {} tokens, vocabulary {}, {} n-grams kept", docs.size(), counts.total_tokens,
                 vocab.size(), table.size());
    for (std::size_t n = 2; n <= order; ++n) {
        spdlog::info("  top {} by length: {} words = {}", ranked, n, hist[n]);
    }
    if (ranked > 0) {
        spdlog::info("  share of 2-3 word n-grams among the top {}: {:.1f}%", ranked,
                     100.0 * static_cast<double>(hist[2] + hist[3]) / static_cast<double>(ranked));
    }
}

void cmd_train(const Invocation& inv, std::ostream&) {
    const auto& c = inv.config;
    const auto vocab = Vocabulary::load(c.require("vocab"));
    const auto docs = read_corpus(c.require("corpus"));
    std::size_t dropped = 0;
    const auto table = NgramTable::load(c.require("ngrams"), vocab, &dropped);
    if (dropped > 0) {
        spdlog::warn("{} n-grams use tokens outside the vocabulary and were dropped", dropped);
    }

    const auto seed = c.get_uint("seed");
    EncoderConfig ec;
    ec.vocab_size = vocab.size();
    ec.d_model = c.get_uint("d_model");
    ec.n_heads = c.get_uint("n_heads");
    ec.n_layers = c.get_uint("n_layers");
    ec.d_ff = c.get_uint("d_ff");
    ec.max_len = c.get_uint("max_len");
    ec.dropout = c.get_double("dropout");
    ec.seed = seed;
    ec.validate();

    auto examples = make_examples(encode_all(docs, vocab), table, ec.max_len);
    if (examples.empty()) {
        throw Error(fmt::format("corpus '{}' has no documents", c.get("corpus")));
    }
    auto params = init_params<float>(ec);
    const auto mask_rate = c.get_double("mask_rate");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) {
        throw Error(fmt::format("setting 'mask_rate' must be in [0, 1], got {}", mask_rate));
    }
    StepOptions options;
    options.use_misad = c.get_bool("use_misad");
    options.misad_pooling = parse_pooling(c.get("pooling_for_misad"));
    options.mask_rate = mask_rate;
    options.dropout = ec.dropout;
    options.seed = seed;
    options.threads = inv.threads;

    LrSchedule schedule;
    schedule.peak_lr = c.get_double("peak_lr");
    schedule.total_steps = c.get_uint("total_steps");
    schedule.warmup_fraction = c.get_double("warmup_fraction");
    if (schedule.total_steps == 0) {
        throw Error("setting 'total_steps' must be positive");
    }
    if (!(schedule.warmup_fraction >= 0.0 && schedule.warmup_fraction <= 1.0)) {
        throw Error(fmt::format("setting 'warmup_fraction' must be in [0, 1], got {}", schedule.warmup_fraction));
    }
    const auto batch_size = c.get_uint("batch_size");
    if (batch_size == 0) {
        throw Error("setting 'batch_size' must be positive");
    }
    const auto log_every = std::max<std::uint64_t>(1, c.get_uint("log_every"));

    const auto dir = output_dir(inv);
    {
        auto echo = open_output(dir / "config.txt");
        echo << c.echo();
    }
    std::size_t with_spans = 0;
    for (const auto& e : examples) with_spans += !e.spans.empty();
    spdlog::info("{} training examples, {} with marked n-grams", examples.size(), with_spans);

    Trainer trainer(ec, std::move(params), std::move(examples), batch_size, schedule, options);
    auto metrics = open_output(dir / "metrics.tsv");
    metrics << "step\tl_misad\tl_mlm\tl_total\tlr\n";
    for (std::uint64_t s = 1; s <= schedule.total_steps; ++s) {
        const auto r = trainer.step();
        if (s % log_every == 0 || s == schedule.total_steps) {
            metrics << fmt::format("{}\t{:.9g}\t{:.9g}\t{:.9g}\t{:.9g}\n", s, r.l_misad, r.l_mlm, r.l_total,
                                   trainer.current_lr());
            metrics.flush();
            spdlog::debug("step {}: l_total {:.6f}", s, r.l_total);
        }
    }
    save_checkpoint(trainer.params(), ec, dir / "checkpoint.bin");
    vocab.save(dir / "vocab.tsv");
    spdlog::info("wrote {}", (dir / "checkpoint.bin").string());
}

void cmd_eval_analogy(const Invocation& inv, std::ostream& out) {
    const auto& c = inv.config;
    const auto questions = read_analogy_file(c.require("dataset"));
    const auto embedder = make_embedder(c);
    const auto report = evaluate_analogy(questions, *embedder, inv.threads);
    emit(inv, out, [&](std::ostream& o) { report.write(o); });
}

std::string length_group(std::size_t length, std::span<const std::size_t> bins) {
    std::size_t lower = 1;
    for (auto upper : bins) {
        if (length <= upper) {
            return fmt::format("len{}-{}", lower, upper);
        }
        lower = upper + 1;
    }
    return fmt::format("len{}+", lower);
}

void cmd_eval_retrieval(const Invocation& inv, std::ostream& out) {
    const auto& c = inv.config;
    const auto& backend = c.get("backend");
    if (std::find(kBackends.begin(), kBackends.end(), backend) == kBackends.end()) {
        throw Error(fmt::format("unknown backend '{}' (valid: {})", backend, fmt::join(kBackends, ", ")));
    }
    const auto ks = parse_size_list(c.require("ks"), "ks");
    auto bins = parse_size_list(c.get("length_bins"), "length_bins");
    if (!std::is_sorted(bins.begin(), bins.end()) || std::adjacent_find(bins.begin(), bins.end()) != bins.end()) {
        throw Error("setting 'length_bins' must be strictly increasing");
    }
    const auto set = read_retrieval_set(c.require("corpus"), c.require("queries"));
    if (set.texts.empty()) {
        throw Error(fmt::format("retrieval corpus '{}' is empty", c.get("corpus")));
    }
    const auto depth = std::min(*std::max_element(ks.begin(), ks.end()), set.texts.size());

    std::vector<std::vector<std::size_t>> ranked(set.queries.size());
    if (backend == "bm25") {
        std::vector<std::vector<std::string>> docs;
        for (const auto& t : set.texts) docs.push_back(tokenize(t));
        const Bm25Index index(docs, c.get_double("k1"), c.get_double("b"));
        parallel_for(set.queries.size(), inv.threads, [&](std::size_t q) {
            auto r = index.rank(tokenize(set.queries[q].text));
            r.resize(depth);
            ranked[q] = std::move(r);
        });
    } else {
        if ((backend == "checkpoint") != c.has("checkpoint")) {
            throw Error(fmt::format("backend '{}' needs '{}' and no other model", backend, backend));
        }
        const auto embedder = make_embedder(c);
        const auto matrix = embed_corpus(set.texts, *embedder, inv.threads);
        parallel_for(set.queries.size(), inv.threads, [&](std::size_t q) {
            if (tokenize(set.queries[q].text).empty()) {
                throw Error(fmt::format("query {} is empty", q));
            }
            ranked[q] = retrieve_topk(embedder->embed(set.queries[q].text), matrix, depth);
        });
    }

    std::vector<std::vector<std::int64_t>> rankings;
    std::vector<std::vector<std::int64_t>> gold;
    std::vector<std::string> groups;
    for (std::size_t q = 0; q < set.queries.size(); ++q) {
        std::vector<std::int64_t> ids;
        for (auto row : ranked[q]) ids.push_back(set.ids[row]);
        rankings.push_back(std::move(ids));
        gold.push_back(set.queries[q].gold);
        groups.push_back(length_group(tokenize(set.queries[q].text).size(), bins));
    }

    emit(inv, out, [&](std::ostream& o) {
        o << "group\tqueries";
        for (auto k : ks) o << "\ttop" << k;
        o << '\n';
        const auto row = [&](std::string_view name, std::size_t n, const std::vector<double>& acc) {
            o << name << '\t' << n;
            for (double a : acc) o << fmt::format("\t{:.4f}", a);
            o << '\n';
        };
        row("all", rankings.size(), topk_accuracy(rankings, gold, ks));
        if (!bins.empty()) {
            auto by = topk_accuracy_by_group(rankings, gold, groups, ks);
            std::vector<std::string> order;
            for (std::size_t i = 0; i <= bins.size(); ++i) {
                order.push_back(length_group(i == bins.size() ? bins.back() + 1 : bins[i], bins));
            }
            for (const auto& label : order) {
                for (const auto& g : by) {
                    if (g.group == label) row(g.group, g.queries, g.accuracy);
                }
            }
        }
    });
}

void cmd_embed(const Invocation& inv, std::ostream& out) {
    const auto& c = inv.config;
    std::ifstream in(c.require("texts"));
    if (!in) {
        throw IoError(fmt::format("cannot open texts '{}'", c.get("texts")));
    }
    std::vector<std::string> texts;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        texts.push_back(line);
    }
    const auto embedder = make_embedder(c);
    const auto matrix = embed_corpus(texts, *embedder, inv.threads);
    emit(inv, out, [&](std::ostream& o) {
        for (Eigen::Index i = 0; i < matrix.rows(); ++i) {
            for (Eigen::Index j = 0; j < matrix.cols(); ++j) {
                o << (j ? " " : "") << fmt::format("{}", matrix(i, j));
            }
            o << '\n';
        }
    });
}

struct Command {
    std::string_view name;
    std::string_view description;
    std::span<const ConfigKey> keys;
    void (*run)(const Invocation&, std::ostream&);
};

const std::array<Command, 5> kCommands{{
    {"extract-ngrams", "count n-grams, score them by PMI and write vocab.tsv, ngrams.tsv and summary.tsv",
     kExtractKeys, cmd_extract_ngrams},
    {"train", "train the encoder; writes checkpoint.bin, vocab.tsv, metrics.tsv and config.txt", kTrainKeys,
     cmd_train},
    {"eval-analogy", "score an analogy dataset with a checkpoint or word vectors", kAnalogyKeys, cmd_eval_analogy},
    {"eval-retrieval", "Top-k paraphrase retrieval with a checkpoint, word vectors or BM25", kRetrievalKeys,
     cmd_eval_retrieval},
    {"embed", "write one unit-norm vector per input line", kEmbedKeys, cmd_embed},
}};

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app("Universal language representation toolkit", "ulr");
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "show help for every command");

    struct Parsed {
        std::string config_file;
        std::optional<std::string> seed;
        unsigned threads = 1;
        std::string out;
        std::map<std::string, std::pair<CLI::Option*, std::string>> flags;
    };
    std::vector<std::unique_ptr<Parsed>> parsed;
    std::vector<CLI::App*> subs;
    for (const auto& cmd : kCommands) {
        auto* sub = app.add_subcommand(std::string(cmd.name), std::string(cmd.description));
        auto& p = *parsed.emplace_back(std::make_unique<Parsed>());
        sub->add_option("--config", p.config_file, "key = value settings file");
        sub->add_option("--seed", p.seed, "random seed (overrides the config file)");
        sub->add_option("--threads", p.threads, "worker threads")->check(CLI::PositiveNumber);
        sub->add_option("--out", p.out, "output directory or file");
        for (const auto& key : cmd.keys) {
            if (key.name == "seed") continue;
            auto& slot = p.flags[std::string(key.name)];
            std::string help(key.help);
            if (!key.default_value.empty()) help += fmt::format(" [{}]", key.default_value);
            slot.first = sub->add_option(flag_name(key.name), slot.second, help);
        }
        subs.push_back(sub);
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    for (std::size_t i = 0; i < kCommands.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        const auto& cmd = kCommands[i];
        const auto& p = *parsed[i];
        try {
            Invocation inv{RunConfig(std::string(cmd.name), cmd.keys), p.threads, p.out};
            if (!p.config_file.empty()) {
                inv.config.merge_file(p.config_file);
            }
            for (const auto& [key, slot] : p.flags) {
                if (slot.first->count() > 0) {
                    inv.config.set(key, slot.second);
                }
            }
            if (p.seed) {
                inv.config.set("seed", *p.seed);
            }
            inv.config.get_uint("seed");
            log_config(inv);
            cmd.run(inv, out);
            out.flush();
            return 0;
        } catch (const std::exception& e) {
            err << "error: " << e.what() << '\n';
            return 1;
        }
    }
    return 1;
}

}  // namespace ulr::cli
