#pragma once

// Synthetic corpus for the composition experiment: sentences are concatenations of 2-4
// multi-token phrase units over a ~200 word vocabulary.

#include <algorithm>
#include <string>
#include <vector>

#include "ulr/corpus.hpp"
#include "ulr/evaluation.hpp"
#include "ulr/random.hpp"

namespace world {

struct PhraseWorld {
    std::vector<std::vector<std::string>> units;
    std::vector<std::string> train;
    std::vector<std::string> held_out;
};

inline std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        out += (out.empty() ? "" : " ") + w;
    }
    return out;
}

inline std::string unit_text(const PhraseWorld& w, std::size_t u) { return join(w.units[u]); }

/// `vocab` words w0..w{vocab-1} are dealt into units of 2 or 3 words, each word used once.
inline PhraseWorld make_world(std::size_t vocab, std::size_t sentences, std::size_t held_out, std::uint64_t seed) {
    ulr::Rng rng(seed);
    std::vector<std::string> words;
    for (std::size_t i = 0; i < vocab; ++i) {
        words.push_back("w" + std::to_string(i));
    }
    rng.shuffle(words.begin(), words.end());
    PhraseWorld w;
    for (std::size_t i = 0; i + 2 <= words.size();) {
        const std::size_t len = (words.size() - i >= 5 && rng.below(2)) ? 3 : 2;
        w.units.emplace_back(words.begin() + static_cast<std::ptrdiff_t>(i),
                             words.begin() + static_cast<std::ptrdiff_t>(i + len));
        i += len;
    }
    for (std::size_t s = 0; s < sentences; ++s) {
        const auto count = 2 + rng.below(3);
        std::vector<std::size_t> picked;
        while (picked.size() < count) {
            const auto u = rng.below(w.units.size());
            if (std::find(picked.begin(), picked.end(), u) == picked.end()) picked.push_back(u);
        }
        std::string text;
        for (auto u : picked) text += (text.empty() ? "" : " ") + unit_text(w, u);
        (s < sentences - held_out ? w.train : w.held_out).push_back(std::move(text));
    }
    return w;
}

/// "U1 U2" : "U1 U3" :: "U4 U2" : "U4 U3". Distractors keep one correct unit: two of the
/// form "U4 Ux" and two of the form "Uy U3".
inline std::vector<ulr::AnalogyQuestion> make_analogies(const PhraseWorld& w, std::size_t count, std::uint64_t seed) {
    ulr::Rng rng(seed);
    const auto n = w.units.size();
    std::vector<ulr::AnalogyQuestion> out;
    while (out.size() < count) {
        std::vector<std::size_t> u;
        while (u.size() < 8) {
            const auto x = rng.below(n);
            if (std::find(u.begin(), u.end(), x) == u.end()) u.push_back(x);
        }
        const auto pair = [&](std::size_t x, std::size_t y) { return unit_text(w, x) + " " + unit_text(w, y); };
        ulr::AnalogyQuestion q;
        q.category = "composition";
        q.a = pair(u[0], u[1]);
        q.b = pair(u[0], u[2]);
        q.c = pair(u[3], u[1]);
        std::vector<std::string> cands{pair(u[3], u[2]), pair(u[3], u[4]), pair(u[3], u[5]), pair(u[6], u[2]),
                                       pair(u[7], u[2])};
        std::vector<std::size_t> perm{0, 1, 2, 3, 4};
        rng.shuffle(perm.begin(), perm.end());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            q.candidates.push_back(cands[perm[i]]);
            if (perm[i] == 0) q.answer_index = i;
        }
        out.push_back(std::move(q));
    }
    return out;
}

}  // namespace world
