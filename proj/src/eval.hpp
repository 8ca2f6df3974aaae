// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "stats.hpp"

namespace sg {

// log P(target | context); the grounding metrics are generic over this so
// constructed models can stand in for trained ones.
using Scorer = std::function<double(std::span<const int>, int)>;

template <typename T>
Scorer make_model_scorer(const Model<T> &model, const HeadMask *mask = nullptr) {
    return [&model, mask](std::span<const int> ctx, int target) {
        return model.next_token_logprob(ctx, target, mask);
    };
}

// Target words with N templates each; the mismatch pool for a target is all
// other words (full grid) unless mismatch_samples > 0 selects a seeded
// fixed-size sample per (word, template).
struct EvalSet {
    std::vector<std::string> words;
    std::vector<std::vector<ContextTemplate>> templates;  // [word][n], same N per word
    int mismatch_samples = 0;
    uint64_t sample_seed = 0;

    int n_templates() const { return templates.empty() ? 0 : static_cast<int>(templates[0].size()); }
    int mismatch_pool_size() const {
        const int m_full = static_cast<int>(words.size()) - 1;
        return mismatch_samples > 0 ? std::min(mismatch_samples, m_full) : m_full;
    }
    int word_index(const std::string &w) const;
    // Mismatch fillers for (word v, template n), in fixed grid order.
    std::vector<int> mismatch_indices(int v, int n) const;
    void validate(const DualVocab &vocab) const;

    // Materializes per-word templates from frames. A frame whose target is
    // "*" applies to every word; concrete templates apply to their own word.
    static EvalSet build(std::span<const std::string> words,
                         std::span<const ContextTemplate> frames, const DualVocab &vocab,
                         int n_per_word);
};

// s(w | c) = -log P(w | c), in nats.
double surprisal(const Scorer &scorer, std::span<const int> context, int target);

// Grounding information gain for one word: the double mean over templates
// and mismatch fillers of the surprisal difference between mismatched and
// matched contexts.
double grounding_gain(const Scorer &scorer, const EvalSet &set, const DualVocab &vocab,
                      const std::string &word);

struct WordGain {
    std::string word;
    double gain = 0.0;
    double match_sps = 0.0;     // mean over templates
    double mismatch_sps = 0.0;  // mean over (template, filler)
};

struct CheckpointEval {
    uint64_t step = 0;
    double match_sps = 0.0;     // mean over the aligned (word, template, filler) grid
    double mismatch_sps = 0.0;
    double gain = 0.0;          // mean over words of G(v); equals mismatch_sps - match_sps
    double r2 = std::numeric_limits<double>::quiet_NaN();
    double slope = 0.0;
    double intercept = 0.0;
    bool r2_degenerate = false;
    std::vector<WordGain> per_word;
};

struct GroundingReport {
    uint64_t fingerprint = 0;
    std::vector<CheckpointEval> checkpoints;  // ascending step order
};

// Full-grid evaluation of one model; contexts are scored in parallel and
// reduced in fixed grid order.
CheckpointEval evaluate_model(const Scorer &scorer, const EvalSet &set, const DualVocab &vocab,
                              uint64_t step);

struct CooccurrenceFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
    bool degenerate = false;
};

// OLS of per-word gain on log(1 + chunk co-occurrence count).
CooccurrenceFit cooccurrence_regression(std::span<const WordGain> per_word,
                                        const std::map<std::string, long> &cooc);

// Evaluates every checkpoint (all must share one fingerprint; output is
// sorted by step) and attaches the co-occurrence regression when a table is
// provided.
GroundingReport trajectory(std::span<const std::string> checkpoint_paths, const EvalSet &set,
                           const DualVocab &vocab,
                           const std::map<std::string, long> *cooc = nullptr);

}  // namespace sg
