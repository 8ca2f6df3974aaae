// SPDX-License-Identifier: Apache-2.0
#include "eval.hpp"

#include <algorithm>
#include <cmath>

#include "checkpoint.hpp"
#include "rng.hpp"

namespace sg {

int EvalSet::word_index(const std::string &w) const {
    auto it = std::find(words.begin(), words.end(), w);
    if (it == words.end()) {
        throw std::invalid_argument("eval set: word '" + w + "' is not a target");
    }
    return static_cast<int>(it - words.begin());
}

std::vector<int> EvalSet::mismatch_indices(int v, int n) const {
    std::vector<int> pool;
    pool.reserve(words.size() - 1);
    for (int u = 0; u < static_cast<int>(words.size()); ++u) {
        if (u != v) pool.push_back(u);
    }
    const int m = mismatch_pool_size();
    if (mismatch_samples <= 0 || m >= static_cast<int>(pool.size())) {
        return pool;
    }
    // Seeded per (word, template) so the draw is stable under parallel order.
    uint64_t mix = sample_seed;
    mix ^= 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(v) * 0x8000000080000001ULL +
           static_cast<uint64_t>(n);
    Rng rng(mix);
    rng.shuffle(pool);
    pool.resize(static_cast<size_t>(m));
    std::sort(pool.begin(), pool.end());
    return pool;
}

void EvalSet::validate(const DualVocab &vocab) const {
    if (words.size() < 2) throw std::invalid_argument("eval set: need at least 2 words");
    if (templates.size() != words.size())
        throw std::invalid_argument("eval set: template list does not match word list");
    const size_t n = templates[0].size();
    for (size_t v = 0; v < words.size(); ++v) {
        if (!vocab.has_word(words[v]))
            throw std::invalid_argument("eval set: word '" + words[v] + "' lacks vocabulary forms");
        if (templates[v].size() != n || n == 0)
            throw std::invalid_argument("eval set: uneven template counts");
        for (const ContextTemplate &t : templates[v]) {
            if (t.target != words[v])
                throw std::invalid_argument("eval set: template target '" + t.target +
                                            "' does not match word '" + words[v] + "'");
        }
    }
}

EvalSet EvalSet::build(std::span<const std::string> words, std::span<const ContextTemplate> frames,
                       const DualVocab &vocab, int n_per_word) {
    if (n_per_word < 1) throw std::invalid_argument("eval set: need at least one template");
    EvalSet set;
    set.words.assign(words.begin(), words.end());
    set.templates.resize(words.size());
    for (size_t v = 0; v < words.size(); ++v) {
        std::vector<ContextTemplate> mine;
        for (const ContextTemplate &f : frames) {
            if (f.target == "*" || f.target == words[v]) {
                ContextTemplate t = f;
                t.target = words[v];
                mine.push_back(std::move(t));
            }
        }
        if (static_cast<int>(mine.size()) < n_per_word) {
            throw std::invalid_argument("eval set: only " + std::to_string(mine.size()) +
                                        " templates available for '" + set.words[v] + "'");
        }
        mine.resize(static_cast<size_t>(n_per_word));
        for (int n = 0; n < n_per_word; ++n) mine[static_cast<size_t>(n)].template_id = n;
        set.templates[v] = std::move(mine);
    }
    set.validate(vocab);
    return set;
}

double surprisal(const Scorer &scorer, std::span<const int> context, int target) {
    return -scorer(context, target);
}

namespace {

// Surprisals for one (word, template): the match context and each mismatch.
struct CellResult {
    double match = 0.0;
    std::vector<double> mismatch;
};

CellResult eval_cell(const Scorer &scorer, const EvalSet &set, const DualVocab &vocab, int v,
                     int n) {
    const ContextTemplate &tmpl = set.templates[static_cast<size_t>(v)][static_cast<size_t>(n)];
    const int target_lan = vocab.entry(set.words[static_cast<size_t>(v)]).lan_id;

    CellResult r;
    std::vector<int> ctx = instantiate(tmpl, set.words[static_cast<size_t>(v)], vocab);
    r.match = surprisal(scorer, ctx, target_lan);
    const int fpos = tmpl.filler_pos();
    for (int u : set.mismatch_indices(v, n)) {
        ctx[static_cast<size_t>(fpos)] = vocab.entry(set.words[static_cast<size_t>(u)]).env_id;
        r.mismatch.push_back(surprisal(scorer, ctx, target_lan));
    }
    return r;
}

}  // namespace

double grounding_gain(const Scorer &scorer, const EvalSet &set, const DualVocab &vocab,
                      const std::string &word) {
    const int v = set.word_index(word);
    const int n_templates = set.n_templates();
    if (n_templates == 0 || set.mismatch_pool_size() == 0) {
        throw std::invalid_argument("grounding_gain: empty template or mismatch pool");
    }
    double outer = 0.0;
    for (int n = 0; n < n_templates; ++n) {
        CellResult cell = eval_cell(scorer, set, vocab, v, n);
        double inner = 0.0;
        for (double mis : cell.mismatch) inner += mis - cell.match;
        outer += inner / static_cast<double>(cell.mismatch.size());
    }
    return outer / static_cast<double>(n_templates);
}

CheckpointEval evaluate_model(const Scorer &scorer, const EvalSet &set, const DualVocab &vocab,
                              uint64_t step) {
    const int V = static_cast<int>(set.words.size());
    const int N = set.n_templates();
    if (V < 2 || N == 0) throw std::invalid_argument("evaluate_model: degenerate eval set");

    std::vector<std::vector<CellResult>> cells(static_cast<size_t>(V));
    for (auto &c : cells) c.resize(static_cast<size_t>(N));

#pragma omp parallel for schedule(dynamic)
    for (int idx = 0; idx < V * N; ++idx) {
        const int v = idx / N;
        const int n = idx % N;
        cells[static_cast<size_t>(v)][static_cast<size_t>(n)] = eval_cell(scorer, set, vocab, v, n);
    }

    CheckpointEval out;
    out.step = step;
    double grid_match = 0.0, grid_mismatch = 0.0;
    long grid_cells = 0;
    for (int v = 0; v < V; ++v) {
        WordGain wg;
        wg.word = set.words[static_cast<size_t>(v)];
        double gain_acc = 0.0, match_acc = 0.0, mis_acc = 0.0;
        long mis_count = 0;
        for (int n = 0; n < N; ++n) {
            const CellResult &cell = cells[static_cast<size_t>(v)][static_cast<size_t>(n)];
            match_acc += cell.match;
            double inner = 0.0;
            for (double mis : cell.mismatch) {
                inner += mis - cell.match;
                mis_acc += mis;
            }
            mis_count += static_cast<long>(cell.mismatch.size());
            gain_acc += inner / static_cast<double>(cell.mismatch.size());

            grid_match += cell.match;
            for (double mis : cell.mismatch) grid_mismatch += mis;
            grid_cells += static_cast<long>(cell.mismatch.size());
        }
        wg.gain = gain_acc / static_cast<double>(N);
        wg.match_sps = match_acc / static_cast<double>(N);
        wg.mismatch_sps = mis_acc / static_cast<double>(mis_count);
        out.per_word.push_back(std::move(wg));
    }
    // Aligned-grid means: the match context of a (word, template) cell is
    // paired with each of its mismatch fillers.
    out.match_sps = grid_match / static_cast<double>(V * N);
    out.mismatch_sps = grid_mismatch / static_cast<double>(grid_cells);
    double g = 0.0;
    for (const WordGain &wg : out.per_word) g += wg.gain;
    out.gain = g / static_cast<double>(V);
    return out;
}

CooccurrenceFit cooccurrence_regression(std::span<const WordGain> per_word,
                                        const std::map<std::string, long> &cooc) {
    std::vector<double> x, y;
    for (const WordGain &wg : per_word) {
        auto it = cooc.find(wg.word);
        if (it == cooc.end()) {
            throw std::invalid_argument("cooccurrence_regression: no count for word '" + wg.word +
                                        "'");
        }
        if (!std::isfinite(wg.gain)) continue;
        x.push_back(std::log1p(static_cast<double>(it->second)));
        y.push_back(wg.gain);
    }
    if (x.size() < 3) {
        throw std::invalid_argument("cooccurrence_regression: need at least 3 finite words");
    }
    OlsFit fit;
    try {
        fit = ols_fit(x, y);
    } catch (const std::invalid_argument &e) {
        throw std::invalid_argument(std::string("cooccurrence_regression: degenerate: ") +
                                    e.what());
    }
    return CooccurrenceFit{fit.slope, fit.intercept, fit.r2, fit.degenerate};
}

GroundingReport trajectory(std::span<const std::string> checkpoint_paths, const EvalSet &set,
                           const DualVocab &vocab, const std::map<std::string, long> *cooc) {
    if (checkpoint_paths.empty()) {
        throw std::invalid_argument("trajectory: no checkpoints");
    }
    struct Loaded {
        CheckpointRecord rec;
    };
    std::vector<Loaded> loaded;
    loaded.reserve(checkpoint_paths.size());
    for (const std::string &p : checkpoint_paths) {
        loaded.push_back({load_checkpoint(p)});
    }
    const uint64_t fp = loaded.front().rec.fingerprint;
    for (const Loaded &l : loaded) {
        if (l.rec.fingerprint != fp) {
            throw IntegrityError("trajectory: checkpoints do not share one config fingerprint");
        }
    }
    std::sort(loaded.begin(), loaded.end(),
              [](const Loaded &a, const Loaded &b) { return a.rec.step < b.rec.step; });

    GroundingReport report;
    report.fingerprint = fp;
    for (const Loaded &l : loaded) {
        Model<float> model = model_from_checkpoint<float>(l.rec);
        Scorer scorer = make_model_scorer(model);
        CheckpointEval ev = evaluate_model(scorer, set, vocab, l.rec.step);
        if (cooc) {
            CooccurrenceFit fit = cooccurrence_regression(ev.per_word, *cooc);
            ev.r2 = fit.r2;
            ev.slope = fit.slope;
            ev.intercept = fit.intercept;
            ev.r2_degenerate = fit.degenerate;
        }
        report.checkpoints.push_back(std::move(ev));
    }
    return report;
}

}  // namespace sg
