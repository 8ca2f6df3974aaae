// SPDX-License-Identifier: Apache-2.0
//
// Mechanistic suite: gradient-times-attention saliency maps, ground-to-symbol
// flow profiles, gather/aggregate head classification, zero-ablation
// interventions with seeded random-head controls, paired significance
// testing, and tuned-lens probes trained against the frozen output head.

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"
#include "stats.hpp"
#include "tensor.hpp"

namespace sg {

struct SaliencyMap {
    int positions = 0;
    // per layer: |sum_h A_h (.) dL/dA_h|, the sum taken before the absolute value
    std::vector<std::vector<double>> layer;
    // per (layer, head): |A (.) dL/dA|
    std::vector<std::vector<std::vector<double>>> head;
};

// Positions a context carries for the flow analysis: the FILLER slot and the
// final prompt token (the position the target is predicted from).
struct ContextInfo {
    int filler_pos = -1;
    int final_pos = -1;
};

struct EvalContext {
    std::vector<int> tokens;
    int target = -1;
    ContextInfo info;
};

// Forward with attention capture, cross-entropy loss on the target at the
// final position, backward, then per-head and per-layer saliency. Transformer
// only. head_mask, when set, zeroes those heads' outputs during the pass.
template <typename T>
SaliencyMap saliency(const Model<T> &model, std::span<const int> context, int target,
                     const HeadMask *head_mask = nullptr) {
    if (model.config().arch == Arch::kLstm) {
        throw std::invalid_argument("saliency: LSTM has no attention matrices");
    }
    const int L = model.config().layers, NH = model.config().heads;
    const int S = static_cast<int>(context.size());
    if (target < 0 || target >= model.config().vocab) {
        throw std::invalid_argument("saliency: target id out of vocab range");
    }

    Graph<T> g;
    std::vector<std::vector<int>> batch{std::vector<int>(context.begin(), context.end())};
    TapeRefs refs = model.build_tape(g, batch, /*pad_id=*/-1, /*with_loss=*/false,
                                     /*capture_attention=*/true, head_mask);
    std::vector<int> targets(static_cast<size_t>(S), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(S), 0);
    targets.back() = target;
    mask.back() = 1;
    NodeId loss = g.cross_entropy(refs.logits, std::move(targets), std::move(mask));
    g.backward(loss);

    SaliencyMap map;
    map.positions = S;
    map.layer.assign(static_cast<size_t>(L),
                     std::vector<double>(static_cast<size_t>(S) * S, 0.0));
    map.head.assign(static_cast<size_t>(L),
                    std::vector<std::vector<double>>(static_cast<size_t>(NH)));

    for (const GradCapture<T> &cap : g.captures()) {
        std::vector<double> &lmap = map.layer[static_cast<size_t>(cap.layer)];
        std::vector<double> hmap(static_cast<size_t>(S) * S, 0.0);
        for (size_t i = 0; i < cap.value.size(); ++i) {
            const double prod =
                static_cast<double>(cap.value[i]) * static_cast<double>(cap.gradient[i]);
            hmap[i] = std::fabs(prod);
            lmap[i] += prod;  // abs applied after the head sum
        }
        map.head[static_cast<size_t>(cap.layer)][static_cast<size_t>(cap.head)] = std::move(hmap);
    }
    for (auto &lmap : map.layer) {
        for (double &v : lmap) v = std::fabs(v);
    }
    return map;
}

// Per-layer ground-to-symbol score: the layer map entry at
// (query = final prompt position, key = FILLER position), averaged over
// contexts.
std::vector<double> flow_profile(std::span<const SaliencyMap> maps,
                                 std::span<const ContextInfo> infos);

struct HeadClassification {
    std::vector<HeadId> gather;
    std::vector<HeadId> aggregate;
    std::vector<double> gather_ratio;     // [layer * heads + head]
    std::vector<double> aggregate_ratio;  // same indexing
};

// Gather: fraction of a head's total saliency directed into the FILLER
// position from earlier keys. Aggregate: fraction on the (final prompt,
// FILLER) cell. A head joins a class when its ratio reaches the threshold;
// zero-saliency heads get ratio 0.
HeadClassification classify_heads(const SaliencyMap &map, const ContextInfo &info,
                                  double gather_thresh = 0.30, double aggregate_thresh = 0.30);

struct InterventionResult {
    std::vector<double> original;    // per context
    std::vector<double> intervened;
    std::vector<double> control;
    double avg_head_count = 0.0;
    double avg_layer = std::numeric_limits<double>::quiet_NaN();
    double mean_original = 0.0;
    double mean_intervened = 0.0;
    double mean_control = 0.0;
    PairedTestResult test;  // one-sided: intervened > control
};

// Zero-ablates each context's identified heads and, per layer, an equal
// number of seeded random non-identified heads. A layer with every head
// identified leaves no control candidates and is an error naming the layer.
InterventionResult intervene(const Model<float> &model, std::span<const EvalContext> contexts,
                             std::span<const std::vector<HeadId>> head_sets,
                             uint64_t control_seed);

// One-sided Wilcoxon signed-rank on per-context (intervened - control).
inline PairedTestResult paired_test(std::span<const double> deltas) {
    return wilcoxon_signed_rank(deltas);
}

// Per-layer affine probes into the frozen output head.
struct LensProbe {
    int hidden = 0;
    std::vector<std::vector<float>> w;  // [layer] hidden x hidden
    std::vector<std::vector<float>> b;  // [layer] hidden
    std::vector<double> final_kl;       // per layer, on the fit sample
    std::vector<uint8_t> converged;     // warning flag when 0
};

struct LensFitOptions {
    int steps = 2000;
    double lr = 1e-3;
    int batch = 32;
    int max_positions = 1024;
    uint64_t seed = 0;
};

// Fits the probes by gradient descent on KL(model final distribution ||
// probe distribution) over held-out positions; model weights and the output
// head stay frozen. Identity/zero initialization.
LensProbe tuned_lens_fit(const Model<float> &model, std::span<const CorpusChunk> heldout,
                         int pad_id, const LensFitOptions &opt = {});

// Surprisal of target at the final position under each layer's probe.
std::vector<double> lens_layer_surprisals(const Model<float> &model, const LensProbe &probe,
                                          std::span<const int> context, int target);

}  // namespace sg
