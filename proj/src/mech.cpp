// SPDX-License-Identifier: Apache-2.0
#include "mech.hpp"

#include <algorithm>
#include <numeric>

#include "rng.hpp"

namespace sg {

std::vector<double> flow_profile(std::span<const SaliencyMap> maps,
                                 std::span<const ContextInfo> infos) {
    if (maps.empty() || maps.size() != infos.size()) {
        throw std::invalid_argument("flow_profile: maps and context metadata do not align");
    }
    const size_t L = maps[0].layer.size();
    std::vector<double> profile(L, 0.0);
    for (size_t c = 0; c < maps.size(); ++c) {
        const SaliencyMap &m = maps[c];
        const ContextInfo &info = infos[c];
        if (info.filler_pos < 0 || info.final_pos < 0 || info.filler_pos >= m.positions ||
            info.final_pos >= m.positions) {
            throw std::invalid_argument("flow_profile: position metadata missing for context " +
                                        std::to_string(c));
        }
        if (m.layer.size() != L) {
            throw std::invalid_argument("flow_profile: layer count mismatch across contexts");
        }
        const size_t cell = static_cast<size_t>(info.final_pos) * m.positions + info.filler_pos;
        for (size_t l = 0; l < L; ++l) {
            profile[l] += m.layer[l][cell];
        }
    }
    for (double &v : profile) v /= static_cast<double>(maps.size());
    return profile;
}

HeadClassification classify_heads(const SaliencyMap &map, const ContextInfo &info,
                                  double gather_thresh, double aggregate_thresh) {
    if (gather_thresh <= 0.0 || gather_thresh > 1.0 || aggregate_thresh <= 0.0 ||
        aggregate_thresh > 1.0) {
        throw std::invalid_argument("classify_heads: thresholds must lie in (0, 1]");
    }
    if (info.filler_pos < 0 || info.final_pos < 0 || info.filler_pos >= map.positions ||
        info.final_pos >= map.positions) {
        throw std::invalid_argument("classify_heads: position metadata missing");
    }
    const int L = static_cast<int>(map.head.size());
    const int NH = L > 0 ? static_cast<int>(map.head[0].size()) : 0;
    const int S = map.positions;
    const int f = info.filler_pos;
    const int p = info.final_pos;

    HeadClassification cls;
    cls.gather_ratio.assign(static_cast<size_t>(L) * NH, 0.0);
    cls.aggregate_ratio.assign(static_cast<size_t>(L) * NH, 0.0);
    for (int l = 0; l < L; ++l) {
        for (int h = 0; h < NH; ++h) {
            const std::vector<double> &hm =
                map.head[static_cast<size_t>(l)][static_cast<size_t>(h)];
            double total = 0.0;
            for (double v : hm) total += v;
            double gather_mass = 0.0;
            for (int k = 0; k < f; ++k) {
                gather_mass += hm[static_cast<size_t>(f) * S + k];
            }
            const double agg_mass = hm[static_cast<size_t>(p) * S + f];
            const size_t idx = static_cast<size_t>(l) * NH + h;
            if (total > 0.0) {
                cls.gather_ratio[idx] = gather_mass / total;
                cls.aggregate_ratio[idx] = agg_mass / total;
            }
            if (cls.gather_ratio[idx] >= gather_thresh) {
                cls.gather.push_back(HeadId{l, h});
            }
            if (cls.aggregate_ratio[idx] >= aggregate_thresh) {
                cls.aggregate.push_back(HeadId{l, h});
            }
        }
    }
    return cls;
}

InterventionResult intervene(const Model<float> &model, std::span<const EvalContext> contexts,
                             std::span<const std::vector<HeadId>> head_sets,
                             uint64_t control_seed) {
    if (contexts.size() != head_sets.size()) {
        throw std::invalid_argument("intervene: contexts and head sets do not align");
    }
    if (model.config().arch == Arch::kLstm) {
        throw std::invalid_argument("intervene: LSTM has no attention heads");
    }
    const int L = model.config().layers, NH = model.config().heads;

    InterventionResult res;
    Rng rng(control_seed);
    long head_total = 0;
    long layer_sum = 0;

    for (size_t c = 0; c < contexts.size(); ++c) {
        const EvalContext &ctx = contexts[c];
        const std::vector<HeadId> &identified = head_sets[c];

        const double orig = -model.next_token_logprob(ctx.tokens, ctx.target);
        double interv = orig;
        double ctrl = orig;
        if (!identified.empty()) {
            HeadMask imask = HeadMask::from(identified, L, NH);
            interv = -model.next_token_logprob(ctx.tokens, ctx.target, &imask);

            // Control: per layer, the same number of uniformly random heads
            // drawn from those not identified in that layer.
            HeadMask cmask(L, NH);
            for (int l = 0; l < L; ++l) {
                const int want = imask.count_in_layer(l);
                if (want == 0) continue;
                std::vector<int> eligible;
                for (int h = 0; h < NH; ++h) {
                    if (!imask.test(l, h)) eligible.push_back(h);
                }
                if (static_cast<int>(eligible.size()) < want) {
                    throw std::runtime_error(
                        "intervene: layer " + std::to_string(l) +
                        " has every head identified; no control candidates remain");
                }
                for (int k = 0; k < want; ++k) {
                    const size_t pick = static_cast<size_t>(rng.below(eligible.size()));
                    cmask.set(HeadId{l, eligible[pick]});
                    eligible.erase(eligible.begin() + static_cast<long>(pick));
                }
            }
            ctrl = -model.next_token_logprob(ctx.tokens, ctx.target, &cmask);
        }

        res.original.push_back(orig);
        res.intervened.push_back(interv);
        res.control.push_back(ctrl);
        head_total += static_cast<long>(identified.size());
        for (const HeadId &h : identified) layer_sum += h.layer;
    }

    const double n = static_cast<double>(contexts.size());
    res.avg_head_count = static_cast<double>(head_total) / n;
    if (head_total > 0) {
        res.avg_layer = static_cast<double>(layer_sum) / static_cast<double>(head_total);
    }
    res.mean_original = std::accumulate(res.original.begin(), res.original.end(), 0.0) / n;
    res.mean_intervened = std::accumulate(res.intervened.begin(), res.intervened.end(), 0.0) / n;
    res.mean_control = std::accumulate(res.control.begin(), res.control.end(), 0.0) / n;

    std::vector<double> deltas(contexts.size());
    for (size_t c = 0; c < contexts.size(); ++c) {
        deltas[c] = res.intervened[c] - res.control[c];
    }
    if (deltas.size() >= 6) {
        res.test = paired_test(deltas);
    } else {
        res.test.p_value = std::numeric_limits<double>::quiet_NaN();
        res.test.t_p_value = std::numeric_limits<double>::quiet_NaN();
    }
    return res;
}

// --- tuned lens ---------------------------------------------------------------

namespace {

// Hidden states and the model's final next-token distribution at sampled
// non-pad positions of held-out chunks.
struct LensSample {
    int n_positions = 0;
    std::vector<std::vector<float>> hidden;  // [layer] n x H
    std::vector<float> probs;                // n x V
    std::vector<double> entropy;             // per position, H(p)
};

LensSample collect_lens_sample(const Model<float> &model, std::span<const CorpusChunk> heldout,
                               int pad_id, int max_positions) {
    const int L = model.config().layers;
    const int H = model.config().hidden;
    const int V = model.config().vocab;

    LensSample s;
    s.hidden.assign(static_cast<size_t>(L), {});

    for (const CorpusChunk &chunk : heldout) {
        if (s.n_positions >= max_positions) break;
        ForwardOptions<float> opt;
        opt.want_hidden = true;
        ForwardResult<float> r = model.forward(chunk.tokens, opt);
        const int S = r.positions;
        for (int t = 0; t < S && s.n_positions < max_positions; ++t) {
            if (chunk.tokens[static_cast<size_t>(t)] == pad_id) continue;
            for (int l = 0; l < L; ++l) {
                const float *hr = r.hidden[static_cast<size_t>(l)].data() +
                                  static_cast<size_t>(t) * H;
                s.hidden[static_cast<size_t>(l)].insert(s.hidden[static_cast<size_t>(l)].end(),
                                                        hr, hr + H);
            }
            const float *row = r.logits.data() + static_cast<size_t>(t) * V;
            double maxv = row[0];
            for (int j = 1; j < V; ++j) maxv = std::max(maxv, static_cast<double>(row[j]));
            double sum = 0.0;
            std::vector<double> e(static_cast<size_t>(V));
            for (int j = 0; j < V; ++j) {
                e[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - maxv);
                sum += e[static_cast<size_t>(j)];
            }
            double ent = 0.0;
            for (int j = 0; j < V; ++j) {
                const double p = e[static_cast<size_t>(j)] / sum;
                s.probs.push_back(static_cast<float>(p));
                if (p > 0.0) ent -= p * std::log(p);
            }
            s.entropy.push_back(ent);
            ++s.n_positions;
        }
    }
    if (s.n_positions == 0) {
        throw std::invalid_argument("tuned_lens_fit: held-out chunks yield no usable positions");
    }
    return s;
}

}  // namespace

LensProbe tuned_lens_fit(const Model<float> &model, std::span<const CorpusChunk> heldout,
                         int pad_id, const LensFitOptions &opt) {
    if (model.config().arch != Arch::kTransformer) {
        throw std::invalid_argument("tuned_lens_fit: requires a Transformer checkpoint");
    }
    const int L = model.config().layers;
    const int H = model.config().hidden;
    const int V = model.config().vocab;

    LensSample sample = collect_lens_sample(model, heldout, pad_id, opt.max_positions);

    LensProbe probe;
    probe.hidden = H;
    probe.w.assign(static_cast<size_t>(L), std::vector<float>(static_cast<size_t>(H) * H, 0.0f));
    probe.b.assign(static_cast<size_t>(L), std::vector<float>(static_cast<size_t>(H), 0.0f));
    probe.final_kl.assign(static_cast<size_t>(L), 0.0);
    probe.converged.assign(static_cast<size_t>(L), 1);
    for (int l = 0; l < L; ++l) {
        for (int j = 0; j < H; ++j) {
            probe.w[static_cast<size_t>(l)][static_cast<size_t>(j) * H + j] = 1.0f;
        }
    }

    const auto &lnf_g = model.params()[static_cast<size_t>(model.lnf_gain_index())].w;
    const auto &lnf_b = model.params()[static_cast<size_t>(model.lnf_bias_index())].w;
    const auto &unb_w = model.params()[static_cast<size_t>(model.unembed_w_index())].w;
    const auto &unb_b = model.params()[static_cast<size_t>(model.unembed_b_index())].w;

    const int batch = std::min(opt.batch, sample.n_positions);

    // Mean soft cross entropy of a probe on a position subset; the frozen
    // output head is applied on top of the affine map.
    auto probe_loss_graph = [&](Graph<float> &g, int layer, std::span<const int> rows, NodeId &w_leaf,
                                NodeId &b_leaf) {
        const int n = static_cast<int>(rows.size());
        std::vector<float> hbuf(static_cast<size_t>(n) * H);
        std::vector<float> pbuf(static_cast<size_t>(n) * V);
        for (int i = 0; i < n; ++i) {
            const float *hr = sample.hidden[static_cast<size_t>(layer)].data() +
                              static_cast<size_t>(rows[static_cast<size_t>(i)]) * H;
            std::copy(hr, hr + H, hbuf.begin() + static_cast<size_t>(i) * H);
            const float *pr = sample.probs.data() +
                              static_cast<size_t>(rows[static_cast<size_t>(i)]) * V;
            std::copy(pr, pr + V, pbuf.begin() + static_cast<size_t>(i) * V);
        }
        NodeId h = g.constant(n, H, std::move(hbuf));
        NodeId p = g.constant(n, V, std::move(pbuf));
        w_leaf = g.leaf(H, H, probe.w[static_cast<size_t>(layer)].data(), true);
        b_leaf = g.leaf(1, H, probe.b[static_cast<size_t>(layer)].data(), true);
        NodeId gml = g.leaf(1, H, lnf_g.data(), false);
        NodeId bml = g.leaf(1, H, lnf_b.data(), false);
        NodeId wul = g.leaf(H, V, unb_w.data(), false);
        NodeId bul = g.leaf(1, V, unb_b.data(), false);
        NodeId mapped = g.add_bias(g.matmul(h, w_leaf), b_leaf);
        NodeId logits = g.add_bias(g.matmul(g.layer_norm(mapped, gml, bml), wul), bul);
        return g.soft_cross_entropy(logits, p);
    };

    std::vector<int> all_rows(static_cast<size_t>(sample.n_positions));
    std::iota(all_rows.begin(), all_rows.end(), 0);

    for (int l = 0; l < L; ++l) {
        Rng rng(opt.seed + static_cast<uint64_t>(l) * 0x9e3779b97f4a7c15ULL);
        std::vector<float> m1w(probe.w[0].size(), 0.0f), m2w(probe.w[0].size(), 0.0f);
        std::vector<float> m1b(probe.b[0].size(), 0.0f), m2b(probe.b[0].size(), 0.0f);
        double first_loss = -1.0, best_loss = -1.0;

        for (int step = 1; step <= opt.steps; ++step) {
            std::vector<int> rows(static_cast<size_t>(batch));
            for (int i = 0; i < batch; ++i) {
                rows[static_cast<size_t>(i)] =
                    static_cast<int>(rng.below(static_cast<uint64_t>(sample.n_positions)));
            }
            Graph<float> g;
            NodeId w_leaf = -1, b_leaf = -1;
            NodeId loss = probe_loss_graph(g, l, rows, w_leaf, b_leaf);
            const double cur = static_cast<double>(g.value(loss)[0]);
            if (first_loss < 0.0) first_loss = cur;
            if (best_loss < 0.0 || cur < best_loss) best_loss = cur;
            g.backward(loss);

            auto adam = [&](std::vector<float> &wv, std::span<const float> grad,
                            std::vector<float> &m1, std::vector<float> &m2) {
                const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                const double bc1 = 1.0 - std::pow(b1, step);
                const double bc2 = 1.0 - std::pow(b2, step);
                for (size_t j = 0; j < wv.size(); ++j) {
                    const double gv = grad[j];
                    const double nm1 = b1 * m1[j] + (1.0 - b1) * gv;
                    const double nm2 = b2 * m2[j] + (1.0 - b2) * gv * gv;
                    m1[j] = static_cast<float>(nm1);
                    m2[j] = static_cast<float>(nm2);
                    wv[j] = static_cast<float>(wv[j] -
                                               opt.lr * (nm1 / bc1) / (std::sqrt(nm2 / bc2) + eps));
                }
            };
            adam(probe.w[static_cast<size_t>(l)], g.grad(w_leaf), m1w, m2w);
            adam(probe.b[static_cast<size_t>(l)], g.grad(b_leaf), m1b, m2b);
        }

        // Final full-sample loss; cross entropy minus target entropy is the KL.
        {
            Graph<float> g;
            NodeId w_leaf = -1, b_leaf = -1;
            NodeId loss = probe_loss_graph(g, l, all_rows, w_leaf, b_leaf);
            const double ce = static_cast<double>(g.value(loss)[0]);
            double mean_entropy = 0.0;
            for (double e : sample.entropy) mean_entropy += e;
            mean_entropy /= static_cast<double>(sample.n_positions);
            probe.final_kl[static_cast<size_t>(l)] = ce - mean_entropy;
            if (first_loss >= 0.0 && best_loss > first_loss - 1e-12 && l + 1 < L) {
                probe.converged[static_cast<size_t>(l)] = 0;  // loss never decreased
            }
        }
    }
    return probe;
}

std::vector<double> lens_layer_surprisals(const Model<float> &model, const LensProbe &probe,
                                          std::span<const int> context, int target) {
    if (model.config().arch != Arch::kTransformer) {
        throw std::invalid_argument("lens_layer_surprisals: requires a Transformer");
    }
    const int L = model.config().layers;
    const int H = model.config().hidden;
    const int V = model.config().vocab;
    if (static_cast<int>(probe.w.size()) != L || probe.hidden != H) {
        throw std::invalid_argument("lens_layer_surprisals: probe does not match model");
    }
    if (target < 0 || target >= V) {
        throw std::invalid_argument("lens_layer_surprisals: target id out of vocab range");
    }

    ForwardOptions<float> opt;
    opt.want_hidden = true;
    ForwardResult<float> r = model.forward(context, opt);
    const int last = r.positions - 1;

    const auto &lnf_g = model.params()[static_cast<size_t>(model.lnf_gain_index())].w;
    const auto &lnf_b = model.params()[static_cast<size_t>(model.lnf_bias_index())].w;
    const auto &unb_w = model.params()[static_cast<size_t>(model.unembed_w_index())].w;
    const auto &unb_b = model.params()[static_cast<size_t>(model.unembed_b_index())].w;

    std::vector<double> out(static_cast<size_t>(L), 0.0);
    std::vector<double> mapped(static_cast<size_t>(H));
    std::vector<double> logits(static_cast<size_t>(V));
    for (int l = 0; l < L; ++l) {
        const float *h = r.hidden[static_cast<size_t>(l)].data() + static_cast<size_t>(last) * H;
        const auto &w = probe.w[static_cast<size_t>(l)];
        const auto &b = probe.b[static_cast<size_t>(l)];
        for (int j = 0; j < H; ++j) mapped[static_cast<size_t>(j)] = b[static_cast<size_t>(j)];
        for (int k = 0; k < H; ++k) {
            const double hv = h[k];
            const float *wr = w.data() + static_cast<size_t>(k) * H;
            for (int j = 0; j < H; ++j) mapped[static_cast<size_t>(j)] += hv * wr[j];
        }
        double mean = 0.0;
        for (double v : mapped) mean += v;
        mean /= H;
        double var = 0.0;
        for (double v : mapped) var += (v - mean) * (v - mean);
        var /= H;
        const double rstd = 1.0 / std::sqrt(var + 1e-5);
        for (int j = 0; j < V; ++j) logits[static_cast<size_t>(j)] = unb_b[static_cast<size_t>(j)];
        for (int k = 0; k < H; ++k) {
            const double nv = (mapped[static_cast<size_t>(k)] - mean) * rstd *
                                  lnf_g[static_cast<size_t>(k)] +
                              lnf_b[static_cast<size_t>(k)];
            const float *wr = unb_w.data() + static_cast<size_t>(k) * V;
            for (int j = 0; j < V; ++j) logits[static_cast<size_t>(j)] += nv * wr[j];
        }
        double maxv = logits[0];
        for (int j = 1; j < V; ++j) maxv = std::max(maxv, logits[static_cast<size_t>(j)]);
        double sum = 0.0;
        for (int j = 0; j < V; ++j) sum += std::exp(logits[static_cast<size_t>(j)] - maxv);
        out[static_cast<size_t>(l)] = -(logits[static_cast<size_t>(target)] - maxv - std::log(sum));
    }
    return out;
}

}  // namespace sg
