// SPDX-License-Identifier: Apache-2.0
//
// The two architectures under study behind one autoregressive-LM interface:
// a GPT-style pre-LN decoder Transformer with attention recording and
// per-head output masking, and a unidirectional LSTM without residual
// connections. Each model offers two forward routes that are cross-checked
// in tests: a plain buffer implementation for scoring, and a tape builder
// for training and attention-gradient capture.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace sg {

enum class Arch : uint8_t { kTransformer, kLstm };

struct ModelConfig {
    Arch arch = Arch::kTransformer;
    int layers = 4;
    int heads = 4;
    int hidden = 128;
    int vocab = 0;
    int max_len = 512;
    uint64_t seed = 42;

    void validate() const {
        if (layers < 1) throw std::invalid_argument("model config: layers must be >= 1");
        if (hidden < 1 || vocab < 1 || max_len < 1)
            throw std::invalid_argument("model config: non-positive dimension");
        if (arch == Arch::kTransformer && (heads < 1 || hidden % heads != 0))
            throw std::invalid_argument("model config: hidden must be divisible by heads");
    }

    int head_dim() const { return hidden / heads; }
};

struct HeadId {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadId &) const = default;
};

// Per-(layer, head) mask of heads whose output is zeroed at inference.
class HeadMask {
public:
    HeadMask() = default;
    HeadMask(int layers, int heads) : layers_(layers), heads_(heads) {
        on_.assign(static_cast<size_t>(layers) * heads, 0);
    }
    static HeadMask from(std::span<const HeadId> ids, int layers, int heads) {
        HeadMask m(layers, heads);
        for (const HeadId &h : ids) m.set(h);
        return m;
    }
    void set(HeadId h) { on_.at(idx(h)) = 1; }
    bool test(int layer, int head) const {
        if (on_.empty()) return false;
        return on_[static_cast<size_t>(layer) * heads_ + head] != 0;
    }
    bool empty() const {
        for (uint8_t b : on_)
            if (b) return false;
        return true;
    }
    int count_in_layer(int layer) const {
        int c = 0;
        for (int h = 0; h < heads_; ++h) c += test(layer, h) ? 1 : 0;
        return c;
    }

private:
    size_t idx(HeadId h) const {
        if (h.layer < 0 || h.layer >= layers_ || h.head < 0 || h.head >= heads_)
            throw std::out_of_range("head mask: head id out of range");
        return static_cast<size_t>(h.layer) * heads_ + h.head;
    }
    int layers_ = 0;
    int heads_ = 0;
    std::vector<uint8_t> on_;
};

enum class ParamKind : uint8_t { kWeight, kBias, kGain };

template <typename T>
struct Param {
    std::string name;
    int rows = 0;
    int cols = 0;
    ParamKind kind = ParamKind::kWeight;
    std::vector<T> w;
};

template <typename T>
struct ForwardOptions {
    bool record_attention = false;
    bool want_hidden = false;
    bool last_logits_only = false;
    const HeadMask *head_mask = nullptr;
};

template <typename T>
struct ForwardResult {
    int positions = 0;
    std::vector<T> logits;                            // [positions x vocab] or [1 x vocab]
    std::vector<std::vector<T>> hidden;               // per layer [positions x hidden]
    std::vector<std::vector<std::vector<T>>> attention;  // [layer][head] -> positions^2
};

// Tape handles returned by the graph builders; node ids stay valid for the
// lifetime of the graph they were built on.
struct TapeRefs {
    NodeId logits = -1;
    NodeId loss = -1;
    std::vector<NodeId> hidden;                      // per layer (transformer)
    std::vector<std::vector<NodeId>> attention;      // [layer][head] (batch size 1)
    std::vector<std::pair<int, NodeId>> param_leaves;  // param index -> leaf
};

template <typename T>
class Model {
public:
    static Model random_init(const ModelConfig &cfg) {
        cfg.validate();
        Model m(cfg);
        Rng rng(cfg.seed);
        for (auto &p : m.params_) {
            switch (p.kind) {
                case ParamKind::kWeight:
                    for (auto &v : p.w) v = static_cast<T>(rng.normal(0.0, 0.02));
                    break;
                case ParamKind::kBias:
                    break;  // zeros
                case ParamKind::kGain:
                    for (auto &v : p.w) v = T(1);
                    break;
            }
        }
        return m;
    }

    // Construct with zeroed weights; used by checkpoint loading.
    static Model zeros(const ModelConfig &cfg) {
        cfg.validate();
        return Model(cfg);
    }

    const ModelConfig &config() const { return cfg_; }
    std::vector<Param<T>> &params() { return params_; }
    const std::vector<Param<T>> &params() const { return params_; }

    size_t param_count() const {
        size_t n = 0;
        for (const auto &p : params_) n += p.w.size();
        return n;
    }

    // --- plain forward (no tape) --------------------------------------------

    ForwardResult<T> forward(std::span<const int> tokens, const ForwardOptions<T> &opt) const {
        check_tokens(tokens);
        if (cfg_.arch == Arch::kLstm) {
            if (opt.head_mask && !opt.head_mask->empty())
                throw std::invalid_argument("forward: head mask is not applicable to an LSTM");
            return lstm_forward(tokens, opt);
        }
        return transformer_forward(tokens, opt);
    }

    // log P(target | context) at the final position, accumulated in double.
    double next_token_logprob(std::span<const int> context, int target,
                              const HeadMask *mask = nullptr) const {
        if (context.empty()) throw std::invalid_argument("next_token_logprob: empty context");
        if (target < 0 || target >= cfg_.vocab)
            throw std::invalid_argument("next_token_logprob: target id out of vocab");
        ForwardOptions<T> opt;
        opt.last_logits_only = true;
        opt.head_mask = mask;
        ForwardResult<T> r = forward(context, opt);
        const T *row = r.logits.data();
        double maxv = row[0];
        for (int j = 1; j < cfg_.vocab; ++j) maxv = std::max(maxv, static_cast<double>(row[j]));
        double sum = 0.0;
        for (int j = 0; j < cfg_.vocab; ++j) sum += std::exp(static_cast<double>(row[j]) - maxv);
        return static_cast<double>(row[target]) - maxv - std::log(sum);
    }

    // --- tape builders ---------------------------------------------------------

    // Builds the forward graph for a batch of equal-length sequences, plus a
    // masked mean cross-entropy loss on next-token targets when pad_id >= 0.
    // With capture_attention set (batch of one), every attention matrix node
    // is flagged for gradient capture labeled (layer, head).
    TapeRefs build_tape(Graph<T> &g, std::span<const std::vector<int>> batch, int pad_id,
                        bool with_loss, bool capture_attention = false,
                        const HeadMask *head_mask = nullptr) const {
        if (batch.empty()) throw std::invalid_argument("build_tape: empty batch");
        const size_t S = batch[0].size();
        for (const auto &seq : batch) {
            if (seq.size() != S) throw std::invalid_argument("build_tape: ragged batch");
            check_tokens(seq);
        }
        if (capture_attention && batch.size() != 1)
            throw std::invalid_argument("build_tape: capture requires a single sequence");
        if (head_mask && cfg_.arch == Arch::kLstm && !head_mask->empty())
            throw std::invalid_argument("build_tape: head mask is not applicable to an LSTM");

        TapeRefs refs;
        std::vector<NodeId> leaves(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            leaves[i] = g.leaf(params_[i].rows, params_[i].cols, params_[i].w.data(), true);
            refs.param_leaves.emplace_back(static_cast<int>(i), leaves[i]);
        }
        if (cfg_.arch == Arch::kTransformer) {
            build_transformer_tape(g, batch, leaves, capture_attention, head_mask, refs);
        } else {
            build_lstm_tape(g, batch, leaves, refs);
        }
        if (with_loss) {
            attach_loss(g, batch, pad_id, refs);
        }
        return refs;
    }

    // --- parameter layout -------------------------------------------------------

    int param_index(const std::string &name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::out_of_range("model: unknown parameter '" + name + "'");
        return it->second;
    }

    // Final-layer-norm and unembedding indices; the frozen output head shared
    // with lens probes.
    int lnf_gain_index() const { return param_index("lnf.g"); }
    int lnf_bias_index() const { return param_index("lnf.b"); }
    int unembed_w_index() const { return param_index("unembed.w"); }
    int unembed_b_index() const { return param_index("unembed.b"); }

private:
    explicit Model(const ModelConfig &cfg) : cfg_(cfg) {
        if (cfg_.arch == Arch::kTransformer) {
            layout_transformer();
        } else {
            layout_lstm();
        }
        for (size_t i = 0; i < params_.size(); ++i) {
            index_[params_[i].name] = static_cast<int>(i);
        }
    }

    int add_param(const std::string &name, int rows, int cols, ParamKind kind) {
        Param<T> p;
        p.name = name;
        p.rows = rows;
        p.cols = cols;
        p.kind = kind;
        p.w.assign(static_cast<size_t>(rows) * cols, T(0));
        params_.push_back(std::move(p));
        return static_cast<int>(params_.size()) - 1;
    }

    void layout_transformer() {
        const int H = cfg_.hidden, V = cfg_.vocab, F = 4 * H;
        add_param("tok_emb", V, H, ParamKind::kWeight);
        add_param("pos_emb", cfg_.max_len, H, ParamKind::kWeight);
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            add_param(p + "ln1.g", 1, H, ParamKind::kGain);
            add_param(p + "ln1.b", 1, H, ParamKind::kBias);
            add_param(p + "attn.wq", H, H, ParamKind::kWeight);
            add_param(p + "attn.bq", 1, H, ParamKind::kBias);
            add_param(p + "attn.wk", H, H, ParamKind::kWeight);
            add_param(p + "attn.bk", 1, H, ParamKind::kBias);
            add_param(p + "attn.wv", H, H, ParamKind::kWeight);
            add_param(p + "attn.bv", 1, H, ParamKind::kBias);
            add_param(p + "attn.wo", H, H, ParamKind::kWeight);
            add_param(p + "attn.bo", 1, H, ParamKind::kBias);
            add_param(p + "ln2.g", 1, H, ParamKind::kGain);
            add_param(p + "ln2.b", 1, H, ParamKind::kBias);
            add_param(p + "ff.w1", H, F, ParamKind::kWeight);
            add_param(p + "ff.b1", 1, F, ParamKind::kBias);
            add_param(p + "ff.w2", F, H, ParamKind::kWeight);
            add_param(p + "ff.b2", 1, H, ParamKind::kBias);
        }
        add_param("lnf.g", 1, H, ParamKind::kGain);
        add_param("lnf.b", 1, H, ParamKind::kBias);
        add_param("unembed.w", H, V, ParamKind::kWeight);
        add_param("unembed.b", 1, V, ParamKind::kBias);
    }

    void layout_lstm() {
        const int H = cfg_.hidden, V = cfg_.vocab;
        add_param("tok_emb", V, H, ParamKind::kWeight);
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            add_param(p + "wih", H, 4 * H, ParamKind::kWeight);
            add_param(p + "whh", H, 4 * H, ParamKind::kWeight);
            add_param(p + "b", 1, 4 * H, ParamKind::kBias);
        }
        add_param("unembed.w", H, V, ParamKind::kWeight);
        add_param("unembed.b", 1, V, ParamKind::kBias);
    }

    void check_tokens(std::span<const int> tokens) const {
        if (static_cast<int>(tokens.size()) > cfg_.max_len)
            throw std::invalid_argument("forward: sequence longer than max_len");
        for (int t : tokens) {
            if (t < 0 || t >= cfg_.vocab)
                throw std::invalid_argument("forward: token id " + std::to_string(t) +
                                            " out of vocab range");
        }
    }

    const std::vector<T> &w(const std::string &name) const {
        return params_[static_cast<size_t>(param_index(name))].w;
    }

    // --- plain transformer forward -------------------------------------------

    static void mat_vecstack(std::vector<T> &out, const std::vector<T> &x, int S,
                             const std::vector<T> &wmat, const std::vector<T> &bias, int in,
                             int outc) {
        out.assign(static_cast<size_t>(S) * outc, T(0));
        for (int i = 0; i < S; ++i) {
            const T *xr = x.data() + static_cast<size_t>(i) * in;
            T *orow = out.data() + static_cast<size_t>(i) * outc;
            for (int j = 0; j < outc; ++j) orow[j] = bias.empty() ? T(0) : bias[j];
            for (int k = 0; k < in; ++k) {
                const T xv = xr[k];
                const T *wrow = wmat.data() + static_cast<size_t>(k) * outc;
                for (int j = 0; j < outc; ++j) orow[j] += xv * wrow[j];
            }
        }
    }

    static void layer_norm_rows(std::vector<T> &out, const std::vector<T> &x, int S, int H,
                                const std::vector<T> &g, const std::vector<T> &b) {
        out.resize(static_cast<size_t>(S) * H);
        for (int i = 0; i < S; ++i) {
            const T *xr = x.data() + static_cast<size_t>(i) * H;
            T *yr = out.data() + static_cast<size_t>(i) * H;
            T mean = T(0);
            for (int j = 0; j < H; ++j) mean += xr[j];
            mean /= T(H);
            T var = T(0);
            for (int j = 0; j < H; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= T(H);
            const T rstd = T(1) / std::sqrt(var + T(1e-5));
            for (int j = 0; j < H; ++j) yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
        }
    }

    ForwardResult<T> transformer_forward(std::span<const int> tokens,
                                         const ForwardOptions<T> &opt) const {
        const int S = static_cast<int>(tokens.size());
        const int H = cfg_.hidden, V = cfg_.vocab, nh = cfg_.heads, dh = cfg_.head_dim();
        const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

        ForwardResult<T> res;
        res.positions = S;
        if (opt.record_attention) {
            res.attention.assign(static_cast<size_t>(cfg_.layers),
                                 std::vector<std::vector<T>>(static_cast<size_t>(nh)));
        }

        std::vector<T> x(static_cast<size_t>(S) * H);
        {
            const auto &te = w("tok_emb");
            const auto &pe = w("pos_emb");
            for (int i = 0; i < S; ++i) {
                const T *tr = te.data() + static_cast<size_t>(tokens[i]) * H;
                const T *pr = pe.data() + static_cast<size_t>(i) * H;
                T *xr = x.data() + static_cast<size_t>(i) * H;
                for (int j = 0; j < H; ++j) xr[j] = tr[j] + pr[j];
            }
        }

        std::vector<T> normed, q, k, v, ctx(static_cast<size_t>(S) * H), attn_out, ff1, ff2;
        std::vector<T> scores;
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            layer_norm_rows(normed, x, S, H, w(p + "ln1.g"), w(p + "ln1.b"));
            mat_vecstack(q, normed, S, w(p + "attn.wq"), w(p + "attn.bq"), H, H);
            mat_vecstack(k, normed, S, w(p + "attn.wk"), w(p + "attn.bk"), H, H);
            mat_vecstack(v, normed, S, w(p + "attn.wv"), w(p + "attn.bv"), H, H);

            std::fill(ctx.begin(), ctx.end(), T(0));
            for (int h = 0; h < nh; ++h) {
                const int off = h * dh;
                const bool masked = opt.head_mask && opt.head_mask->test(l, h);
                scores.assign(static_cast<size_t>(S) * S, T(0));
                for (int i = 0; i < S; ++i) {
                    const T *qi = q.data() + static_cast<size_t>(i) * H + off;
                    T *srow = scores.data() + static_cast<size_t>(i) * S;
                    T maxv = -std::numeric_limits<T>::infinity();
                    for (int j = 0; j <= i; ++j) {
                        const T *kj = k.data() + static_cast<size_t>(j) * H + off;
                        T dot = T(0);
                        for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
                        srow[j] = dot * inv_sqrt_dh;
                        maxv = std::max(maxv, srow[j]);
                    }
                    T sum = T(0);
                    for (int j = 0; j <= i; ++j) {
                        srow[j] = std::exp(srow[j] - maxv);
                        sum += srow[j];
                    }
                    const T inv = T(1) / sum;
                    for (int j = 0; j <= i; ++j) srow[j] *= inv;
                    if (!masked) {
                        T *crow = ctx.data() + static_cast<size_t>(i) * H + off;
                        for (int j = 0; j <= i; ++j) {
                            const T a = srow[j];
                            const T *vj = v.data() + static_cast<size_t>(j) * H + off;
                            for (int d = 0; d < dh; ++d) crow[d] += a * vj[d];
                        }
                    }
                }
                if (opt.record_attention) {
                    res.attention[static_cast<size_t>(l)][static_cast<size_t>(h)] = scores;
                }
            }

            mat_vecstack(attn_out, ctx, S, w(p + "attn.wo"), w(p + "attn.bo"), H, H);
            for (size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];

            layer_norm_rows(normed, x, S, H, w(p + "ln2.g"), w(p + "ln2.b"));
            mat_vecstack(ff1, normed, S, w(p + "ff.w1"), w(p + "ff.b1"), H, 4 * H);
            const T s = std::sqrt(T(2) / T(M_PI));
            for (auto &u : ff1) u = T(0.5) * u * (T(1) + std::tanh(s * (u + T(0.044715) * u * u * u)));
            mat_vecstack(ff2, ff1, S, w(p + "ff.w2"), w(p + "ff.b2"), 4 * H, H);
            for (size_t i = 0; i < x.size(); ++i) x[i] += ff2[i];

            if (opt.want_hidden) res.hidden.push_back(x);
        }

        layer_norm_rows(normed, x, S, H, w("lnf.g"), w("lnf.b"));
        const auto &wu = w("unembed.w");
        const auto &bu = w("unembed.b");
        if (opt.last_logits_only) {
            res.logits.assign(static_cast<size_t>(V), T(0));
            const T *xr = normed.data() + static_cast<size_t>(S - 1) * H;
            for (int j = 0; j < V; ++j) res.logits[j] = bu[j];
            for (int kk = 0; kk < H; ++kk) {
                const T xv = xr[kk];
                const T *wr = wu.data() + static_cast<size_t>(kk) * V;
                for (int j = 0; j < V; ++j) res.logits[j] += xv * wr[j];
            }
        } else {
            mat_vecstack(res.logits, normed, S, wu, bu, H, V);
        }
        return res;
    }

    // --- plain LSTM forward -----------------------------------------------------

    ForwardResult<T> lstm_forward(std::span<const int> tokens, const ForwardOptions<T> &opt) const {
        const int S = static_cast<int>(tokens.size());
        const int H = cfg_.hidden, V = cfg_.vocab;
        ForwardResult<T> res;
        res.positions = S;

        std::vector<std::vector<T>> h(static_cast<size_t>(cfg_.layers),
                                      std::vector<T>(static_cast<size_t>(H), T(0)));
        std::vector<std::vector<T>> c = h;

        std::vector<T> xin(static_cast<size_t>(H)), gates(static_cast<size_t>(4) * H);
        std::vector<T> top(static_cast<size_t>(S) * H);
        const auto &te = w("tok_emb");
        for (int t = 0; t < S; ++t) {
            const T *er = te.data() + static_cast<size_t>(tokens[t]) * H;
            std::copy(er, er + H, xin.begin());
            for (int l = 0; l < cfg_.layers; ++l) {
                const std::string p = "layer" + std::to_string(l) + ".";
                const auto &wih = w(p + "wih");
                const auto &whh = w(p + "whh");
                const auto &bias = w(p + "b");
                std::copy(bias.begin(), bias.end(), gates.begin());
                for (int kk = 0; kk < H; ++kk) {
                    const T xv = xin[kk];
                    const T *wr = wih.data() + static_cast<size_t>(kk) * 4 * H;
                    for (int j = 0; j < 4 * H; ++j) gates[j] += xv * wr[j];
                }
                for (int kk = 0; kk < H; ++kk) {
                    const T hv = h[static_cast<size_t>(l)][static_cast<size_t>(kk)];
                    const T *wr = whh.data() + static_cast<size_t>(kk) * 4 * H;
                    for (int j = 0; j < 4 * H; ++j) gates[j] += hv * wr[j];
                }
                auto sigm = [](T z) { return T(1) / (T(1) + std::exp(-z)); };
                T *cl = c[static_cast<size_t>(l)].data();
                T *hl = h[static_cast<size_t>(l)].data();
                for (int j = 0; j < H; ++j) {
                    const T ig = sigm(gates[j]);
                    const T fg = sigm(gates[static_cast<size_t>(H) + j]);
                    const T gg = std::tanh(gates[static_cast<size_t>(2) * H + j]);
                    const T og = sigm(gates[static_cast<size_t>(3) * H + j]);
                    cl[j] = fg * cl[j] + ig * gg;
                    hl[j] = og * std::tanh(cl[j]);
                }
                std::copy(hl, hl + H, xin.begin());
            }
            std::copy(xin.begin(), xin.end(), top.begin() + static_cast<size_t>(t) * H);
        }

        const auto &wu = w("unembed.w");
        const auto &bu = w("unembed.b");
        if (opt.last_logits_only) {
            res.logits.assign(static_cast<size_t>(V), T(0));
            const T *xr = top.data() + static_cast<size_t>(S - 1) * H;
            for (int j = 0; j < V; ++j) res.logits[j] = bu[j];
            for (int kk = 0; kk < H; ++kk) {
                const T xv = xr[kk];
                const T *wr = wu.data() + static_cast<size_t>(kk) * V;
                for (int j = 0; j < V; ++j) res.logits[j] += xv * wr[j];
            }
        } else {
            mat_vecstack(res.logits, top, S, wu, bu, H, V);
        }
        return res;
    }

    // --- transformer tape -----------------------------------------------------

    void build_transformer_tape(Graph<T> &g, std::span<const std::vector<int>> batch,
                                const std::vector<NodeId> &leaves, bool capture,
                                const HeadMask *head_mask, TapeRefs &refs) const {
        const int B = static_cast<int>(batch.size());
        const int S = static_cast<int>(batch[0].size());
        const int H = cfg_.hidden, nh = cfg_.heads, dh = cfg_.head_dim();

        auto leaf = [&](const std::string &name) {
            return leaves[static_cast<size_t>(param_index(name))];
        };

        std::vector<int> tok_ids, pos_ids;
        tok_ids.reserve(static_cast<size_t>(B) * S);
        pos_ids.reserve(static_cast<size_t>(B) * S);
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < S; ++t) {
                tok_ids.push_back(batch[b][static_cast<size_t>(t)]);
                pos_ids.push_back(t);
            }
        }
        NodeId x = g.add(g.embedding_lookup(leaf("tok_emb"), tok_ids),
                         g.embedding_lookup(leaf("pos_emb"), pos_ids));

        if (capture) {
            refs.attention.assign(static_cast<size_t>(cfg_.layers), {});
        }
        const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            NodeId n1 = g.layer_norm(x, leaf(p + "ln1.g"), leaf(p + "ln1.b"));
            NodeId q = g.add_bias(g.matmul(n1, leaf(p + "attn.wq")), leaf(p + "attn.bq"));
            NodeId k = g.add_bias(g.matmul(n1, leaf(p + "attn.wk")), leaf(p + "attn.bk"));
            NodeId v = g.add_bias(g.matmul(n1, leaf(p + "attn.wv")), leaf(p + "attn.bv"));

            std::vector<NodeId> seq_ctx;
            if (capture) refs.attention[static_cast<size_t>(l)].clear();
            for (int b = 0; b < B; ++b) {
                NodeId qb = B == 1 ? q : g.slice_rows(q, b * S, S);
                NodeId kb = B == 1 ? k : g.slice_rows(k, b * S, S);
                NodeId vb = B == 1 ? v : g.slice_rows(v, b * S, S);
                std::vector<NodeId> head_ctx;
                for (int h = 0; h < nh; ++h) {
                    NodeId qh = g.slice_cols(qb, h * dh, dh);
                    NodeId kh = g.slice_cols(kb, h * dh, dh);
                    NodeId vh = g.slice_cols(vb, h * dh, dh);
                    NodeId sc = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dh);
                    NodeId attn = g.causal_softmax(sc);
                    if (capture) {
                        g.set_capture(attn, l, h);
                        refs.attention[static_cast<size_t>(l)].push_back(attn);
                    }
                    NodeId ctx = g.matmul(attn, vh);
                    if (head_mask && head_mask->test(l, h)) {
                        ctx = g.scale(ctx, T(0));
                    }
                    head_ctx.push_back(ctx);
                }
                seq_ctx.push_back(g.concat_cols(head_ctx));
            }
            NodeId ctx_all = B == 1 ? seq_ctx[0] : g.concat_rows(seq_ctx);
            NodeId attn_out =
                g.add_bias(g.matmul(ctx_all, leaf(p + "attn.wo")), leaf(p + "attn.bo"));
            x = g.add(x, attn_out);

            NodeId n2 = g.layer_norm(x, leaf(p + "ln2.g"), leaf(p + "ln2.b"));
            NodeId f1 = g.gelu(g.add_bias(g.matmul(n2, leaf(p + "ff.w1")), leaf(p + "ff.b1")));
            NodeId f2 = g.add_bias(g.matmul(f1, leaf(p + "ff.w2")), leaf(p + "ff.b2"));
            x = g.add(x, f2);
            refs.hidden.push_back(x);
        }

        NodeId nf = g.layer_norm(x, leaf("lnf.g"), leaf("lnf.b"));
        refs.logits = g.add_bias(g.matmul(nf, leaf("unembed.w")), leaf("unembed.b"));
    }

    // --- LSTM tape ---------------------------------------------------------------
    //
    // Timestep-synchronous over the batch: logits come out in t-major order
    // (row t*B + b), which attach_loss accounts for.

    void build_lstm_tape(Graph<T> &g, std::span<const std::vector<int>> batch,
                         const std::vector<NodeId> &leaves, TapeRefs &refs) const {
        const int B = static_cast<int>(batch.size());
        const int S = static_cast<int>(batch[0].size());
        const int H = cfg_.hidden;

        auto leaf = [&](const std::string &name) {
            return leaves[static_cast<size_t>(param_index(name))];
        };

        std::vector<int> tok_ids;
        tok_ids.reserve(static_cast<size_t>(B) * S);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < S; ++t) tok_ids.push_back(batch[b][static_cast<size_t>(t)]);
        NodeId emb = g.embedding_lookup(leaf("tok_emb"), tok_ids);

        std::vector<NodeId> h(static_cast<size_t>(cfg_.layers), -1);
        std::vector<NodeId> c(static_cast<size_t>(cfg_.layers), -1);
        NodeId zero_state = g.constant(B, H, std::vector<T>(static_cast<size_t>(B) * H, T(0)));
        for (int l = 0; l < cfg_.layers; ++l) {
            h[static_cast<size_t>(l)] = zero_state;
            c[static_cast<size_t>(l)] = zero_state;
        }

        std::vector<NodeId> top_states;
        for (int t = 0; t < S; ++t) {
            std::vector<int> rows(static_cast<size_t>(B));
            for (int b = 0; b < B; ++b) rows[static_cast<size_t>(b)] = b * S + t;
            NodeId xt = g.gather_rows(emb, rows);
            for (int l = 0; l < cfg_.layers; ++l) {
                const std::string p = "layer" + std::to_string(l) + ".";
                NodeId gates = g.add_bias(g.add(g.matmul(xt, leaf(p + "wih")),
                                                g.matmul(h[static_cast<size_t>(l)], leaf(p + "whh"))),
                                          leaf(p + "b"));
                NodeId ig = g.sigmoid(g.slice_cols(gates, 0, H));
                NodeId fg = g.sigmoid(g.slice_cols(gates, H, H));
                NodeId gg = g.tanh(g.slice_cols(gates, 2 * H, H));
                NodeId og = g.sigmoid(g.slice_cols(gates, 3 * H, H));
                NodeId cn = g.add(g.mul(fg, c[static_cast<size_t>(l)]), g.mul(ig, gg));
                NodeId hn = g.mul(og, g.tanh(cn));
                c[static_cast<size_t>(l)] = cn;
                h[static_cast<size_t>(l)] = hn;
                xt = hn;
            }
            top_states.push_back(xt);
        }
        NodeId top = S == 1 ? top_states[0] : g.concat_rows(top_states);
        refs.logits = g.add_bias(g.matmul(top, leaf("unembed.w")), leaf("unembed.b"));
    }

    // Next-token targets with pad masking; handles both batch-major
    // (transformer) and t-major (LSTM) logit row order.
    void attach_loss(Graph<T> &g, std::span<const std::vector<int>> batch, int pad_id,
                     TapeRefs &refs) const {
        const int B = static_cast<int>(batch.size());
        const int S = static_cast<int>(batch[0].size());
        std::vector<int> targets(static_cast<size_t>(B) * S, 0);
        std::vector<uint8_t> mask(static_cast<size_t>(B) * S, 0);
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < S; ++t) {
                const size_t row = cfg_.arch == Arch::kTransformer
                                       ? static_cast<size_t>(b) * S + t
                                       : static_cast<size_t>(t) * B + b;
                if (t + 1 < S && batch[b][static_cast<size_t>(t + 1)] != pad_id) {
                    targets[row] = batch[b][static_cast<size_t>(t + 1)];
                    mask[row] = 1;
                }
            }
        }
        refs.loss = g.cross_entropy(refs.logits, std::move(targets), std::move(mask));
    }

    ModelConfig cfg_;
    std::vector<Param<T>> params_;
    std::map<std::string, int> index_;
};

}  // namespace sg
