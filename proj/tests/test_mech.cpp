// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>

#include "mech.hpp"
#include "rng.hpp"

using namespace sg;

namespace {

ModelConfig toy_cfg(int layers, int heads, int hidden, int vocab, uint64_t seed) {
    ModelConfig cfg;
    cfg.arch = Arch::kTransformer;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.hidden = hidden;
    cfg.vocab = vocab;
    cfg.max_len = 16;
    cfg.seed = seed;
    return cfg;
}

// Loss of the 1-layer 1-head toy model as a function of a free attention
// matrix, written with plain loops so finite differences of it are an
// independent oracle for the captured gradient.
struct DownstreamFromA {
    const Model<double> &m;
    std::vector<int> tokens;
    int target;

    double operator()(const std::vector<double> &attn) const {
        const auto &cfg = m.config();
        const int S = static_cast<int>(tokens.size()), H = cfg.hidden, V = cfg.vocab;
        auto param = [&](const std::string &n) -> const std::vector<double> & {
            return m.params()[static_cast<size_t>(m.param_index(n))].w;
        };
        auto ln = [&](const std::vector<double> &x, const std::string &g, const std::string &b) {
            std::vector<double> out(x.size());
            for (int i = 0; i < S; ++i) {
                double mean = 0, var = 0;
                for (int j = 0; j < H; ++j) mean += x[i * H + j];
                mean /= H;
                for (int j = 0; j < H; ++j) var += (x[i * H + j] - mean) * (x[i * H + j] - mean);
                var /= H;
                const double rstd = 1.0 / std::sqrt(var + 1e-5);
                for (int j = 0; j < H; ++j)
                    out[i * H + j] = (x[i * H + j] - mean) * rstd * param(g)[static_cast<size_t>(j)] +
                                     param(b)[static_cast<size_t>(j)];
            }
            return out;
        };
        auto matvec = [&](const std::vector<double> &x, const std::string &wn,
                          const std::string &bn, int in, int out_c) {
            const auto &w = param(wn);
            const auto &b = param(bn);
            std::vector<double> out(static_cast<size_t>(S) * out_c);
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < out_c; ++j) {
                    double acc = b[static_cast<size_t>(j)];
                    for (int k = 0; k < in; ++k)
                        acc += x[static_cast<size_t>(i) * in + k] * w[static_cast<size_t>(k) * out_c + j];
                    out[static_cast<size_t>(i) * out_c + j] = acc;
                }
            return out;
        };

        std::vector<double> x(static_cast<size_t>(S) * H);
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < H; ++j)
                x[i * H + j] = param("tok_emb")[static_cast<size_t>(tokens[i]) * H + j] +
                               param("pos_emb")[static_cast<size_t>(i) * H + j];

        std::vector<double> n1 = ln(x, "layer0.ln1.g", "layer0.ln1.b");
        std::vector<double> v = matvec(n1, "layer0.attn.wv", "layer0.attn.bv", H, H);
        // ctx = attn @ v, single head spans the full width
        std::vector<double> ctx(static_cast<size_t>(S) * H, 0.0);
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j)
                for (int d = 0; d < H; ++d)
                    ctx[i * H + d] += attn[static_cast<size_t>(i) * S + j] * v[j * H + d];
        std::vector<double> attn_out = matvec(ctx, "layer0.attn.wo", "layer0.attn.bo", H, H);
        for (size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];

        std::vector<double> n2 = ln(x, "layer0.ln2.g", "layer0.ln2.b");
        std::vector<double> f1 = matvec(n2, "layer0.ff.w1", "layer0.ff.b1", H, 4 * H);
        const double s = std::sqrt(2.0 / M_PI);
        for (auto &u : f1) u = 0.5 * u * (1.0 + std::tanh(s * (u + 0.044715 * u * u * u)));
        std::vector<double> f2(static_cast<size_t>(S) * H);
        {
            const auto &w2 = param("layer0.ff.w2");
            const auto &b2 = param("layer0.ff.b2");
            for (int i = 0; i < S; ++i)
                for (int j = 0; j < H; ++j) {
                    double acc = b2[static_cast<size_t>(j)];
                    for (int k = 0; k < 4 * H; ++k)
                        acc += f1[static_cast<size_t>(i) * 4 * H + k] *
                               w2[static_cast<size_t>(k) * H + j];
                    f2[static_cast<size_t>(i) * H + j] = acc;
                }
        }
        for (size_t i = 0; i < x.size(); ++i) x[i] += f2[i];

        std::vector<double> nf = ln(x, "lnf.g", "lnf.b");
        const auto &wu = param("unembed.w");
        const auto &bu = param("unembed.b");
        std::vector<double> logits(static_cast<size_t>(V));
        for (int j = 0; j < V; ++j) {
            double acc = bu[static_cast<size_t>(j)];
            for (int k = 0; k < H; ++k) acc += nf[static_cast<size_t>(S - 1) * H + k] * wu[static_cast<size_t>(k) * V + j];
            logits[static_cast<size_t>(j)] = acc;
        }
        double maxv = logits[0];
        for (double lv : logits) maxv = std::max(maxv, lv);
        double sum = 0.0;
        for (double lv : logits) sum += std::exp(lv - maxv);
        return -(logits[static_cast<size_t>(target)] - maxv - std::log(sum));
    }
};

SaliencyMap synthetic_map(int layers, int heads, int S) {
    SaliencyMap m;
    m.positions = S;
    m.layer.assign(static_cast<size_t>(layers), std::vector<double>(static_cast<size_t>(S) * S, 0.0));
    m.head.assign(static_cast<size_t>(layers),
                  std::vector<std::vector<double>>(
                      static_cast<size_t>(heads),
                      std::vector<double>(static_cast<size_t>(S) * S, 0.0)));
    return m;
}

}  // namespace

TEST_CASE("saliency is all zero when value projections are zeroed") {
    Model<double> m = Model<double>::random_init(toy_cfg(2, 2, 8, 9, 3));
    for (int l = 0; l < 2; ++l) {
        auto &wv = m.params()[static_cast<size_t>(
                                  m.param_index("layer" + std::to_string(l) + ".attn.wv"))]
                       .w;
        std::fill(wv.begin(), wv.end(), 0.0);
    }
    std::vector<int> ctx{1, 2, 3, 4};
    SaliencyMap map = saliency(m, ctx, 5);
    for (const auto &lm : map.layer)
        for (double v : lm) CHECK(v == 0.0);
    for (const auto &heads : map.head)
        for (const auto &hm : heads)
            for (double v : hm) CHECK(v == 0.0);
}

TEST_CASE("captured attention gradients match finite differences end to end") {
    Model<double> m = Model<double>::random_init(toy_cfg(1, 1, 6, 7, 11));
    std::vector<int> tokens{1, 4, 2};
    const int target = 3;
    const int S = 3;

    // tape route
    Graph<double> g;
    std::vector<std::vector<int>> batch{tokens};
    TapeRefs refs = m.build_tape(g, batch, -1, false, /*capture_attention=*/true);
    std::vector<int> tgt(static_cast<size_t>(S), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(S), 0);
    tgt.back() = target;
    mask.back() = 1;
    g.backward(g.cross_entropy(refs.logits, std::move(tgt), std::move(mask)));
    REQUIRE(g.captures().size() == 1);
    const auto &cap = g.captures()[0];

    // finite differences on the attention probabilities as a free input
    DownstreamFromA f{m, tokens, target};
    std::vector<double> attn(cap.value.begin(), cap.value.end());
    const double h = 1e-6;
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            const size_t idx = static_cast<size_t>(i) * S + j;
            const double keep = attn[idx];
            attn[idx] = keep + h;
            const double up = f(attn);
            attn[idx] = keep - h;
            const double dn = f(attn);
            attn[idx] = keep;
            const double fd = (up - dn) / (2.0 * h);
            const double rel = std::fabs(cap.gradient[idx] - fd) / (std::fabs(fd) + 1e-8);
            INFO("cell ", i, ",", j, " ad=", cap.gradient[idx], " fd=", fd);
            CHECK(rel < 1e-3);
        }
    }

    // saliency entries are |A . g| of the same pass
    SaliencyMap map = saliency(m, tokens, target);
    for (size_t idx = 0; idx < cap.value.size(); ++idx) {
        CHECK(map.head[0][0][idx] ==
              doctest::Approx(std::fabs(cap.value[idx] * cap.gradient[idx])).epsilon(1e-9));
    }
    // causal zero pattern above the diagonal
    for (int i = 0; i < S; ++i)
        for (int j = i + 1; j < S; ++j) CHECK(map.head[0][0][static_cast<size_t>(i) * S + j] == 0.0);
}

TEST_CASE("per-head products sum to the layer map before the absolute value") {
    Model<double> m = Model<double>::random_init(toy_cfg(2, 3, 12, 9, 17));
    std::vector<int> tokens{1, 2, 3, 4, 5};
    const int S = 5, target = 6;

    Graph<double> g;
    std::vector<std::vector<int>> batch{tokens};
    TapeRefs refs = m.build_tape(g, batch, -1, false, true);
    std::vector<int> tgt(static_cast<size_t>(S), 0);
    std::vector<uint8_t> mask(static_cast<size_t>(S), 0);
    tgt.back() = target;
    mask.back() = 1;
    g.backward(g.cross_entropy(refs.logits, std::move(tgt), std::move(mask)));

    std::vector<std::vector<double>> signed_sum(
        2, std::vector<double>(static_cast<size_t>(S) * S, 0.0));
    for (const auto &cap : g.captures()) {
        for (size_t i = 0; i < cap.value.size(); ++i) {
            signed_sum[static_cast<size_t>(cap.layer)][i] += cap.value[i] * cap.gradient[i];
        }
    }
    SaliencyMap map = saliency(m, tokens, target);
    for (int l = 0; l < 2; ++l) {
        for (size_t i = 0; i < signed_sum[static_cast<size_t>(l)].size(); ++i) {
            CHECK(map.layer[static_cast<size_t>(l)][i] ==
                  doctest::Approx(std::fabs(signed_sum[static_cast<size_t>(l)][i])).epsilon(1e-9));
        }
    }
}

TEST_CASE("saliency rejects LSTM models") {
    ModelConfig cfg;
    cfg.arch = Arch::kLstm;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.hidden = 8;
    cfg.vocab = 9;
    cfg.max_len = 8;
    Model<double> m = Model<double>::random_init(cfg);
    std::vector<int> ctx{1, 2};
    CHECK_THROWS_AS(saliency(m, ctx, 1), std::invalid_argument);
}

TEST_CASE("flow_profile extracts the final-to-filler cell per layer") {
    const int S = 6;
    SaliencyMap zero = synthetic_map(4, 2, S);
    ContextInfo info{2, 5};
    std::vector<SaliencyMap> maps{zero};
    std::vector<ContextInfo> infos{info};
    auto prof = flow_profile(maps, infos);
    for (double v : prof) CHECK(v == 0.0);

    SaliencyMap hot = synthetic_map(4, 2, S);
    hot.layer[3][static_cast<size_t>(info.final_pos) * S + info.filler_pos] = 1.0;
    maps = {hot};
    prof = flow_profile(maps, infos);
    CHECK(prof == std::vector<double>{0.0, 0.0, 0.0, 1.0});
}

TEST_CASE("flow_profile mean equals per-context extraction") {
    Rng rng(23);
    const int S = 5, L = 3;
    std::vector<SaliencyMap> maps;
    std::vector<ContextInfo> infos;
    for (int c = 0; c < 10; ++c) {
        SaliencyMap m = synthetic_map(L, 1, S);
        for (auto &lm : m.layer)
            for (auto &v : lm) v = std::fabs(rng.normal(0.0, 1.0));
        maps.push_back(std::move(m));
        infos.push_back(ContextInfo{1 + static_cast<int>(rng.below(2)), S - 1});
    }
    auto prof = flow_profile(maps, infos);
    for (int l = 0; l < L; ++l) {
        double acc = 0.0;
        for (int c = 0; c < 10; ++c) {
            acc += maps[static_cast<size_t>(c)]
                       .layer[static_cast<size_t>(l)][static_cast<size_t>(infos[static_cast<size_t>(c)].final_pos) * S +
                                                      infos[static_cast<size_t>(c)].filler_pos];
        }
        CHECK(prof[static_cast<size_t>(l)] == doctest::Approx(acc / 10.0).epsilon(1e-12));
    }

    infos[0].filler_pos = -1;
    CHECK_THROWS_AS(flow_profile(maps, infos), std::invalid_argument);
}

TEST_CASE("classify_heads ratios, boundaries, and monotonicity") {
    const int S = 4;
    ContextInfo info{1, 3};
    SaliencyMap map = synthetic_map(1, 3, S);
    // head 0: everything at (final, filler) -> aggregate ratio 1
    map.head[0][0][static_cast<size_t>(info.final_pos) * S + info.filler_pos] = 5.0;
    // head 1: 0.31 aggregate, 0.69 elsewhere (off the tracked cells)
    map.head[0][1][static_cast<size_t>(info.final_pos) * S + info.filler_pos] = 0.31;
    map.head[0][1][static_cast<size_t>(2) * S + 2] = 0.69;
    // head 2: 0.29 aggregate, rest elsewhere
    map.head[0][2][static_cast<size_t>(info.final_pos) * S + info.filler_pos] = 0.29;
    map.head[0][2][static_cast<size_t>(2) * S + 2] = 0.71;

    HeadClassification cls = classify_heads(map, info, 0.30, 0.30);
    CHECK(cls.aggregate_ratio[0] == doctest::Approx(1.0));
    CHECK(cls.aggregate_ratio[1] == doctest::Approx(0.31));
    CHECK(cls.aggregate_ratio[2] == doctest::Approx(0.29));
    REQUIRE(cls.aggregate.size() == 2);
    CHECK(cls.aggregate[0] == HeadId{0, 0});
    CHECK(cls.aggregate[1] == HeadId{0, 1});

    // gather mass: keys strictly before the filler on the filler's query row
    SaliencyMap gm = synthetic_map(1, 1, S);
    gm.head[0][0][static_cast<size_t>(info.filler_pos) * S + 0] = 0.4;
    gm.head[0][0][static_cast<size_t>(2) * S + 1] = 0.6;
    HeadClassification gc = classify_heads(gm, info, 0.30, 0.30);
    CHECK(gc.gather_ratio[0] == doctest::Approx(0.4));
    REQUIRE(gc.gather.size() == 1);

    // raising a threshold never adds heads
    HeadClassification strict = classify_heads(map, info, 0.50, 0.50);
    CHECK(strict.aggregate.size() <= cls.aggregate.size());
    for (const HeadId &h : strict.aggregate) {
        CHECK(std::find(cls.aggregate.begin(), cls.aggregate.end(), h) != cls.aggregate.end());
    }

    // zero-saliency heads keep ratio zero
    SaliencyMap empty = synthetic_map(1, 1, S);
    HeadClassification ec = classify_heads(empty, info, 0.30, 0.30);
    CHECK(ec.gather_ratio[0] == 0.0);
    CHECK(ec.aggregate_ratio[0] == 0.0);
    CHECK(ec.gather.empty());
    CHECK(ec.aggregate.empty());

    CHECK_THROWS_AS(classify_heads(map, info, 0.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(classify_heads(map, ContextInfo{-1, 3}, 0.3, 0.3), std::invalid_argument);
}

TEST_CASE("intervene: empty head sets leave surprisal untouched") {
    Model<float> m = Model<float>::random_init(toy_cfg(2, 2, 8, 9, 31));
    std::vector<EvalContext> ctxs;
    for (int i = 0; i < 8; ++i) {
        EvalContext c;
        c.tokens = {1, 2, 3, static_cast<int>(1 + i % 5)};
        c.target = 4;
        c.info = {1, 3};
        ctxs.push_back(std::move(c));
    }
    std::vector<std::vector<HeadId>> empty_sets(ctxs.size());
    InterventionResult r = intervene(m, ctxs, empty_sets, 7);
    for (size_t i = 0; i < ctxs.size(); ++i) {
        CHECK(r.intervened[i] == r.original[i]);
        CHECK(r.control[i] == r.original[i]);
    }
    CHECK(r.avg_head_count == 0.0);
    CHECK(r.test.p_value == 1.0);
}

TEST_CASE("intervene: seeded control draws are reproducible and within the complement") {
    Model<float> m = Model<float>::random_init(toy_cfg(2, 4, 8, 9, 37));
    std::vector<EvalContext> ctxs;
    std::vector<std::vector<HeadId>> sets;
    for (int i = 0; i < 10; ++i) {
        EvalContext c;
        c.tokens = {1, 2, 3, 4, static_cast<int>(1 + i % 6)};
        c.target = 2;
        c.info = {1, 4};
        ctxs.push_back(std::move(c));
        sets.push_back({HeadId{0, 1}, HeadId{1, 2}});
    }
    InterventionResult a = intervene(m, ctxs, sets, 1234);
    InterventionResult b = intervene(m, ctxs, sets, 1234);
    CHECK(a.control == b.control);  // bit-exact reproduction
    CHECK(a.avg_head_count == doctest::Approx(2.0));
    CHECK(a.avg_layer == doctest::Approx(0.5));

    InterventionResult c = intervene(m, ctxs, sets, 4321);
    bool any_diff = false;
    for (size_t i = 0; i < ctxs.size(); ++i) {
        if (a.control[i] != c.control[i]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("intervene: every eligible control head appears across seeded draws") {
    Model<float> m = Model<float>::random_init(toy_cfg(1, 4, 8, 9, 41));
    std::vector<EvalContext> ctxs(1);
    ctxs[0].tokens = {1, 2, 3};
    ctxs[0].target = 1;
    ctxs[0].info = {1, 2};
    std::vector<std::vector<HeadId>> sets{{HeadId{0, 0}}};

    std::set<int> seen;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        // re-derive the control pick through the public route: compare
        // control surprisal to each single-head mask
        InterventionResult r = intervene(m, ctxs, sets, seed);
        for (int h = 1; h < 4; ++h) {
            HeadMask mk(1, 4);
            mk.set(HeadId{0, h});
            const double s = -m.next_token_logprob(ctxs[0].tokens, ctxs[0].target, &mk);
            if (s == r.control[0]) seen.insert(h);
        }
    }
    CHECK(seen == std::set<int>{1, 2, 3});
}

TEST_CASE("intervene: a fully identified layer is an error naming the layer") {
    Model<float> m = Model<float>::random_init(toy_cfg(2, 2, 8, 9, 43));
    std::vector<EvalContext> ctxs(1);
    ctxs[0].tokens = {1, 2, 3};
    ctxs[0].target = 1;
    ctxs[0].info = {1, 2};
    std::vector<std::vector<HeadId>> sets{{HeadId{1, 0}, HeadId{1, 1}}};
    CHECK_THROWS_WITH_AS(intervene(m, ctxs, sets, 1), doctest::Contains("layer 1"),
                         std::runtime_error);
}

TEST_CASE("tuned lens: identity initialization reproduces the final layer exactly") {
    Model<float> m = Model<float>::random_init(toy_cfg(2, 2, 8, 11, 47));
    std::vector<CorpusChunk> held(2);
    Rng rng(3);
    for (auto &c : held) {
        c.tokens.resize(10);
        for (auto &t : c.tokens) t = 1 + static_cast<int>(rng.below(9));
    }
    LensFitOptions opt;
    opt.steps = 0;  // no training: probes stay at identity/zero
    LensProbe probe = tuned_lens_fit(m, held, 0, opt);
    CHECK(probe.final_kl.back() < 1e-5);

    std::vector<int> ctx{1, 2, 3, 4};
    auto sps = lens_layer_surprisals(m, probe, ctx, 5);
    REQUIRE(sps.size() == 2);
    const double model_sps = -m.next_token_logprob(ctx, 5);
    CHECK(sps.back() == doctest::Approx(model_sps).epsilon(1e-5));
}

TEST_CASE("tuned lens training lowers early-layer KL and keeps the last layer tight") {
    Model<float> m = Model<float>::random_init(toy_cfg(2, 2, 8, 11, 53));
    std::vector<CorpusChunk> held(4);
    Rng rng(5);
    for (auto &c : held) {
        c.tokens.resize(12);
        for (auto &t : c.tokens) t = 1 + static_cast<int>(rng.below(9));
    }
    LensFitOptions base;
    base.steps = 0;
    LensProbe before = tuned_lens_fit(m, held, 0, base);

    LensFitOptions opt;
    opt.steps = 300;
    opt.batch = 16;
    opt.seed = 9;
    LensProbe after = tuned_lens_fit(m, held, 0, opt);
    CHECK(after.final_kl[0] <= before.final_kl[0] + 1e-9);
    CHECK(after.final_kl.back() < 0.05);

    std::vector<int> ctx{1, 2, 3, 4};
    const double model_sps = -m.next_token_logprob(ctx, 5);
    auto sps = lens_layer_surprisals(m, after, ctx, 5);
    CHECK(std::fabs(sps.back() - model_sps) < 0.05);
}

TEST_CASE("tuned lens rejects LSTM checkpoints") {
    ModelConfig cfg;
    cfg.arch = Arch::kLstm;
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.hidden = 8;
    cfg.vocab = 9;
    cfg.max_len = 16;
    Model<float> m = Model<float>::random_init(cfg);
    std::vector<CorpusChunk> held(1);
    held[0].tokens = {1, 2, 3};
    CHECK_THROWS_AS(tuned_lens_fit(m, held, 0, {}), std::invalid_argument);
}
