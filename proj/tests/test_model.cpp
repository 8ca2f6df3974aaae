// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "model.hpp"
#include "rng.hpp"

using namespace sg;

namespace {

ModelConfig tiny_transformer_cfg(uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.arch = Arch::kTransformer;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.hidden = 8;
    cfg.vocab = 11;
    cfg.max_len = 16;
    cfg.seed = seed;
    return cfg;
}

ModelConfig tiny_lstm_cfg(uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.arch = Arch::kLstm;
    cfg.layers = 2;
    cfg.heads = 1;
    cfg.hidden = 8;
    cfg.vocab = 11;
    cfg.max_len = 16;
    cfg.seed = seed;
    return cfg;
}

std::vector<int> random_tokens(Rng &rng, int len, int vocab) {
    std::vector<int> t(static_cast<size_t>(len));
    for (int &v : t) v = static_cast<int>(rng.below(static_cast<uint64_t>(vocab)));
    return t;
}

// Mirrors one pre-LN block with the attention contribution removed:
// x += ff(ln2(x)); logits = unembed(lnf(x)). Plain double loops, no shared
// code with the model.
std::vector<double> ablated_oracle(const Model<double> &m, std::span<const int> tokens) {
    const auto &cfg = m.config();
    const int S = static_cast<int>(tokens.size()), H = cfg.hidden, V = cfg.vocab;
    auto param = [&](const std::string &n) -> const std::vector<double> & {
        return m.params()[static_cast<size_t>(m.param_index(n))].w;
    };
    auto ln = [&](std::vector<double> &x, const std::vector<double> &g,
                  const std::vector<double> &b) {
        std::vector<double> out(x.size());
        for (int i = 0; i < S; ++i) {
            double mean = 0, var = 0;
            for (int j = 0; j < H; ++j) mean += x[i * H + j];
            mean /= H;
            for (int j = 0; j < H; ++j) var += (x[i * H + j] - mean) * (x[i * H + j] - mean);
            var /= H;
            const double rstd = 1.0 / std::sqrt(var + 1e-5);
            for (int j = 0; j < H; ++j) out[i * H + j] = (x[i * H + j] - mean) * rstd * g[j] + b[j];
        }
        return out;
    };

    std::vector<double> x(static_cast<size_t>(S) * H);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < H; ++j)
            x[i * H + j] = param("tok_emb")[static_cast<size_t>(tokens[i]) * H + j] +
                           param("pos_emb")[static_cast<size_t>(i) * H + j];

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        // attention contribution removed entirely
        std::vector<double> n2 = ln(x, param(p + "ln2.g"), param(p + "ln2.b"));
        const int F = 4 * H;
        std::vector<double> f1(static_cast<size_t>(S) * F);
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < F; ++j) {
                double acc = param(p + "ff.b1")[static_cast<size_t>(j)];
                for (int k = 0; k < H; ++k)
                    acc += n2[i * H + k] * param(p + "ff.w1")[static_cast<size_t>(k) * F + j];
                const double s = std::sqrt(2.0 / M_PI);
                f1[i * F + j] =
                    0.5 * acc * (1.0 + std::tanh(s * (acc + 0.044715 * acc * acc * acc)));
            }
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < H; ++j) {
                double acc = param(p + "ff.b2")[static_cast<size_t>(j)];
                for (int k = 0; k < F; ++k)
                    acc += f1[i * F + k] * param(p + "ff.w2")[static_cast<size_t>(k) * H + j];
                x[i * H + j] += acc;
            }
    }
    std::vector<double> nf = ln(x, param("lnf.g"), param("lnf.b"));
    std::vector<double> logits(static_cast<size_t>(S) * V);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < V; ++j) {
            double acc = param("unembed.b")[static_cast<size_t>(j)];
            for (int k = 0; k < H; ++k)
                acc += nf[i * H + k] * param("unembed.w")[static_cast<size_t>(k) * V + j];
            logits[i * V + j] = acc;
        }
    return logits;
}

}  // namespace

TEST_CASE("empty head mask leaves logits identical to a plain forward") {
    Model<float> m = Model<float>::random_init(tiny_transformer_cfg());
    Rng rng(1);
    auto toks = random_tokens(rng, 7, m.config().vocab);

    ForwardOptions<float> plain;
    ForwardResult<float> a = m.forward(toks, plain);

    HeadMask empty(m.config().layers, m.config().heads);
    ForwardOptions<float> masked;
    masked.record_attention = true;
    masked.head_mask = &empty;
    ForwardResult<float> b = m.forward(toks, masked);

    REQUIRE(a.logits.size() == b.logits.size());
    for (size_t i = 0; i < a.logits.size(); ++i) CHECK(a.logits[i] == b.logits[i]);
}

TEST_CASE("masking every head reduces the block to feed-forward plus residual") {
    Model<double> m = Model<double>::random_init(tiny_transformer_cfg(7));
    Rng rng(2);
    auto toks = random_tokens(rng, 6, m.config().vocab);

    HeadMask all(m.config().layers, m.config().heads);
    for (int h = 0; h < m.config().heads; ++h) all.set(HeadId{0, h});
    ForwardOptions<double> opt;
    opt.head_mask = &all;
    ForwardResult<double> r = m.forward(toks, opt);

    std::vector<double> oracle = ablated_oracle(m, toks);
    REQUIRE(r.logits.size() == oracle.size());
    for (size_t i = 0; i < oracle.size(); ++i) {
        CHECK(r.logits[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
    }
}

TEST_CASE("attention rows are causal and normalized") {
    Model<float> m = Model<float>::random_init(tiny_transformer_cfg());
    Rng rng(3);
    auto toks = random_tokens(rng, 5, m.config().vocab);
    ForwardOptions<float> opt;
    opt.record_attention = true;
    ForwardResult<float> r = m.forward(toks, opt);
    REQUIRE(r.attention.size() == 1);
    REQUIRE(r.attention[0].size() == 2);
    const int S = 5;
    for (const auto &head : r.attention[0]) {
        for (int i = 0; i < S; ++i) {
            float sum = 0.0f;
            for (int j = 0; j < S; ++j) {
                if (j > i) CHECK(head[static_cast<size_t>(i) * S + j] == 0.0f);
                sum += head[static_cast<size_t>(i) * S + j];
            }
            CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
        }
    }
}

TEST_CASE("masked heads still record their attention matrices") {
    Model<float> m = Model<float>::random_init(tiny_transformer_cfg());
    Rng rng(4);
    auto toks = random_tokens(rng, 5, m.config().vocab);
    HeadMask mask(1, 2);
    mask.set(HeadId{0, 0});
    ForwardOptions<float> opt;
    opt.record_attention = true;
    opt.head_mask = &mask;
    ForwardResult<float> r = m.forward(toks, opt);
    float sum = 0.0f;
    for (float v : r.attention[0][0]) sum += v;
    CHECK(sum > 0.0f);
}

TEST_CASE("next_token_logprob is uniform under a zeroed unembedding") {
    Model<float> m = Model<float>::random_init(tiny_transformer_cfg());
    auto &wu = m.params()[static_cast<size_t>(m.unembed_w_index())].w;
    auto &bu = m.params()[static_cast<size_t>(m.unembed_b_index())].w;
    std::fill(wu.begin(), wu.end(), 0.0f);
    std::fill(bu.begin(), bu.end(), 0.0f);
    std::vector<int> ctx{1, 2, 3};
    for (int t = 0; t < m.config().vocab; ++t) {
        CHECK(m.next_token_logprob(ctx, t) ==
              doctest::Approx(-std::log(static_cast<double>(m.config().vocab))).epsilon(1e-9));
    }
}

TEST_CASE("next_token_logprob is never positive and matches a direct softmax oracle") {
    Model<double> m = Model<double>::random_init(tiny_transformer_cfg(9));
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        auto ctx = random_tokens(rng, 1 + static_cast<int>(rng.below(8)), m.config().vocab);
        const int target = static_cast<int>(rng.below(static_cast<uint64_t>(m.config().vocab)));
        const double lp = m.next_token_logprob(ctx, target);
        CHECK(lp <= 0.0);

        ForwardOptions<double> opt;
        ForwardResult<double> r = m.forward(ctx, opt);
        const double *row =
            r.logits.data() + static_cast<size_t>(r.positions - 1) * m.config().vocab;
        double denom = 0.0;
        for (int j = 0; j < m.config().vocab; ++j) denom += std::exp(row[j]);
        const double oracle = std::log(std::exp(row[target]) / denom);
        CHECK(lp == doctest::Approx(oracle).epsilon(1e-9));
    }
}

TEST_CASE("errors: bad token ids, empty context, LSTM head mask") {
    Model<float> tf = Model<float>::random_init(tiny_transformer_cfg());
    std::vector<int> bad{0, tf.config().vocab};
    ForwardOptions<float> opt;
    CHECK_THROWS_AS(tf.forward(bad, opt), std::invalid_argument);
    CHECK_THROWS_AS(tf.next_token_logprob({}, 0), std::invalid_argument);

    Model<float> lstm = Model<float>::random_init(tiny_lstm_cfg());
    HeadMask mask(1, 1);
    mask.set(HeadId{0, 0});
    ForwardOptions<float> lopt;
    lopt.head_mask = &mask;
    std::vector<int> ctx{1, 2};
    CHECK_THROWS_AS(lstm.forward(ctx, lopt), std::invalid_argument);
}

TEST_CASE("causality: perturbing token j never changes logits before j") {
    for (bool lstm : {false, true}) {
        Model<float> m = Model<float>::random_init(lstm ? tiny_lstm_cfg(3) : tiny_transformer_cfg(3));
        Rng rng(6);
        auto toks = random_tokens(rng, 10, m.config().vocab);
        ForwardOptions<float> opt;
        ForwardResult<float> base = m.forward(toks, opt);
        for (int j = 2; j < 10; j += 3) {
            auto perturbed = toks;
            perturbed[static_cast<size_t>(j)] =
                (perturbed[static_cast<size_t>(j)] + 1) % m.config().vocab;
            ForwardResult<float> r = m.forward(perturbed, opt);
            for (int i = 0; i < j; ++i) {
                for (int v = 0; v < m.config().vocab; ++v) {
                    CHECK(r.logits[static_cast<size_t>(i) * m.config().vocab + v] ==
                          base.logits[static_cast<size_t>(i) * m.config().vocab + v]);
                }
            }
        }
    }
}

TEST_CASE("masking a non-trivial head set changes the logits") {
    Model<float> m = Model<float>::random_init(tiny_transformer_cfg(13));
    Rng rng(7);
    auto toks = random_tokens(rng, 8, m.config().vocab);
    ForwardOptions<float> plain;
    ForwardResult<float> base = m.forward(toks, plain);
    for (int h = 0; h < m.config().heads; ++h) {
        HeadMask mask(1, 2);
        mask.set(HeadId{0, h});
        ForwardOptions<float> opt;
        opt.head_mask = &mask;
        ForwardResult<float> r = m.forward(toks, opt);
        bool any_diff = false;
        for (size_t i = 0; i < base.logits.size(); ++i) {
            if (r.logits[i] != base.logits[i]) any_diff = true;
        }
        CHECK(any_diff);
    }
}

TEST_CASE("lstm prefix logits equal the full-pass logits at the same positions") {
    Model<float> m = Model<float>::random_init(tiny_lstm_cfg(21));
    Rng rng(8);
    auto full = random_tokens(rng, 9, m.config().vocab);
    std::vector<int> prefix(full.begin(), full.begin() + 5);
    ForwardOptions<float> opt;
    ForwardResult<float> rp = m.forward(prefix, opt);
    ForwardResult<float> rf = m.forward(full, opt);
    for (int i = 0; i < 5; ++i) {
        for (int v = 0; v < m.config().vocab; ++v) {
            CHECK(rp.logits[static_cast<size_t>(i) * m.config().vocab + v] ==
                  rf.logits[static_cast<size_t>(i) * m.config().vocab + v]);
        }
    }
}

TEST_CASE("parameter count matches the closed form for the 12-layer width-768 config") {
    ModelConfig cfg;
    cfg.arch = Arch::kTransformer;
    cfg.layers = 12;
    cfg.heads = 12;
    cfg.hidden = 768;
    cfg.vocab = 5000;
    cfg.max_len = 512;
    Model<float> m = Model<float>::zeros(cfg);
    const size_t H = 768, V = 5000, P = 512, L = 12, F = 4 * H;
    const size_t per_layer = 4 * (H * H + H)  // qkvo projections with biases
                             + 2 * (2 * H)    // two layer norms
                             + (H * F + F) + (F * H + H);
    const size_t expect = V * H + P * H + L * per_layer + 2 * H + (H * V + V);
    CHECK(m.param_count() == expect);
}

TEST_CASE("tape forward agrees with the plain forward for both architectures") {
    for (bool lstm : {false, true}) {
        ModelConfig cfg = lstm ? tiny_lstm_cfg(31) : tiny_transformer_cfg(31);
        Model<double> m = Model<double>::random_init(cfg);
        Rng rng(9);
        const int B = 3, S = 6;
        std::vector<std::vector<int>> batch;
        for (int b = 0; b < B; ++b) batch.push_back(random_tokens(rng, S, cfg.vocab));

        Graph<double> g;
        TapeRefs refs = m.build_tape(g, batch, /*pad_id=*/0, /*with_loss=*/false);
        auto logits = g.value(refs.logits);

        for (int b = 0; b < B; ++b) {
            ForwardOptions<double> opt;
            ForwardResult<double> r = m.forward(batch[static_cast<size_t>(b)], opt);
            for (int t = 0; t < S; ++t) {
                const size_t tape_row = lstm ? static_cast<size_t>(t) * B + b
                                             : static_cast<size_t>(b) * S + t;
                for (int v = 0; v < cfg.vocab; ++v) {
                    CHECK(logits[tape_row * cfg.vocab + v] ==
                          doctest::Approx(
                              r.logits[static_cast<size_t>(t) * cfg.vocab + v])
                              .epsilon(1e-9));
                }
            }
        }
    }
}

TEST_CASE("attention capture is complete: one capture per (layer, head)") {
    ModelConfig cfg = tiny_transformer_cfg();
    cfg.layers = 3;
    cfg.heads = 2;
    Model<double> m = Model<double>::random_init(cfg);
    Rng rng(10);
    std::vector<std::vector<int>> batch{random_tokens(rng, 5, cfg.vocab)};
    Graph<double> g;
    TapeRefs refs = m.build_tape(g, batch, -1, false, /*capture_attention=*/true);
    std::vector<int> targets(5, 0);
    std::vector<uint8_t> mask(5, 0);
    mask.back() = 1;
    g.backward(g.cross_entropy(refs.logits, std::move(targets), std::move(mask)));
    CHECK(g.captures().size() == static_cast<size_t>(cfg.layers * cfg.heads));
    std::set<std::pair<int, int>> seen;
    for (const auto &cap : g.captures()) seen.insert({cap.layer, cap.head});
    CHECK(seen.size() == g.captures().size());
}

TEST_CASE("hidden state recording returns one residual stream per layer") {
    ModelConfig cfg = tiny_transformer_cfg();
    cfg.layers = 2;
    Model<float> m = Model<float>::random_init(cfg);
    std::vector<int> toks{1, 2, 3, 4};
    ForwardOptions<float> opt;
    opt.want_hidden = true;
    ForwardResult<float> r = m.forward(toks, opt);
    REQUIRE(r.hidden.size() == 2);
    CHECK(r.hidden[0].size() == static_cast<size_t>(4 * cfg.hidden));
}
