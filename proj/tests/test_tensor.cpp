// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

using namespace sg;

namespace {

// Central finite differences against reverse-mode gradients for a scalar
// function of several matrix inputs. Loss direction is randomized via a
// fixed projection so the whole Jacobian is exercised.
struct FdCheck {
    std::vector<std::pair<int, int>> shapes;
    // builds the scalar loss from leaves (one per shape, in order)
    std::function<NodeId(Graph<double> &, const std::vector<NodeId> &)> build;
    double tol = 1e-4;
    double step = 1e-5;
    uint64_t seed = 7;
    // index of inputs whose gradient is checked (default: all)
    std::vector<size_t> check_inputs;

    void run() const {
        Rng rng(seed);
        std::vector<std::vector<double>> data(shapes.size());
        for (size_t i = 0; i < shapes.size(); ++i) {
            data[i].resize(static_cast<size_t>(shapes[i].first) * shapes[i].second);
            for (double &v : data[i]) v = rng.normal(0.0, 1.0);
        }

        auto eval = [&](std::vector<std::vector<double>> &inputs, bool want_grad,
                        std::vector<std::vector<double>> *grads) {
            Graph<double> g;
            std::vector<NodeId> leaves;
            for (size_t i = 0; i < shapes.size(); ++i) {
                leaves.push_back(
                    g.leaf(shapes[i].first, shapes[i].second, inputs[i].data(), true));
            }
            NodeId loss = build(g, leaves);
            REQUIRE(g.rows(loss) == 1);
            REQUIRE(g.cols(loss) == 1);
            const double out = g.value(loss)[0];
            if (want_grad) {
                g.backward(loss);
                grads->resize(shapes.size());
                for (size_t i = 0; i < shapes.size(); ++i) {
                    (*grads)[i].assign(data[i].size(), 0.0);
                    if (g.has_grad(leaves[i])) {
                        auto gs = g.grad(leaves[i]);
                        (*grads)[i].assign(gs.begin(), gs.end());
                    }
                }
            }
            return out;
        };

        std::vector<std::vector<double>> ad;
        eval(data, true, &ad);

        std::vector<size_t> which = check_inputs;
        if (which.empty()) {
            for (size_t i = 0; i < shapes.size(); ++i) which.push_back(i);
        }
        for (size_t i : which) {
            for (size_t j = 0; j < data[i].size(); ++j) {
                const double keep = data[i][j];
                data[i][j] = keep + step;
                const double up = eval(data, false, nullptr);
                data[i][j] = keep - step;
                const double dn = eval(data, false, nullptr);
                data[i][j] = keep;
                const double fd = (up - dn) / (2.0 * step);
                const double rel = std::fabs(ad[i][j] - fd) / (std::fabs(fd) + 1e-8);
                INFO("input ", i, " element ", j, " ad=", ad[i][j], " fd=", fd);
                CHECK(rel < tol);
            }
        }
    }
};

// Projects a matrix output to a scalar with fixed pseudo-random weights.
NodeId project(Graph<double> &g, NodeId out, uint64_t seed = 99) {
    Rng rng(seed);
    std::vector<double> w(g.size(out));
    for (double &v : w) v = rng.normal(0.0, 1.0);
    return g.sum(g.mul(out, g.constant(g.rows(out), g.cols(out), std::move(w))));
}

}  // namespace

TEST_CASE("gradients match central finite differences for every op") {
    SUBCASE("add") {
        FdCheck c;
        c.shapes = {{3, 4}, {3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.add(in[0], in[1]));
        };
        c.run();
    }
    SUBCASE("add_bias") {
        FdCheck c;
        c.shapes = {{3, 4}, {1, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.add_bias(in[0], in[1]));
        };
        c.run();
    }
    SUBCASE("mul") {
        FdCheck c;
        c.shapes = {{3, 4}, {3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.mul(in[0], in[1]));
        };
        c.run();
    }
    SUBCASE("scale") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.scale(in[0], -1.7));
        };
        c.run();
    }
    SUBCASE("matmul") {
        FdCheck c;
        c.shapes = {{3, 4}, {4, 2}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.matmul(in[0], in[1]));
        };
        c.run();
    }
    SUBCASE("transpose") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.transpose(in[0]));
        };
        c.run();
    }
    SUBCASE("gather_rows") {
        FdCheck c;
        c.shapes = {{5, 3}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.gather_rows(in[0], {4, 0, 2, 0}));
        };
        c.run();
    }
    SUBCASE("concat_cols") {
        FdCheck c;
        c.shapes = {{3, 2}, {3, 3}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            std::vector<NodeId> parts{in[0], in[1]};
            return project(g, g.concat_cols(parts));
        };
        c.run();
    }
    SUBCASE("concat_rows") {
        FdCheck c;
        c.shapes = {{2, 4}, {3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            std::vector<NodeId> parts{in[0], in[1]};
            return project(g, g.concat_rows(parts));
        };
        c.run();
    }
    SUBCASE("slice_cols") {
        FdCheck c;
        c.shapes = {{3, 5}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.slice_cols(in[0], 1, 3));
        };
        c.run();
    }
    SUBCASE("slice_rows") {
        FdCheck c;
        c.shapes = {{5, 3}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.slice_rows(in[0], 2, 2));
        };
        c.run();
    }
    SUBCASE("softmax") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.softmax(in[0]));
        };
        c.run();
    }
    SUBCASE("causal_softmax") {
        FdCheck c;
        c.shapes = {{4, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.causal_softmax(in[0]));
        };
        c.run();
    }
    SUBCASE("layer_norm") {
        FdCheck c;
        c.shapes = {{3, 4}, {1, 4}, {1, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.layer_norm(in[0], in[1], in[2]));
        };
        c.run();
    }
    SUBCASE("tanh") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.tanh(in[0]));
        };
        c.run();
    }
    SUBCASE("sigmoid") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.sigmoid(in[0]));
        };
        c.run();
    }
    SUBCASE("gelu") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return project(g, g.gelu(in[0]));
        };
        c.run();
    }
    SUBCASE("cross_entropy") {
        FdCheck c;
        c.shapes = {{3, 5}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return g.cross_entropy(in[0], {1, 4, 0}, {1, 0, 1});
        };
        c.run();
    }
    SUBCASE("soft_cross_entropy") {
        FdCheck c;
        c.shapes = {{3, 5}, {3, 5}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            // second input acts as a (not necessarily normalized) target
            return g.soft_cross_entropy(in[0], g.mul(in[1], in[1]));
        };
        c.run();
    }
    SUBCASE("sum") {
        FdCheck c;
        c.shapes = {{3, 4}};
        c.build = [](Graph<double> &g, const std::vector<NodeId> &in) {
            return g.sum(g.mul(in[0], in[0]));
        };
        c.run();
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    Graph<double> g;
    NodeId x = g.constant(1, 2, {0.0, 0.0});
    NodeId s = g.softmax(x);
    CHECK(g.value(s)[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.value(s)[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("cross entropy closed form on a confident logit row") {
    Graph<double> g;
    NodeId x = g.constant(1, 2, {10.0, -10.0});
    NodeId loss = g.cross_entropy(x, {0}, {1});
    CHECK(g.value(loss)[0] == doctest::Approx(std::log(1.0 + std::exp(-20.0))).epsilon(1e-9));
}

TEST_CASE("loss = sum(x) propagates an all-ones gradient") {
    Graph<double> g;
    std::vector<double> xv{1.0, -2.0, 3.0, 0.5};
    NodeId x = g.leaf(2, 2, xv.data(), true);
    g.backward(g.sum(x));
    for (double v : g.grad(x)) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("loss = dot(x, y) gives dLoss/dx = y") {
    Graph<double> g;
    std::vector<double> xv{1.0, -2.0, 3.0};
    std::vector<double> yv{0.5, 4.0, -1.0};
    NodeId x = g.leaf(1, 3, xv.data(), true);
    NodeId y = g.leaf(1, 3, yv.data(), true);
    g.backward(g.sum(g.mul(x, y)));
    auto gx = g.grad(x);
    for (size_t i = 0; i < yv.size(); ++i) CHECK(gx[i] == doctest::Approx(yv[i]));
}

TEST_CASE("backward on a consumed tape throws") {
    Graph<double> g;
    NodeId x = g.constant(1, 1, {2.0});
    NodeId s = g.scale(x, 2.0);
    g.backward(s);
    CHECK_THROWS_AS(g.backward(s), std::logic_error);
}

TEST_CASE("backward is bit-deterministic across identical tapes") {
    auto run = [](std::vector<double> &grad_out) {
        Rng rng(123);
        std::vector<double> a(12), b(12);
        for (auto &v : a) v = rng.normal(0.0, 1.0);
        for (auto &v : b) v = rng.normal(0.0, 1.0);
        Graph<double> g;
        NodeId an = g.leaf(3, 4, a.data(), true);
        NodeId bn = g.leaf(4, 3, b.data(), true);
        NodeId out = g.tanh(g.matmul(an, bn));
        g.backward(g.sum(out));
        auto gs = g.grad(an);
        grad_out.assign(gs.begin(), gs.end());
    };
    std::vector<double> g1, g2;
    run(g1);
    run(g2);
    REQUIRE(g1.size() == g2.size());
    for (size_t i = 0; i < g1.size(); ++i) {
        CHECK(std::memcmp(&g1[i], &g2[i], sizeof(double)) == 0);
    }
}

TEST_CASE("shape mismatches raise errors naming the op") {
    Graph<double> g;
    NodeId a = g.constant(2, 3, std::vector<double>(6, 0.0));
    NodeId b = g.constant(3, 2, std::vector<double>(6, 0.0));
    CHECK_THROWS_WITH_AS(g.add(a, b), doctest::Contains("add"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(g.matmul(a, a), doctest::Contains("matmul"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(g.causal_softmax(b), doctest::Contains("square"), std::invalid_argument);
    CHECK_THROWS_AS(g.softmax(g.constant(0, 0, {})), std::invalid_argument);
}

TEST_CASE("interior gradient capture returns value and gradient") {
    Graph<double> g;
    std::vector<double> x{0.3, -0.2, 0.5, 1.0};
    NodeId xn = g.leaf(2, 2, x.data(), true);
    NodeId sm = g.causal_softmax(xn);
    g.set_capture(sm, 3, 1);
    g.backward(g.cross_entropy(sm, {0, 1}, {1, 1}));
    REQUIRE(g.captures().size() == 1);
    const auto &cap = g.captures()[0];
    CHECK(cap.layer == 3);
    CHECK(cap.head == 1);
    CHECK(cap.rows == 2);
    CHECK(cap.cols == 2);
    CHECK(cap.value.size() == 4);
    CHECK(cap.gradient.size() == 4);
    // row 0 of a causal softmax is the lone key with probability 1
    CHECK(cap.value[0] == doctest::Approx(1.0));
}
