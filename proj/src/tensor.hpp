// SPDX-License-Identifier: Apache-2.0
//
// Dense 2-D tensors with reverse-mode autodiff on a flat tape. Nodes only
// reference earlier nodes, so creation order is a topological order and the
// backward pass is a single reverse sweep. Interior nodes can be flagged for
// gradient capture (used for attention matrices). Templated on the scalar
// type: float for training, double for verification paths.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sg {

using NodeId = int32_t;

enum class Op : uint8_t {
    kLeaf,
    kAdd,
    kAddBias,   // [n,m] + [1,m] broadcast over rows
    kMul,
    kScale,
    kMatmul,
    kTranspose,
    kGatherRows,  // row gather; embedding lookup is a gather on the table
    kConcatCols,
    kConcatRows,
    kSliceCols,
    kSliceRows,
    kSoftmax,         // last axis
    kCausalSoftmax,   // square; row i normalized over keys 0..i
    kLayerNorm,       // (x, gamma, beta), per-row, eps 1e-5
    kTanh,
    kSigmoid,
    kGelu,            // tanh approximation
    kCrossEntropy,    // mean masked CE over rows -> scalar
    kSoftCrossEntropy,// mean over rows of -sum(p * log_softmax(logits)) -> scalar
    kSum,             // -> scalar
};

inline const char *op_name(Op op) {
    switch (op) {
        case Op::kLeaf: return "leaf";
        case Op::kAdd: return "add";
        case Op::kAddBias: return "add_bias";
        case Op::kMul: return "mul";
        case Op::kScale: return "scale";
        case Op::kMatmul: return "matmul";
        case Op::kTranspose: return "transpose";
        case Op::kGatherRows: return "gather_rows";
        case Op::kConcatCols: return "concat_cols";
        case Op::kConcatRows: return "concat_rows";
        case Op::kSliceCols: return "slice_cols";
        case Op::kSliceRows: return "slice_rows";
        case Op::kSoftmax: return "softmax";
        case Op::kCausalSoftmax: return "causal_softmax";
        case Op::kLayerNorm: return "layer_norm";
        case Op::kTanh: return "tanh";
        case Op::kSigmoid: return "sigmoid";
        case Op::kGelu: return "gelu";
        case Op::kCrossEntropy: return "cross_entropy";
        case Op::kSoftCrossEntropy: return "soft_cross_entropy";
        case Op::kSum: return "sum";
    }
    return "?";
}

template <typename T>
struct GradCapture {
    int layer = -1;
    int head = -1;
    int rows = 0;
    int cols = 0;
    std::vector<T> value;     // forward value of the captured node
    std::vector<T> gradient;  // dLoss/dNode, same shape
};

template <typename T>
class Graph {
public:
    Graph() { nodes_.reserve(1024); }

    // --- construction -------------------------------------------------------

    NodeId leaf(int rows, int cols, const T *external, bool requires_grad) {
        Node n;
        n.op = Op::kLeaf;
        n.rows = rows;
        n.cols = cols;
        n.ext = external;
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    NodeId constant(int rows, int cols, std::vector<T> data) {
        if (static_cast<size_t>(rows) * cols != data.size()) {
            fail("constant", "data size does not match shape");
        }
        Node n;
        n.op = Op::kLeaf;
        n.rows = rows;
        n.cols = cols;
        n.data = std::move(data);
        n.needs_grad = false;
        return push(std::move(n));
    }

    NodeId scalar(T v) { return constant(1, 1, {v}); }

    NodeId add(NodeId a, NodeId b) {
        same_shape("add", a, b);
        Node n = unary(Op::kAdd, a, rows(a), cols(a));
        n.ins.push_back(b);
        n.needs_grad = n.needs_grad || needs_grad(b);
        return push(std::move(n));
    }

    NodeId add_bias(NodeId a, NodeId bias) {
        if (rows(bias) != 1 || cols(bias) != cols(a)) {
            fail("add_bias", shape_msg(a, bias));
        }
        Node n = unary(Op::kAddBias, a, rows(a), cols(a));
        n.ins.push_back(bias);
        n.needs_grad = n.needs_grad || needs_grad(bias);
        return push(std::move(n));
    }

    NodeId mul(NodeId a, NodeId b) {
        same_shape("mul", a, b);
        Node n = unary(Op::kMul, a, rows(a), cols(a));
        n.ins.push_back(b);
        n.needs_grad = n.needs_grad || needs_grad(b);
        return push(std::move(n));
    }

    NodeId scale(NodeId a, T c) {
        Node n = unary(Op::kScale, a, rows(a), cols(a));
        n.fparam = c;
        return push(std::move(n));
    }

    NodeId matmul(NodeId a, NodeId b) {
        if (cols(a) != rows(b)) {
            fail("matmul", shape_msg(a, b));
        }
        Node n = unary(Op::kMatmul, a, rows(a), cols(b));
        n.ins.push_back(b);
        n.needs_grad = n.needs_grad || needs_grad(b);
        return push(std::move(n));
    }

    NodeId transpose(NodeId a) { return push(unary(Op::kTranspose, a, cols(a), rows(a))); }

    NodeId gather_rows(NodeId a, std::vector<int> ids) {
        for (int id : ids) {
            if (id < 0 || id >= rows(a)) {
                fail("gather_rows", "row index " + std::to_string(id) + " out of range [0, " +
                                        std::to_string(rows(a)) + ")");
            }
        }
        Node n = unary(Op::kGatherRows, a, static_cast<int>(ids.size()), cols(a));
        n.iparams = std::move(ids);
        return push(std::move(n));
    }

    // Embedding lookup is a row gather on the table.
    NodeId embedding_lookup(NodeId table, std::vector<int> ids) {
        return gather_rows(table, std::move(ids));
    }

    NodeId concat_cols(std::span<const NodeId> parts) {
        if (parts.empty()) {
            fail("concat_cols", "no inputs");
        }
        int total = 0;
        for (NodeId p : parts) {
            if (rows(p) != rows(parts[0])) {
                fail("concat_cols", shape_msg(parts[0], p));
            }
            total += cols(p);
        }
        Node n = unary(Op::kConcatCols, parts[0], rows(parts[0]), total);
        for (size_t i = 1; i < parts.size(); ++i) {
            n.ins.push_back(parts[i]);
            n.needs_grad = n.needs_grad || needs_grad(parts[i]);
        }
        return push(std::move(n));
    }

    NodeId concat_rows(std::span<const NodeId> parts) {
        if (parts.empty()) {
            fail("concat_rows", "no inputs");
        }
        int total = 0;
        for (NodeId p : parts) {
            if (cols(p) != cols(parts[0])) {
                fail("concat_rows", shape_msg(parts[0], p));
            }
            total += rows(p);
        }
        Node n = unary(Op::kConcatRows, parts[0], total, cols(parts[0]));
        for (size_t i = 1; i < parts.size(); ++i) {
            n.ins.push_back(parts[i]);
            n.needs_grad = n.needs_grad || needs_grad(parts[i]);
        }
        return push(std::move(n));
    }

    NodeId slice_cols(NodeId a, int start, int len) {
        if (start < 0 || len <= 0 || start + len > cols(a)) {
            fail("slice_cols", "range [" + std::to_string(start) + ", " +
                                   std::to_string(start + len) + ") out of " +
                                   std::to_string(cols(a)) + " columns");
        }
        Node n = unary(Op::kSliceCols, a, rows(a), len);
        n.iparams = {start, len};
        return push(std::move(n));
    }

    NodeId slice_rows(NodeId a, int start, int len) {
        if (start < 0 || len <= 0 || start + len > rows(a)) {
            fail("slice_rows", "range [" + std::to_string(start) + ", " +
                                   std::to_string(start + len) + ") out of " +
                                   std::to_string(rows(a)) + " rows");
        }
        Node n = unary(Op::kSliceRows, a, len, cols(a));
        n.iparams = {start, len};
        return push(std::move(n));
    }

    NodeId softmax(NodeId a) {
        if (cols(a) <= 0) {
            fail("softmax", "empty axis");
        }
        return push(unary(Op::kSoftmax, a, rows(a), cols(a)));
    }

    NodeId causal_softmax(NodeId a) {
        if (rows(a) != cols(a)) {
            fail("causal_softmax", "matrix must be square, got " + shape_str(a));
        }
        return push(unary(Op::kCausalSoftmax, a, rows(a), cols(a)));
    }

    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta) {
        if (rows(gamma) != 1 || cols(gamma) != cols(x) || rows(beta) != 1 ||
            cols(beta) != cols(x)) {
            fail("layer_norm", shape_msg(x, gamma));
        }
        Node n = unary(Op::kLayerNorm, x, rows(x), cols(x));
        n.ins.push_back(gamma);
        n.ins.push_back(beta);
        n.needs_grad = n.needs_grad || needs_grad(gamma) || needs_grad(beta);
        return push(std::move(n));
    }

    NodeId tanh(NodeId a) { return push(unary(Op::kTanh, a, rows(a), cols(a))); }
    NodeId sigmoid(NodeId a) { return push(unary(Op::kSigmoid, a, rows(a), cols(a))); }
    NodeId gelu(NodeId a) { return push(unary(Op::kGelu, a, rows(a), cols(a))); }

    // Mean cross entropy over rows with mask[i] != 0; logits [n, vocab].
    NodeId cross_entropy(NodeId logits, std::vector<int> targets, std::vector<uint8_t> mask) {
        const int n = rows(logits);
        if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n) {
            fail("cross_entropy", "targets/mask length does not match logit rows");
        }
        int active = 0;
        for (int i = 0; i < n; ++i) {
            if (mask[i]) {
                if (targets[i] < 0 || targets[i] >= cols(logits)) {
                    fail("cross_entropy", "target id out of vocab range");
                }
                ++active;
            }
        }
        if (active == 0) {
            fail("cross_entropy", "mask excludes every row");
        }
        Node n2 = unary(Op::kCrossEntropy, logits, 1, 1);
        n2.iparams = std::move(targets);
        n2.mask = std::move(mask);
        return push(std::move(n2));
    }

    // Mean over rows of -sum_j p[i,j] * log softmax(logits)[i,j].
    NodeId soft_cross_entropy(NodeId logits, NodeId probs) {
        same_shape("soft_cross_entropy", logits, probs);
        Node n = unary(Op::kSoftCrossEntropy, logits, 1, 1);
        n.ins.push_back(probs);
        n.needs_grad = n.needs_grad || needs_grad(probs);
        return push(std::move(n));
    }

    NodeId sum(NodeId a) { return push(unary(Op::kSum, a, 1, 1)); }

    // Flags an interior node so backward() keeps its gradient (and value).
    void set_capture(NodeId id, int layer, int head) {
        node(id).capture = true;
        node(id).cap_layer = layer;
        node(id).cap_head = head;
    }

    // --- access --------------------------------------------------------------

    int rows(NodeId id) const { return node(id).rows; }
    int cols(NodeId id) const { return node(id).cols; }
    size_t size(NodeId id) const { return static_cast<size_t>(node(id).rows) * node(id).cols; }

    std::span<const T> value(NodeId id) const {
        const Node &n = node(id);
        return {n.ext ? n.ext : n.data.data(), size(id)};
    }

    std::span<const T> grad(NodeId id) const {
        const Node &n = node(id);
        if (n.grad.empty()) {
            throw std::logic_error("graph: no gradient stored for node " + std::to_string(id));
        }
        return {n.grad.data(), n.grad.size()};
    }

    bool has_grad(NodeId id) const { return !node(id).grad.empty(); }
    bool needs_grad(NodeId id) const { return node(id).needs_grad; }

    const std::vector<GradCapture<T>> &captures() const { return captures_; }

    // --- execution -----------------------------------------------------------

    // Reverse sweep from a scalar loss. May be called once per graph.
    void backward(NodeId loss) {
        if (consumed_) {
            throw std::logic_error("graph: backward called twice on a consumed tape");
        }
        consumed_ = true;
        if (rows(loss) != 1 || cols(loss) != 1) {
            fail("backward", "loss must be scalar, got " + shape_str(loss));
        }
        ensure_grad(loss);
        node(loss).grad[0] = T(1);
        const bool prof = profiling();
        for (NodeId id = loss; id >= 0; --id) {
            Node &n = node(id);
            if (!n.needs_grad || n.grad.empty() || n.op == Op::kLeaf) {
                continue;
            }
            if (prof) {
                const auto t0 = std::chrono::steady_clock::now();
                backward_node(id);
                profile_bwd_[static_cast<size_t>(n.op)] +=
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            } else {
                backward_node(id);
            }
        }
        for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
            Node &n = node(id);
            if (n.capture) {
                GradCapture<T> cap;
                cap.layer = n.cap_layer;
                cap.head = n.cap_head;
                cap.rows = n.rows;
                cap.cols = n.cols;
                cap.value.assign(value(id).begin(), value(id).end());
                if (!n.grad.empty()) {
                    cap.gradient = n.grad;
                } else {
                    cap.gradient.assign(size(id), T(0));
                }
                captures_.push_back(std::move(cap));
            }
        }
    }

private:
    struct Node {
        Op op = Op::kLeaf;
        int rows = 0;
        int cols = 0;
        std::vector<NodeId> ins;
        std::vector<T> data;       // owned forward value (empty for external leaves)
        const T *ext = nullptr;    // external leaf storage
        std::vector<T> grad;
        std::vector<T> aux;        // forward-pass values reused by backward
        std::vector<T> tcache;     // lazily cached transpose of the value
        std::vector<int> iparams;  // op-specific: ids, slice ranges, targets
        std::vector<uint8_t> mask;
        T fparam = T(0);
        bool needs_grad = false;
        bool capture = false;
        int cap_layer = -1;
        int cap_head = -1;
    };

    Node &node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    const Node &node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

    Node unary(Op op, NodeId a, int r, int c) {
        Node n;
        n.op = op;
        n.rows = r;
        n.cols = c;
        n.ins.push_back(a);
        n.needs_grad = needs_grad(a);
        return n;
    }

    NodeId push(Node &&n) {
        const NodeId id = static_cast<NodeId>(nodes_.size());
        nodes_.push_back(std::move(n));
        if (profiling()) {
            const auto t0 = std::chrono::steady_clock::now();
            forward_node(id);
            profile_fwd_[static_cast<size_t>(nodes_[static_cast<size_t>(id)].op)] +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } else {
            forward_node(id);
        }
        return id;
    }

public:
    // Aggregate per-op timings across graphs, enabled by SG_PROFILE=1.
    static bool profiling() {
        static const bool on = [] {
            const char *e = std::getenv("SG_PROFILE");
            return e && e[0] == '1';
        }();
        return on;
    }

    static void dump_profile() {
        if (!profiling()) return;
        std::fprintf(stderr, "%-18s %10s %10s\n", "op", "fwd_ms", "bwd_ms");
        for (size_t i = 0; i < kOpCount; ++i) {
            if (profile_fwd_[i] == 0.0 && profile_bwd_[i] == 0.0) continue;
            std::fprintf(stderr, "%-18s %10.2f %10.2f\n", op_name(static_cast<Op>(i)),
                         profile_fwd_[i] * 1e3, profile_bwd_[i] * 1e3);
        }
    }

private:
    static constexpr size_t kOpCount = static_cast<size_t>(Op::kSum) + 1;
    static inline double profile_fwd_[kOpCount] = {};
    static inline double profile_bwd_[kOpCount] = {};

    void ensure_grad(NodeId id) {
        Node &n = node(id);
        if (n.grad.empty()) {
            n.grad.assign(size(id), T(0));
        }
    }

    // Transposed forward value, computed once per node per backward sweep.
    // Weight leaves feeding many matmuls (LSTM steps) hit this repeatedly.
    const T *transposed_value(NodeId id) {
        Node &n = node(id);
        if (n.tcache.empty()) {
            n.tcache = transposed(value(id).data(), n.rows, n.cols);
        }
        return n.tcache.data();
    }

    [[noreturn]] static void fail(const std::string &op, const std::string &what) {
        throw std::invalid_argument("graph op " + op + ": " + what);
    }

    std::string shape_str(NodeId a) const {
        std::ostringstream os;
        os << "[" << rows(a) << "x" << cols(a) << "]";
        return os.str();
    }

    std::string shape_msg(NodeId a, NodeId b) const {
        return "incompatible shapes " + shape_str(a) + " and " + shape_str(b);
    }

    void same_shape(const char *op, NodeId a, NodeId b) {
        if (rows(a) != rows(b) || cols(a) != cols(b)) {
            fail(op, shape_msg(a, b));
        }
    }

    const T *in_data(NodeId id, size_t k) const {
        const Node &n = node(id);
        return value(n.ins[k]).data();
    }

    // --- forward kernels -------------------------------------------------

    void forward_node(NodeId id) {
        Node &n = node(id);
        if (n.op == Op::kLeaf) {
            return;
        }
        n.data.resize(size(id));
        T *out = n.data.data();
        const int R = n.rows, C = n.cols;
        switch (n.op) {
            case Op::kAdd: {
                const T *a = in_data(id, 0), *b = in_data(id, 1);
                for (size_t i = 0; i < n.data.size(); ++i) out[i] = a[i] + b[i];
                break;
            }
            case Op::kAddBias: {
                const T *a = in_data(id, 0), *b = in_data(id, 1);
                for (int i = 0; i < R; ++i) {
                    const T *arow = a + static_cast<size_t>(i) * C;
                    T *orow = out + static_cast<size_t>(i) * C;
                    for (int j = 0; j < C; ++j) orow[j] = arow[j] + b[j];
                }
                break;
            }
            case Op::kMul: {
                const T *a = in_data(id, 0), *b = in_data(id, 1);
                for (size_t i = 0; i < n.data.size(); ++i) out[i] = a[i] * b[i];
                break;
            }
            case Op::kScale: {
                const T *a = in_data(id, 0);
                const T c = n.fparam;
                for (size_t i = 0; i < n.data.size(); ++i) out[i] = a[i] * c;
                break;
            }
            case Op::kMatmul:
                matmul_kernel(out, in_data(id, 0), in_data(id, 1), R,
                              cols(n.ins[0]), C);
                break;
            case Op::kTranspose: {
                const T *a = in_data(id, 0);
                const int ar = rows(n.ins[0]), ac = cols(n.ins[0]);
                for (int i = 0; i < ar; ++i)
                    for (int j = 0; j < ac; ++j)
                        out[static_cast<size_t>(j) * ar + i] = a[static_cast<size_t>(i) * ac + j];
                break;
            }
            case Op::kGatherRows: {
                const T *a = in_data(id, 0);
                for (int i = 0; i < R; ++i) {
                    const T *src = a + static_cast<size_t>(n.iparams[i]) * C;
                    std::copy(src, src + C, out + static_cast<size_t>(i) * C);
                }
                break;
            }
            case Op::kConcatCols: {
                int off = 0;
                for (NodeId p : n.ins) {
                    const T *a = value(p).data();
                    const int pc = cols(p);
                    for (int i = 0; i < R; ++i)
                        std::copy(a + static_cast<size_t>(i) * pc,
                                  a + static_cast<size_t>(i + 1) * pc,
                                  out + static_cast<size_t>(i) * C + off);
                    off += pc;
                }
                break;
            }
            case Op::kConcatRows: {
                size_t off = 0;
                for (NodeId p : n.ins) {
                    auto v = value(p);
                    std::copy(v.begin(), v.end(), out + off);
                    off += v.size();
                }
                break;
            }
            case Op::kSliceCols: {
                const T *a = in_data(id, 0);
                const int ac = cols(n.ins[0]), start = n.iparams[0];
                for (int i = 0; i < R; ++i)
                    std::copy(a + static_cast<size_t>(i) * ac + start,
                              a + static_cast<size_t>(i) * ac + start + C,
                              out + static_cast<size_t>(i) * C);
                break;
            }
            case Op::kSliceRows: {
                const T *a = in_data(id, 0);
                std::copy(a + static_cast<size_t>(n.iparams[0]) * C,
                          a + static_cast<size_t>(n.iparams[0] + R) * C, out);
                break;
            }
            case Op::kSoftmax: {
                const T *a = in_data(id, 0);
                for (int i = 0; i < R; ++i)
                    softmax_row(out + static_cast<size_t>(i) * C,
                                a + static_cast<size_t>(i) * C, C);
                break;
            }
            case Op::kCausalSoftmax: {
                const T *a = in_data(id, 0);
                for (int i = 0; i < R; ++i) {
                    T *orow = out + static_cast<size_t>(i) * C;
                    softmax_row(orow, a + static_cast<size_t>(i) * C, i + 1);
                    for (int j = i + 1; j < C; ++j) orow[j] = T(0);
                }
                break;
            }
            case Op::kLayerNorm: {
                const T *a = in_data(id, 0), *g = in_data(id, 1), *b = in_data(id, 2);
                for (int i = 0; i < R; ++i) {
                    const T *x = a + static_cast<size_t>(i) * C;
                    T *y = out + static_cast<size_t>(i) * C;
                    T mean = T(0);
                    for (int j = 0; j < C; ++j) mean += x[j];
                    mean /= T(C);
                    T var = T(0);
                    for (int j = 0; j < C; ++j) var += (x[j] - mean) * (x[j] - mean);
                    var /= T(C);
                    const T rstd = T(1) / std::sqrt(var + T(kLnEps));
                    for (int j = 0; j < C; ++j) y[j] = (x[j] - mean) * rstd * g[j] + b[j];
                }
                break;
            }
            case Op::kTanh: {
                const T *a = in_data(id, 0);
                for (size_t i = 0; i < n.data.size(); ++i) out[i] = std::tanh(a[i]);
                break;
            }
            case Op::kSigmoid: {
                const T *a = in_data(id, 0);
                for (size_t i = 0; i < n.data.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
                break;
            }
            case Op::kGelu: {
                const T *a = in_data(id, 0);
                const T s = std::sqrt(T(2) / T(M_PI));
                n.aux.resize(n.data.size());
                for (size_t i = 0; i < n.data.size(); ++i) {
                    const T x = a[i];
                    const T t = std::tanh(s * (x + T(0.044715) * x * x * x));
                    n.aux[i] = t;
                    out[i] = T(0.5) * x * (T(1) + t);
                }
                break;
            }
            case Op::kCrossEntropy: {
                const T *lg = in_data(id, 0);
                const int nrows = rows(n.ins[0]), V = cols(n.ins[0]);
                n.aux.assign(static_cast<size_t>(nrows), T(0));
                T total = T(0);
                int active = 0;
                for (int i = 0; i < nrows; ++i) {
                    if (!n.mask[i]) continue;
                    const T *row = lg + static_cast<size_t>(i) * V;
                    const T lse = lse_row(row, V);
                    n.aux[static_cast<size_t>(i)] = lse;
                    total += lse - row[n.iparams[i]];
                    ++active;
                }
                out[0] = total / T(active);
                break;
            }
            case Op::kSoftCrossEntropy: {
                const T *lg = in_data(id, 0), *p = in_data(id, 1);
                const int nrows = rows(n.ins[0]), V = cols(n.ins[0]);
                T total = T(0);
                for (int i = 0; i < nrows; ++i) {
                    const T *row = lg + static_cast<size_t>(i) * V;
                    const T *prow = p + static_cast<size_t>(i) * V;
                    const T lse = lse_row(row, V);
                    T acc = T(0);
                    for (int j = 0; j < V; ++j) acc += prow[j] * (lse - row[j]);
                    total += acc;
                }
                out[0] = total / T(nrows);
                break;
            }
            case Op::kSum: {
                const T *a = in_data(id, 0);
                auto v = value(n.ins[0]);
                T acc = T(0);
                for (size_t i = 0; i < v.size(); ++i) acc += a[i];
                out[0] = acc;
                break;
            }
            case Op::kLeaf:
                break;
        }
    }

    // --- backward kernels --------------------------------------------------

    void backward_node(NodeId id) {
        Node &n = node(id);
        const T *go = n.grad.data();
        const int R = n.rows, C = n.cols;
        switch (n.op) {
            case Op::kAdd: {
                for (int k = 0; k < 2; ++k) {
                    if (!needs_grad(n.ins[k])) continue;
                    ensure_grad(n.ins[k]);
                    T *gi = node(n.ins[k]).grad.data();
                    for (size_t i = 0; i < n.grad.size(); ++i) gi[i] += go[i];
                }
                break;
            }
            case Op::kAddBias: {
                if (needs_grad(n.ins[0])) {
                    ensure_grad(n.ins[0]);
                    T *gi = node(n.ins[0]).grad.data();
                    for (size_t i = 0; i < n.grad.size(); ++i) gi[i] += go[i];
                }
                if (needs_grad(n.ins[1])) {
                    ensure_grad(n.ins[1]);
                    T *gb = node(n.ins[1]).grad.data();
                    for (int i = 0; i < R; ++i) {
                        const T *grow = go + static_cast<size_t>(i) * C;
                        for (int j = 0; j < C; ++j) gb[j] += grow[j];
                    }
                }
                break;
            }
            case Op::kMul: {
                for (int k = 0; k < 2; ++k) {
                    if (!needs_grad(n.ins[k])) continue;
                    ensure_grad(n.ins[k]);
                    T *gi = node(n.ins[k]).grad.data();
                    const T *other = in_data(id, static_cast<size_t>(1 - k));
                    for (size_t i = 0; i < n.grad.size(); ++i) gi[i] += go[i] * other[i];
                }
                break;
            }
            case Op::kScale: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T c = n.fparam;
                for (size_t i = 0; i < n.grad.size(); ++i) gi[i] += go[i] * c;
                break;
            }
            case Op::kMatmul: {
                const NodeId an = n.ins[0], bn = n.ins[1];
                const int K = cols(an);
                if (needs_grad(an)) {
                    ensure_grad(an);
                    // dA += dC @ B^T
                    matmul_kernel(node(an).grad.data(), go, transposed_value(bn), R, C, K,
                                  /*accumulate=*/true);
                }
                if (needs_grad(bn)) {
                    ensure_grad(bn);
                    // dB += A^T @ dC
                    matmul_kernel(node(bn).grad.data(), transposed_value(an), go, K, R, C,
                                  /*accumulate=*/true);
                }
                break;
            }
            case Op::kTranspose: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const int ar = rows(n.ins[0]), ac = cols(n.ins[0]);
                for (int i = 0; i < ar; ++i)
                    for (int j = 0; j < ac; ++j)
                        gi[static_cast<size_t>(i) * ac + j] += go[static_cast<size_t>(j) * ar + i];
                break;
            }
            case Op::kGatherRows: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                for (int i = 0; i < R; ++i) {
                    T *dst = gi + static_cast<size_t>(n.iparams[i]) * C;
                    const T *src = go + static_cast<size_t>(i) * C;
                    for (int j = 0; j < C; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::kConcatCols: {
                int off = 0;
                for (NodeId p : n.ins) {
                    const int pc = cols(p);
                    if (needs_grad(p)) {
                        ensure_grad(p);
                        T *gi = node(p).grad.data();
                        for (int i = 0; i < R; ++i) {
                            const T *src = go + static_cast<size_t>(i) * C + off;
                            T *dst = gi + static_cast<size_t>(i) * pc;
                            for (int j = 0; j < pc; ++j) dst[j] += src[j];
                        }
                    }
                    off += pc;
                }
                break;
            }
            case Op::kConcatRows: {
                size_t off = 0;
                for (NodeId p : n.ins) {
                    const size_t psz = size(p);
                    if (needs_grad(p)) {
                        ensure_grad(p);
                        T *gi = node(p).grad.data();
                        for (size_t i = 0; i < psz; ++i) gi[i] += go[off + i];
                    }
                    off += psz;
                }
                break;
            }
            case Op::kSliceCols: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const int ac = cols(n.ins[0]), start = n.iparams[0];
                for (int i = 0; i < R; ++i) {
                    const T *src = go + static_cast<size_t>(i) * C;
                    T *dst = gi + static_cast<size_t>(i) * ac + start;
                    for (int j = 0; j < C; ++j) dst[j] += src[j];
                }
                break;
            }
            case Op::kSliceRows: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data() + static_cast<size_t>(n.iparams[0]) * C;
                for (size_t i = 0; i < n.grad.size(); ++i) gi[i] += go[i];
                break;
            }
            case Op::kSoftmax:
            case Op::kCausalSoftmax: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T *out = n.data.data();
                for (int i = 0; i < R; ++i) {
                    const int span = n.op == Op::kCausalSoftmax ? i + 1 : C;
                    const T *orow = out + static_cast<size_t>(i) * C;
                    const T *grow = go + static_cast<size_t>(i) * C;
                    T *giro = gi + static_cast<size_t>(i) * C;
                    T dot = T(0);
                    for (int j = 0; j < span; ++j) dot += grow[j] * orow[j];
                    for (int j = 0; j < span; ++j) giro[j] += orow[j] * (grow[j] - dot);
                }
                break;
            }
            case Op::kLayerNorm: {
                const T *x = in_data(id, 0), *g = in_data(id, 1);
                const bool need_x = needs_grad(n.ins[0]);
                const bool need_g = needs_grad(n.ins[1]);
                const bool need_b = needs_grad(n.ins[2]);
                if (need_x) ensure_grad(n.ins[0]);
                if (need_g) ensure_grad(n.ins[1]);
                if (need_b) ensure_grad(n.ins[2]);
                for (int i = 0; i < R; ++i) {
                    const T *xr = x + static_cast<size_t>(i) * C;
                    const T *gr = go + static_cast<size_t>(i) * C;
                    T mean = T(0);
                    for (int j = 0; j < C; ++j) mean += xr[j];
                    mean /= T(C);
                    T var = T(0);
                    for (int j = 0; j < C; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= T(C);
                    const T rstd = T(1) / std::sqrt(var + T(kLnEps));
                    if (need_b) {
                        T *gb = node(n.ins[2]).grad.data();
                        for (int j = 0; j < C; ++j) gb[j] += gr[j];
                    }
                    if (need_g) {
                        T *gg = node(n.ins[1]).grad.data();
                        for (int j = 0; j < C; ++j) gg[j] += gr[j] * (xr[j] - mean) * rstd;
                    }
                    if (need_x) {
                        T *gx = node(n.ins[0]).grad.data() + static_cast<size_t>(i) * C;
                        T m1 = T(0), m2 = T(0);
                        for (int j = 0; j < C; ++j) {
                            const T xhat = (xr[j] - mean) * rstd;
                            const T dxhat = gr[j] * g[j];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= T(C);
                        m2 /= T(C);
                        for (int j = 0; j < C; ++j) {
                            const T xhat = (xr[j] - mean) * rstd;
                            gx[j] += (gr[j] * g[j] - m1 - xhat * m2) * rstd;
                        }
                    }
                }
                break;
            }
            case Op::kTanh: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T *out = n.data.data();
                for (size_t i = 0; i < n.grad.size(); ++i)
                    gi[i] += go[i] * (T(1) - out[i] * out[i]);
                break;
            }
            case Op::kSigmoid: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T *out = n.data.data();
                for (size_t i = 0; i < n.grad.size(); ++i)
                    gi[i] += go[i] * out[i] * (T(1) - out[i]);
                break;
            }
            case Op::kGelu: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T *a = in_data(id, 0);
                const T s = std::sqrt(T(2) / T(M_PI));
                for (size_t i = 0; i < n.grad.size(); ++i) {
                    const T x = a[i];
                    const T t = n.aux[i];
                    const T sech2 = T(1) - t * t;
                    const T du = s * (T(1) + T(3) * T(0.044715) * x * x);
                    gi[i] += go[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * sech2 * du);
                }
                break;
            }
            case Op::kCrossEntropy: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const T *lg = in_data(id, 0);
                const int nrows = rows(n.ins[0]), V = cols(n.ins[0]);
                int active = 0;
                for (int i = 0; i < nrows; ++i) active += n.mask[i] ? 1 : 0;
                const T g0 = go[0] / T(active);
                for (int i = 0; i < nrows; ++i) {
                    if (!n.mask[i]) continue;
                    const T *row = lg + static_cast<size_t>(i) * V;
                    T *grow = gi + static_cast<size_t>(i) * V;
                    const T lse = n.aux[static_cast<size_t>(i)];
                    for (int j = 0; j < V; ++j) grow[j] += g0 * std::exp(row[j] - lse);
                    grow[n.iparams[i]] -= g0;
                }
                break;
            }
            case Op::kSoftCrossEntropy: {
                const T *lg = in_data(id, 0), *p = in_data(id, 1);
                const int nrows = rows(n.ins[0]), V = cols(n.ins[0]);
                const T g0 = go[0] / T(nrows);
                if (needs_grad(n.ins[0])) {
                    ensure_grad(n.ins[0]);
                    T *gi = node(n.ins[0]).grad.data();
                    for (int i = 0; i < nrows; ++i) {
                        const T *row = lg + static_cast<size_t>(i) * V;
                        const T *prow = p + static_cast<size_t>(i) * V;
                        T *grow = gi + static_cast<size_t>(i) * V;
                        const T lse = lse_row(row, V);
                        T psum = T(0);
                        for (int j = 0; j < V; ++j) psum += prow[j];
                        for (int j = 0; j < V; ++j)
                            grow[j] += g0 * (psum * std::exp(row[j] - lse) - prow[j]);
                    }
                }
                if (needs_grad(n.ins[1])) {
                    ensure_grad(n.ins[1]);
                    T *gp = node(n.ins[1]).grad.data();
                    for (int i = 0; i < nrows; ++i) {
                        const T *row = lg + static_cast<size_t>(i) * V;
                        T *grow = gp + static_cast<size_t>(i) * V;
                        const T lse = lse_row(row, V);
                        for (int j = 0; j < V; ++j) grow[j] += g0 * (lse - row[j]);
                    }
                }
                break;
            }
            case Op::kSum: {
                if (!needs_grad(n.ins[0])) break;
                ensure_grad(n.ins[0]);
                T *gi = node(n.ins[0]).grad.data();
                const size_t sz = size(n.ins[0]);
                for (size_t i = 0; i < sz; ++i) gi[i] += go[0];
                break;
            }
            case Op::kLeaf:
                break;
        }
    }

    // --- numeric helpers -----------------------------------------------------

    static void softmax_row(T *out, const T *in, int span) {
        T maxv = in[0];
        for (int j = 1; j < span; ++j) maxv = std::max(maxv, in[j]);
        T sum = T(0);
        for (int j = 0; j < span; ++j) {
            out[j] = std::exp(in[j] - maxv);
            sum += out[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < span; ++j) out[j] *= inv;
    }

    static T lse_row(const T *row, int span) {
        T maxv = row[0];
        for (int j = 1; j < span; ++j) maxv = std::max(maxv, row[j]);
        T sum = T(0);
        for (int j = 0; j < span; ++j) sum += std::exp(row[j] - maxv);
        return maxv + std::log(sum);
    }

    // C (+)= A @ B, A [n,k], B [k,m]; saxpy inner loop, rows in parallel.
    // The size gate keeps small products serial: worker wake-ups cost more
    // than the arithmetic below roughly a million MACs.
    static void matmul_kernel(T *__restrict c, const T *__restrict a, const T *__restrict b,
                              int n, int k, int m, bool accumulate = false) {
        const bool big = static_cast<long long>(n) * k * m > 1048576;
#pragma omp parallel for schedule(static) if (big)
        for (int i = 0; i < n; ++i) {
            T *__restrict crow = c + static_cast<size_t>(i) * m;
            if (!accumulate) {
                for (int j = 0; j < m; ++j) crow[j] = T(0);
            }
            const T *arow = a + static_cast<size_t>(i) * k;
            for (int kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T *__restrict brow = b + static_cast<size_t>(kk) * m;
                for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    }

    static std::vector<T> transposed(const T *__restrict a, int rows, int cols) {
        std::vector<T> at(static_cast<size_t>(rows) * cols);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                at[static_cast<size_t>(j) * rows + i] = a[static_cast<size_t>(i) * cols + j];
            }
        }
        return at;
    }

    static constexpr double kLnEps = 1e-5;

    std::vector<Node> nodes_;
    std::vector<GradCapture<T>> captures_;
    bool consumed_ = false;
};

}  // namespace sg
