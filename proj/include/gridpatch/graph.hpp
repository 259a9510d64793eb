#pragma once

// Reverse-mode differentiation over a recorded list of dense tensor operations.
//
// Nodes are appended in evaluation order, so inputs always refer to earlier
// nodes and a single reverse sweep visits every node once. Shape rules:
//
//   matmul        [m,k] x [k,n] -> [m,n]
//   add           same shapes, or [..,n] + [n] (bias over the last axis)
//   mul           same shapes
//   relu/gelu/tanh/scale   elementwise
//   softmax       over the last axis
//   layer_norm    x [..,n], gain [n], bias [n]; normalizes the last axis
//   conv1d        x [L,cin], w [k,cin,cout], b [cout] -> [L,cout], "same" padding
//   maxpool1d     [L,c] -> [ceil(L/2),c], window {2i-1,2i,2i+1}, stride 2
//   mse_loss      two equal shapes -> [1]
//   transpose     [m,n] -> [n,m]
//   concat_cols   [m,a],[m,b],... -> [m,a+b+...]
//   slice_cols    [m,n] -> [m,end-begin]
//   gather_rows   [m,n] -> [|index|,n]
//   scatter_rows  base [m,n], rows [u,n] -> base with rows at index replaced
//   mean_rows     [m,n] -> [m,n], every row the column mean
//   sum           any -> [1]

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gridpatch/tensor.hpp"

namespace gridpatch {

using NodeId = std::size_t;

enum class OpKind {
    leaf,
    matmul,
    add,
    mul,
    relu,
    gelu,
    tanh,
    softmax,
    layer_norm,
    conv1d,
    maxpool1d,
    mse_loss,
    transpose,
    scale,
    concat_cols,
    slice_cols,
    gather_rows,
    scatter_rows,
    mean_rows,
    sum,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::mul: return "elementwise-mul";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::tanh: return "tanh";
        case OpKind::softmax: return "softmax-last-axis";
        case OpKind::layer_norm: return "layer-norm";
        case OpKind::conv1d: return "conv1d";
        case OpKind::maxpool1d: return "maxpool1d-stride2";
        case OpKind::mse_loss: return "mse-loss";
        case OpKind::transpose: return "transpose";
        case OpKind::scale: return "scale";
        case OpKind::concat_cols: return "concat-cols";
        case OpKind::slice_cols: return "slice-cols";
        case OpKind::gather_rows: return "gather-rows";
        case OpKind::scatter_rows: return "scatter-rows";
        case OpKind::mean_rows: return "mean-rows";
        case OpKind::sum: return "sum";
    }
    return "unknown";
}

struct OpAttrs {
    double scalar = 1.0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> index;
};

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
inline MutMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
    return MutMap(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] inline void shape_fail(OpKind k, const std::vector<const Tensor*>& in, const std::string& why) {
    std::string msg = std::string(op_name(k)) + ": " + why + " (shapes";
    for (const auto* t : in) msg += " " + to_string(t->shape());
    msg += ")";
    throw ShapeError(msg);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

inline std::size_t pool_len(std::size_t len) { return (len + 1) / 2; }

}  // namespace detail

/// Gradients of a scalar loss with respect to the trainable leaves of a graph.
class Gradients {
public:
    const Tensor& at(NodeId id) const {
        auto it = grads_.find(id);
        if (it == grads_.end()) throw std::out_of_range("gradients: node " + std::to_string(id) + " is not a trainable leaf");
        return it->second;
    }
    bool contains(NodeId id) const { return grads_.count(id) != 0; }
    std::size_t size() const { return grads_.size(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    friend class Graph;
    std::map<NodeId, Tensor> grads_;
};

class Graph {
public:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<NodeId> inputs;
        Tensor value;
        OpAttrs attrs;
        bool trainable = false;
        bool requires_grad = false;
        std::string name;
        std::vector<double> aux;
        std::vector<std::size_t> iaux;
    };

    NodeId parameter(Tensor value, std::string name = {}) { return push_leaf(std::move(value), true, std::move(name)); }
    NodeId constant(Tensor value, std::string name = {}) { return push_leaf(std::move(value), false, std::move(name)); }

    /// Records one operation and evaluates it eagerly.
    NodeId apply(OpKind kind, const std::vector<NodeId>& inputs, OpAttrs attrs = {});

    NodeId matmul(NodeId a, NodeId b) { return apply(OpKind::matmul, {a, b}); }
    NodeId add(NodeId a, NodeId b) { return apply(OpKind::add, {a, b}); }
    NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
    NodeId mul(NodeId a, NodeId b) { return apply(OpKind::mul, {a, b}); }
    NodeId relu(NodeId a) { return apply(OpKind::relu, {a}); }
    NodeId gelu(NodeId a) { return apply(OpKind::gelu, {a}); }
    NodeId tanh(NodeId a) { return apply(OpKind::tanh, {a}); }
    NodeId softmax(NodeId a) { return apply(OpKind::softmax, {a}); }
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias) { return apply(OpKind::layer_norm, {x, gain, bias}); }
    NodeId conv1d(NodeId x, NodeId w, NodeId b) { return apply(OpKind::conv1d, {x, w, b}); }
    NodeId maxpool1d(NodeId x) { return apply(OpKind::maxpool1d, {x}); }
    NodeId mse_loss(NodeId pred, NodeId target) { return apply(OpKind::mse_loss, {pred, target}); }
    NodeId transpose(NodeId a) { return apply(OpKind::transpose, {a}); }
    NodeId scale(NodeId a, double s) { return apply(OpKind::scale, {a}, OpAttrs{.scalar = s}); }
    NodeId concat_cols(const std::vector<NodeId>& parts) { return apply(OpKind::concat_cols, parts); }
    NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end) {
        return apply(OpKind::slice_cols, {a}, OpAttrs{.begin = begin, .end = end});
    }
    NodeId gather_rows(NodeId a, std::vector<std::size_t> index) {
        return apply(OpKind::gather_rows, {a}, OpAttrs{.index = std::move(index)});
    }
    NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end) {
        std::vector<std::size_t> idx;
        for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
        return gather_rows(a, std::move(idx));
    }
    NodeId scatter_rows(NodeId base, NodeId rows, std::vector<std::size_t> index) {
        return apply(OpKind::scatter_rows, {base, rows}, OpAttrs{.index = std::move(index)});
    }
    NodeId mean_rows(NodeId a) { return apply(OpKind::mean_rows, {a}); }
    NodeId sum(NodeId a) { return apply(OpKind::sum, {a}); }

    const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    const Node& node(NodeId id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar node. Every trainable leaf gets an entry,
    /// zero-filled when the loss does not depend on it.
    Gradients backward(NodeId loss) const;

private:
    NodeId push_leaf(Tensor value, bool trainable, std::string name) {
        Node n;
        n.kind = OpKind::leaf;
        n.value = std::move(value);
        n.trainable = trainable;
        n.requires_grad = trainable;
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    void forward(Node& n);
    void backprop(const Node& n, const Tensor& gy, std::vector<Tensor>& grads, std::vector<bool>& has) const;

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------

inline NodeId Graph::apply(OpKind kind, const std::vector<NodeId>& inputs, OpAttrs attrs) {
    if (kind == OpKind::leaf) throw std::invalid_argument("apply: use parameter() or constant() for leaves");
    for (auto id : inputs)
        if (id >= nodes_.size()) throw std::out_of_range(std::string(op_name(kind)) + ": unknown input node " + std::to_string(id));
    Node n;
    n.kind = kind;
    n.inputs = inputs;
    n.attrs = std::move(attrs);
    for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    forward(n);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

inline void Graph::forward(Node& n) {
    using detail::as_mat;
    std::vector<const Tensor*> in;
    for (auto id : n.inputs) in.push_back(&nodes_[id].value);
    auto expect_arity = [&](std::size_t k) {
        if (in.size() != k)
            detail::shape_fail(n.kind, in, "expected " + std::to_string(k) + " inputs, got " + std::to_string(in.size()));
    };
    auto expect_rank2 = [&](const Tensor& t) {
        if (t.rank() != 2) detail::shape_fail(n.kind, in, "expected a rank-2 operand");
    };

    switch (n.kind) {
        case OpKind::leaf: break;
        case OpKind::matmul: {
            expect_arity(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            expect_rank2(a);
            expect_rank2(b);
            if (a.dim(1) != b.dim(0)) detail::shape_fail(n.kind, in, "inner dimensions differ");
            Tensor out(Shape{a.dim(0), b.dim(1)});
            as_mat(out, a.dim(0), b.dim(1)).noalias() = as_mat(a, a.dim(0), a.dim(1)) * as_mat(b, b.dim(0), b.dim(1));
            n.value = std::move(out);
            break;
        }
        case OpKind::add: {
            expect_arity(2);
            const Tensor& a = *in[0];
            const Tensor& b = *in[1];
            Tensor out = a;
            if (a.shape() == b.shape()) {
                for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
            } else if (b.rank() == 1 && b.size() == a.cols()) {
                const std::size_t c = a.cols();
                for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
            } else {
                detail::shape_fail(n.kind, in, "operands neither equal nor bias over the last axis");
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::mul: {
            expect_arity(2);
            if (in[0]->shape() != in[1]->shape()) detail::shape_fail(n.kind, in, "shapes differ");
            Tensor out = *in[0];
            for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
            n.value = std::move(out);
            break;
        }
        case OpKind::relu:
        case OpKind::gelu:
        case OpKind::tanh:
        case OpKind::scale: {
            expect_arity(1);
            Tensor out = *in[0];
            for (auto& v : out.values()) {
                switch (n.kind) {
                    case OpKind::relu: v = v > 0.0 ? v : 0.0; break;
                    case OpKind::gelu: v = detail::gelu(v); break;
                    case OpKind::tanh: v = std::tanh(v); break;
                    default: v *= n.attrs.scalar; break;
                }
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::softmax: {
            expect_arity(1);
            Tensor out = *in[0];
            const std::size_t c = out.cols();
            for (std::size_t r = 0; r < out.rows(); ++r) {
                double* row = out.data() + r * c;
                const double mx = *std::max_element(row, row + c);
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    s += row[j];
                }
                for (std::size_t j = 0; j < c; ++j) row[j] /= s;
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::layer_norm: {
            expect_arity(3);
            const Tensor& x = *in[0];
            const std::size_t c = x.cols();
            if (in[1]->rank() != 1 || in[1]->size() != c || in[2]->rank() != 1 || in[2]->size() != c)
                detail::shape_fail(n.kind, in, "gain and bias must be vectors over the last axis");
            Tensor out(x.shape());
            n.aux.assign(x.size() + x.rows(), 0.0);  // normalized values, then per-row 1/std
            for (std::size_t r = 0; r < x.rows(); ++r) {
                const double* row = x.data() + r * c;
                double mean = 0.0;
                for (std::size_t j = 0; j < c; ++j) mean += row[j];
                mean /= static_cast<double>(c);
                double var = 0.0;
                for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
                var /= static_cast<double>(c);
                const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
                n.aux[x.size() + r] = rstd;
                for (std::size_t j = 0; j < c; ++j) {
                    const double xhat = (row[j] - mean) * rstd;
                    n.aux[r * c + j] = xhat;
                    out[r * c + j] = xhat * (*in[1])[j] + (*in[2])[j];
                }
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::conv1d: {
            expect_arity(3);
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const Tensor& b = *in[2];
            expect_rank2(x);
            if (w.rank() != 3 || w.dim(1) != x.dim(1) || b.rank() != 1 || b.size() != w.dim(2))
                detail::shape_fail(n.kind, in, "weight must be [k,cin,cout] and bias [cout]");
            const std::size_t len = x.dim(0), cin = x.dim(1), k = w.dim(0), cout = w.dim(2);
            const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
            // im2col, kept for the backward pass
            n.aux.assign(len * k * cin, 0.0);
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t j = 0; j < k; ++j) {
                    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
                    if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                    std::copy_n(x.data() + static_cast<std::size_t>(src) * cin, cin, n.aux.data() + t * k * cin + j * cin);
                }
            Tensor out(Shape{len, cout});
            detail::ConstMap cols(n.aux.data(), static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(k * cin));
            as_mat(out, len, cout).noalias() = cols * as_mat(w, k * cin, cout);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % cout];
            n.value = std::move(out);
            break;
        }
        case OpKind::maxpool1d: {
            expect_arity(1);
            const Tensor& x = *in[0];
            expect_rank2(x);
            const std::size_t len = x.dim(0), c = x.dim(1), olen = detail::pool_len(len);
            Tensor out(Shape{olen, c});
            n.iaux.assign(olen * c, 0);
            for (std::size_t i = 0; i < olen; ++i)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t lo = 2 * i == 0 ? 0 : 2 * i - 1;
                    const std::size_t hi = std::min(len - 1, 2 * i + 1);
                    std::size_t best = lo;
                    for (std::size_t t = lo + 1; t <= hi; ++t)
                        if (x(t, ch) > x(best, ch)) best = t;
                    out(i, ch) = x(best, ch);
                    n.iaux[i * c + ch] = best * c + ch;
                }
            n.value = std::move(out);
            break;
        }
        case OpKind::mse_loss: {
            expect_arity(2);
            if (in[0]->shape() != in[1]->shape()) detail::shape_fail(n.kind, in, "prediction and target shapes differ");
            double s = 0.0;
            for (std::size_t i = 0; i < in[0]->size(); ++i) {
                const double d = (*in[0])[i] - (*in[1])[i];
                s += d * d;
            }
            n.value = Tensor::scalar(s / static_cast<double>(in[0]->size()));
            break;
        }
        case OpKind::transpose: {
            expect_arity(1);
            expect_rank2(*in[0]);
            const std::size_t r = in[0]->dim(0), c = in[0]->dim(1);
            Tensor out(Shape{c, r});
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) out(j, i) = (*in[0])(i, j);
            n.value = std::move(out);
            break;
        }
        case OpKind::concat_cols: {
            if (in.empty()) detail::shape_fail(n.kind, in, "no inputs");
            std::size_t total = 0;
            for (const auto* t : in) {
                expect_rank2(*t);
                if (t->dim(0) != in[0]->dim(0)) detail::shape_fail(n.kind, in, "row counts differ");
                total += t->dim(1);
            }
            const std::size_t rows = in[0]->dim(0);
            Tensor out(Shape{rows, total});
            std::size_t off = 0;
            for (const auto* t : in) {
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy_n(t->data() + r * t->dim(1), t->dim(1), out.data() + r * total + off);
                off += t->dim(1);
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::slice_cols: {
            expect_arity(1);
            expect_rank2(*in[0]);
            const auto& a = n.attrs;
            if (a.begin >= a.end || a.end > in[0]->dim(1)) detail::shape_fail(n.kind, in, "column range out of bounds");
            const std::size_t rows = in[0]->dim(0), w = a.end - a.begin;
            Tensor out(Shape{rows, w});
            for (std::size_t r = 0; r < rows; ++r)
                std::copy_n(in[0]->data() + r * in[0]->dim(1) + a.begin, w, out.data() + r * w);
            n.value = std::move(out);
            break;
        }
        case OpKind::gather_rows: {
            expect_arity(1);
            expect_rank2(*in[0]);
            const auto& idx = n.attrs.index;
            if (idx.empty()) detail::shape_fail(n.kind, in, "empty row index");
            const std::size_t c = in[0]->dim(1);
            Tensor out(Shape{idx.size(), c});
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (idx[i] >= in[0]->dim(0)) detail::shape_fail(n.kind, in, "row index out of range");
                std::copy_n(in[0]->data() + idx[i] * c, c, out.data() + i * c);
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::scatter_rows: {
            expect_arity(2);
            expect_rank2(*in[0]);
            expect_rank2(*in[1]);
            const auto& idx = n.attrs.index;
            if (in[1]->dim(0) != idx.size() || in[1]->dim(1) != in[0]->dim(1))
                detail::shape_fail(n.kind, in, "rows must be [|index|, cols of base]");
            Tensor out = *in[0];
            std::vector<bool> seen(out.dim(0), false);
            const std::size_t c = out.dim(1);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (idx[i] >= out.dim(0) || seen[idx[i]]) detail::shape_fail(n.kind, in, "row index out of range or repeated");
                seen[idx[i]] = true;
                std::copy_n(in[1]->data() + i * c, c, out.data() + idx[i] * c);
            }
            n.value = std::move(out);
            break;
        }
        case OpKind::mean_rows: {
            expect_arity(1);
            expect_rank2(*in[0]);
            const std::size_t r = in[0]->dim(0), c = in[0]->dim(1);
            std::vector<double> mean(c, 0.0);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) mean[j] += (*in[0])(i, j);
            for (auto& m : mean) m /= static_cast<double>(r);
            Tensor out(Shape{r, c});
            for (std::size_t i = 0; i < r; ++i) std::copy(mean.begin(), mean.end(), out.data() + i * c);
            n.value = std::move(out);
            break;
        }
        case OpKind::sum: {
            expect_arity(1);
            double s = 0.0;
            for (double v : in[0]->values()) s += v;
            n.value = Tensor::scalar(s);
            break;
        }
    }
}

inline void Graph::backprop(const Node& n, const Tensor& gy, std::vector<Tensor>& grads, std::vector<bool>& has) const {
    using detail::as_mat;
    auto acc = [&](std::size_t slot) -> Tensor* {
        const NodeId id = n.inputs[slot];
        if (!nodes_[id].requires_grad) return nullptr;
        if (!has[id]) {
            grads[id] = Tensor(nodes_[id].value.shape());
            has[id] = true;
        }
        return &grads[id];
    };
    const auto& x0 = nodes_[n.inputs.empty() ? 0 : n.inputs[0]].value;

    switch (n.kind) {
        case OpKind::leaf: break;
        case OpKind::matmul: {
            const Tensor& a = nodes_[n.inputs[0]].value;
            const Tensor& b = nodes_[n.inputs[1]].value;
            const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
            if (Tensor* ga = acc(0)) as_mat(*ga, m, k).noalias() += as_mat(gy, m, p) * as_mat(b, k, p).transpose();
            if (Tensor* gb = acc(1)) as_mat(*gb, k, p).noalias() += as_mat(a, m, k).transpose() * as_mat(gy, m, p);
            break;
        }
        case OpKind::add: {
            if (Tensor* ga = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i];
            if (Tensor* gb = acc(1)) {
                const std::size_t c = gb->size();
                for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i % c] += gy[i];
            }
            break;
        }
        case OpKind::mul: {
            const Tensor& a = nodes_[n.inputs[0]].value;
            const Tensor& b = nodes_[n.inputs[1]].value;
            if (Tensor* ga = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * b[i];
            if (Tensor* gb = acc(1))
                for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * a[i];
            break;
        }
        case OpKind::relu:
            if (Tensor* g = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += x0[i] > 0.0 ? gy[i] : 0.0;
            break;
        case OpKind::gelu:
            if (Tensor* g = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * detail::gelu_grad(x0[i]);
            break;
        case OpKind::tanh:
            if (Tensor* g = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * (1.0 - n.value[i] * n.value[i]);
            break;
        case OpKind::scale:
            if (Tensor* g = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i] * n.attrs.scalar;
            break;
        case OpKind::softmax:
            if (Tensor* g = acc(0)) {
                const std::size_t c = gy.cols();
                for (std::size_t r = 0; r < gy.rows(); ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * n.value[r * c + j];
                    for (std::size_t j = 0; j < c; ++j) (*g)[r * c + j] += n.value[r * c + j] * (gy[r * c + j] - dot);
                }
            }
            break;
        case OpKind::layer_norm: {
            const Tensor& gain = nodes_[n.inputs[1]].value;
            const std::size_t c = gy.cols(), rows = gy.rows(), total = gy.size();
            if (Tensor* gx = acc(0)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const double rstd = n.aux[total + r];
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxhat = gy[r * c + j] * gain[j];
                        m1 += dxhat;
                        m2 += dxhat * n.aux[r * c + j];
                    }
                    m1 /= static_cast<double>(c);
                    m2 /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxhat = gy[r * c + j] * gain[j];
                        (*gx)[r * c + j] += rstd * (dxhat - m1 - n.aux[r * c + j] * m2);
                    }
                }
            }
            if (Tensor* gg = acc(1))
                for (std::size_t i = 0; i < total; ++i) (*gg)[i % c] += gy[i] * n.aux[i];
            if (Tensor* gb = acc(2))
                for (std::size_t i = 0; i < total; ++i) (*gb)[i % c] += gy[i];
            break;
        }
        case OpKind::conv1d: {
            const Tensor& w = nodes_[n.inputs[1]].value;
            const std::size_t len = x0.dim(0), cin = x0.dim(1), k = w.dim(0), cout = w.dim(2);
            const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
            detail::ConstMap cols(n.aux.data(), static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(k * cin));
            if (Tensor* gx = acc(0)) {
                detail::RowMat gcols = as_mat(gy, len, cout) * as_mat(w, k * cin, cout).transpose();
                for (std::size_t t = 0; t < len; ++t)
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - pad;
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
                        for (std::size_t c = 0; c < cin; ++c)
                            (*gx)[static_cast<std::size_t>(src) * cin + c] += gcols(static_cast<Eigen::Index>(t),
                                                                                    static_cast<Eigen::Index>(j * cin + c));
                    }
            }
            if (Tensor* gw = acc(1)) as_mat(*gw, k * cin, cout).noalias() += cols.transpose() * as_mat(gy, len, cout);
            if (Tensor* gb = acc(2))
                for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i % cout] += gy[i];
            break;
        }
        case OpKind::maxpool1d:
            if (Tensor* g = acc(0))
                for (std::size_t i = 0; i < gy.size(); ++i) (*g)[n.iaux[i]] += gy[i];
            break;
        case OpKind::mse_loss: {
            const Tensor& p = nodes_[n.inputs[0]].value;
            const Tensor& t = nodes_[n.inputs[1]].value;
            const double f = 2.0 * gy[0] / static_cast<double>(p.size());
            if (Tensor* gp = acc(0))
                for (std::size_t i = 0; i < p.size(); ++i) (*gp)[i] += f * (p[i] - t[i]);
            if (Tensor* gt = acc(1))
                for (std::size_t i = 0; i < p.size(); ++i) (*gt)[i] -= f * (p[i] - t[i]);
            break;
        }
        case OpKind::transpose:
            if (Tensor* g = acc(0)) {
                const std::size_t r = x0.dim(0), c = x0.dim(1);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += gy(j, i);
            }
            break;
        case OpKind::concat_cols: {
            const std::size_t rows = gy.dim(0), total = gy.dim(1);
            std::size_t off = 0;
            for (std::size_t s = 0; s < n.inputs.size(); ++s) {
                const std::size_t w = nodes_[n.inputs[s]].value.dim(1);
                if (Tensor* g = acc(s))
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < w; ++j) (*g)(r, j) += gy[r * total + off + j];
                off += w;
            }
            break;
        }
        case OpKind::slice_cols:
            if (Tensor* g = acc(0)) {
                const std::size_t w = n.attrs.end - n.attrs.begin;
                for (std::size_t r = 0; r < gy.dim(0); ++r)
                    for (std::size_t j = 0; j < w; ++j) (*g)(r, n.attrs.begin + j) += gy(r, j);
            }
            break;
        case OpKind::gather_rows:
            if (Tensor* g = acc(0)) {
                const std::size_t c = gy.dim(1);
                for (std::size_t i = 0; i < n.attrs.index.size(); ++i)
                    for (std::size_t j = 0; j < c; ++j) (*g)(n.attrs.index[i], j) += gy(i, j);
            }
            break;
        case OpKind::scatter_rows: {
            const std::size_t c = gy.dim(1);
            if (Tensor* gb = acc(0)) {
                std::vector<bool> replaced(gy.dim(0), false);
                for (auto i : n.attrs.index) replaced[i] = true;
                for (std::size_t r = 0; r < gy.dim(0); ++r)
                    if (!replaced[r])
                        for (std::size_t j = 0; j < c; ++j) (*gb)(r, j) += gy(r, j);
            }
            if (Tensor* gr = acc(1))
                for (std::size_t i = 0; i < n.attrs.index.size(); ++i)
                    for (std::size_t j = 0; j < c; ++j) (*gr)(i, j) += gy(n.attrs.index[i], j);
            break;
        }
        case OpKind::mean_rows:
            if (Tensor* g = acc(0)) {
                const std::size_t r = gy.dim(0), c = gy.dim(1);
                std::vector<double> colsum(c, 0.0);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) colsum[j] += gy(i, j);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += colsum[j] / static_cast<double>(r);
            }
            break;
        case OpKind::sum:
            if (Tensor* g = acc(0))
                for (auto& v : g->values()) v += gy[0];
            break;
    }
}

inline Gradients Graph::backward(NodeId loss) const {
    if (loss >= nodes_.size()) throw std::out_of_range("backward: unknown loss node");
    if (nodes_[loss].value.size() != 1)
        throw ShapeError("backward: loss node has non-scalar shape " + to_string(nodes_[loss].value.shape()));

    std::vector<Tensor> grads(loss + 1, Tensor{});
    std::vector<bool> has(loss + 1, false);
    if (nodes_[loss].requires_grad) {
        grads[loss] = Tensor::scalar(1.0);
        has[loss] = true;
    }
    for (std::size_t i = loss + 1; i-- > 0;) {
        if (!has[i] || nodes_[i].kind == OpKind::leaf) continue;
        backprop(nodes_[i], grads[i], grads, has);
        if (!nodes_[i].trainable) grads[i] = Tensor{};  // interior gradient no longer needed
    }

    Gradients out;
    for (NodeId i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].trainable) continue;
        if (i <= loss && has[i])
            out.grads_.emplace(i, std::move(grads[i]));
        else
            out.grads_.emplace(i, Tensor(nodes_[i].value.shape()));
    }
    return out;
}

}  // namespace gridpatch
