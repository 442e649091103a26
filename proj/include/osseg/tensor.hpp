#pragma once

// Dense 64-bit tensors and a tape-based reverse-mode autodiff graph.
//
// A Graph records every operation in insertion order; inputs always precede
// the node that consumes them, so the backward sweep is a single reverse scan.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "osseg/errors.hpp"

namespace osseg {

using Shape = std::vector<std::size_t>;

// Stand-in for -inf in additive attention biases. Softmax treats anything at or
// below kMaskThreshold as masked out.
inline constexpr double kMaskedValue = -1e30;
inline constexpr double kMaskThreshold = -1e29;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_numel(shape_)) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(m * n);
        for (const auto& row : rows) {
            if (row.size() != n) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{m, n}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Row-major element access for rank-2 tensors.
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    bool requires_grad = false;
    std::optional<std::vector<double>> grad;

   private:
    void check_shape() const {
        for (auto d : shape_) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<double> data_;
};

namespace debug {
// Negative-control hook for the gradient checker: when set, relu's backward
// rule is deliberately wrong.
inline bool corrupt_relu_backward = false;
}  // namespace debug

class Graph;

// Handle to a node in a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;
};

class Graph {
   public:
    // Receives the gradient flowing into the node's output.
    using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor t) {
        t.requires_grad = false;
        return push(std::move(t), {});
    }

    Var variable(Tensor t) {
        t.requires_grad = true;
        return push(std::move(t), {});
    }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).value.requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient of the last backward() call; all zeros for nodes the loss does
    // not depend on.
    std::span<const double> grad(Var v) const {
        const auto& t = nodes_.at(v.id).value;
        if (!t.grad) throw ContractError("no gradient recorded for node " + std::to_string(v.id));
        return *t.grad;
    }

    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool needs = false;
        for (auto id : inputs) needs = needs || nodes_[id].value.requires_grad;
        value.requires_grad = needs;
        Var v = push(std::move(value), std::move(inputs));
        if (needs) nodes_.back().backward = std::move(fn);
        return v;
    }

    // Attaches a rule to a node already recorded; used by ops whose rule reads
    // their own output.
    void set_backward(Var v, BackwardFn fn) {
        auto& n = nodes_.at(v.id);
        if (n.value.requires_grad) n.backward = std::move(fn);
    }

    // Gradient buffer of an input node, or nullptr when it does not need one.
    double* grad_buffer(std::size_t id) {
        auto& t = nodes_[id].value;
        if (!t.requires_grad) return nullptr;
        return t.grad->data();
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }

    void backward(Var loss) {
        if (loss.graph != this) throw ContractError("backward on a foreign node");
        const auto& lt = nodes_.at(loss.id).value;
        if (lt.numel() != 1) throw DimensionError("backward requires a scalar loss, got " + shape_string(lt.shape()));
        for (auto& n : nodes_) {
            if (n.value.requires_grad) {
                n.value.grad.emplace(n.value.numel(), 0.0);
            } else {
                n.value.grad.reset();
            }
        }
        if (!lt.requires_grad) return;
        (*nodes_[loss.id].value.grad)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward) n.backward(*this, *n.value.grad);
        }
    }

   private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    Var push(Tensor t, std::vector<std::size_t> inputs) {
        nodes_.push_back(Node{std::move(t), std::move(inputs), {}});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

namespace detail {

inline Graph& graph_of(Var a) {
    if (!a.graph) throw ContractError("operation on a detached Var");
    return *a.graph;
}

inline Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
    return graph_of(a);
}

// True when `suffix` equals the trailing dimensions of `full`.
inline bool is_trailing(const Shape& full, const Shape& suffix) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

}  // namespace detail

// Elementwise sum. `b` may also broadcast over the leading dimensions of `a`
// when its shape equals a's trailing dimensions.
inline Var add(Var a, Var b) {
    Graph& g = detail::graph_of(a, b);
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (!detail::is_trailing(ta.shape(), tb.shape())) {
        throw DimensionError("add: cannot broadcast " + shape_string(tb.shape()) + " onto " + shape_string(ta.shape()));
    }
    Tensor out(ta.shape());
    const std::size_t n = ta.numel(), m = tb.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = ta[i] + tb[i % m];
    return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, n, m](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (double* gb = gr.grad_buffer(ib)) {
            for (std::size_t i = 0; i < n; ++i) gb[i % m] += go[i];
        }
    });
}

// Elementwise product with the same broadcasting rule as add.
inline Var mul(Var a, Var b) {
    Graph& g = detail::graph_of(a, b);
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (!detail::is_trailing(ta.shape(), tb.shape())) {
        throw DimensionError("mul: cannot broadcast " + shape_string(tb.shape()) + " onto " + shape_string(ta.shape()));
    }
    Tensor out(ta.shape());
    const std::size_t n = ta.numel(), m = tb.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = ta[i] * tb[i % m];
    return g.record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, n, m](Graph& gr, std::span<const double> go) {
        const Tensor& va = gr.value(ia);
        const Tensor& vb = gr.value(ib);
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * vb[i % m];
        }
        if (double* gb = gr.grad_buffer(ib)) {
            for (std::size_t i = 0; i < n; ++i) gb[i % m] += go[i] * va[i];
        }
    });
}

inline Var scale(Var a, double s) {
    Graph& g = detail::graph_of(a);
    Tensor out = g.value(a);
    out.grad.reset();
    for (auto& v : out.storage()) v *= s;
    return g.record(std::move(out), {a.id}, [ia = a.id, s](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
        }
    });
}

// Sum of all elements, as a 1-element tensor.
inline Var sum(Var a) {
    Graph& g = detail::graph_of(a);
    const Tensor& ta = g.value(a);
    double s = 0.0;
    for (double v : ta.data()) s += v;
    return g.record(Tensor::scalar(s), {a.id}, [ia = a.id](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            const std::size_t n = gr.value(ia).numel();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[0];
        }
    });
}

inline Var matmul(Var a, Var b) {
    Graph& g = detail::graph_of(a, b);
    const Tensor& ta = g.value(a);
    const Tensor& tb = g.value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_string(ta.shape()) + " and " +
                             shape_string(tb.shape()));
    }
    const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out(Shape{m, n});
    const double* pa = ta.data().data();
    const double* pb = tb.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return g.record(std::move(out), {a.id, b.id},
                    [ia = a.id, ib = b.id, m, k, n](Graph& gr, std::span<const double> go) {
                        const double* va = gr.value(ia).data().data();
                        const double* vb = gr.value(ib).data().data();
                        if (double* ga = gr.grad_buffer(ia)) {
                            // dA = dC * B^T
                            for (std::size_t i = 0; i < m; ++i) {
                                for (std::size_t p = 0; p < k; ++p) {
                                    const double* brow = vb + p * n;
                                    const double* grow = go.data() + i * n;
                                    double s = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                    ga[i * k + p] += s;
                                }
                            }
                        }
                        if (double* gb = gr.grad_buffer(ib)) {
                            // dB = A^T * dC
                            for (std::size_t i = 0; i < m; ++i) {
                                const double* grow = go.data() + i * n;
                                for (std::size_t p = 0; p < k; ++p) {
                                    const double av = va[i * k + p];
                                    double* gbrow = gb + p * n;
                                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                                }
                            }
                        }
                    });
}

inline Var transpose(Var a) {
    Graph& g = detail::graph_of(a);
    const Tensor& ta = g.value(a);
    if (ta.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_string(ta.shape()));
    const std::size_t m = ta.dim(0), n = ta.dim(1);
    Tensor out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ta[i * n + j];
    return g.record(std::move(out), {a.id}, [ia = a.id, m, n](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
        }
    });
}

inline Var reshape(Var a, Shape shape) {
    Graph& g = detail::graph_of(a);
    const Tensor& ta = g.value(a);
    if (shape_numel(shape) != ta.numel()) {
        throw DimensionError("reshape: " + shape_string(ta.shape()) + " to " + shape_string(shape));
    }
    Tensor out(std::move(shape), ta.storage());
    return g.record(std::move(out), {a.id}, [ia = a.id](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        }
    });
}

// Concatenation along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ArgumentError("concat of zero tensors");
    Graph& g = detail::graph_of(parts.front());
    Shape shape = g.value(parts.front()).shape();
    if (axis >= shape.size()) throw DimensionError("concat axis out of range");
    std::size_t total = 0;
    std::vector<std::size_t> ids;
    for (Var p : parts) {
        detail::graph_of(parts.front(), p);
        const Shape& s = g.value(p).shape();
        if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != shape[d]) {
                throw DimensionError("concat: " + shape_string(s) + " vs " + shape_string(shape));
            }
        }
        total += s[axis];
        ids.push_back(p.id);
    }
    shape[axis] = total;
    const std::size_t outer = shape_numel(Shape(shape.begin(), shape.begin() + axis));
    const std::size_t inner = shape_numel(Shape(shape.begin() + axis + 1, shape.end()));
    Tensor out(shape);
    std::size_t offset = 0;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const Tensor& t = g.value(p);
        const std::size_t w = t.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(t.data().data() + o * w, w, out.data().data() + o * total * inner + offset);
        }
        offset += w;
        widths.push_back(w);
    }
    return g.record(std::move(out), ids,
                    [ids, widths, outer, row = total * inner](Graph& gr, std::span<const double> go) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (double* gp = gr.grad_buffer(ids[k])) {
                                for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < widths[k]; ++i)
                                        gp[o * widths[k] + i] += go[o * row + off + i];
                            }
                            off += widths[k];
                        }
                    });
}

// Columns [begin, end) of the last dimension.
inline Var slice_lastdim(Var a, std::size_t begin, std::size_t end) {
    Graph& g = detail::graph_of(a);
    const Tensor& ta = g.value(a);
    const std::size_t n = ta.shape().back();
    if (begin >= end || end > n) throw DimensionError("slice_lastdim: bad range on " + shape_string(ta.shape()));
    Shape shape = ta.shape();
    shape.back() = end - begin;
    const std::size_t rows = ta.numel() / n, w = end - begin;
    Tensor out(shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = ta[r * n + begin + j];
    return g.record(std::move(out), {a.id}, [ia = a.id, rows, n, w, begin](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < w; ++j) ga[r * n + begin + j] += go[r * w + j];
        }
    });
}

inline Var relu(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = g.value(a);
    out.grad.reset();
    for (auto& v : out.storage()) v = v < 0.0 ? 0.0 : v;  // NaN passes through
    return g.record(std::move(out), {a.id}, [ia = a.id](Graph& gr, std::span<const double> go) {
        if (double* ga = gr.grad_buffer(ia)) {
            const Tensor& x = gr.value(ia);
            const double k = debug::corrupt_relu_backward ? 0.5 : 1.0;
            for (std::size_t i = 0; i < go.size(); ++i) {
                if (x[i] > 0.0) ga[i] += k * go[i];
            }
        }
    });
}

// Row-wise softmax over the last dimension. Entries <= kMaskThreshold carry
// no mass; a row with every entry masked yields all zeros.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.numel() / n;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * n;
        double* o = out.data().data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(in[j])) throw NumericError("softmax: NaN in input row " + std::to_string(r));
            if (in[j] > kMaskThreshold) mx = std::max(mx, in[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = in[j] > kMaskThreshold ? std::exp(in[j] - mx) : 0.0;
            s += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    return out;
}

inline Var softmax_lastdim(Var a) {
    Graph& g = detail::graph_of(a);
    Tensor out = softmax_rows(g.value(a));
    const std::size_t n = out.shape().back();
    Var v = g.record(std::move(out), {a.id}, {});
    g.set_backward(v, [ia = a.id, iy = v.id, n](Graph& gr, std::span<const double> go) {
        double* ga = gr.grad_buffer(ia);
        if (!ga) return;
        const Tensor& y = gr.value(iy);
        const std::size_t rows = y.numel() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y.data().data() + r * n;
            const double* gr_ = go.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr_[j];
            for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += yr[j] * (gr_[j] - dot);
        }
    });
    return v;
}

// Layer normalization over the last dimension with affine gamma/beta of
// length equal to that dimension.
inline Var layernorm_lastdim(Var x, Var gamma, Var beta, double eps = 1e-5) {
    Graph& g = detail::graph_of(x, gamma);
    detail::graph_of(x, beta);
    const Tensor& tx = g.value(x);
    const std::size_t n = tx.shape().back();
    if (g.value(gamma).numel() != n || g.value(beta).numel() != n) {
        throw DimensionError("layernorm: affine parameters must have length " + std::to_string(n));
    }
    const std::size_t rows = tx.numel() / n;
    std::vector<double> xhat(tx.numel()), inv_std(rows);
    Tensor out(tx.shape());
    const Tensor& tg = g.value(gamma);
    const Tensor& tb = g.value(beta);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = tx.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += in[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (in[j] - mean) * is;
            xhat[r * n + j] = h;
            out[r * n + j] = tg[j] * h + tb[j];
        }
    }
    return g.record(std::move(out), {x.id, gamma.id, beta.id},
                    [ix = x.id, ig = gamma.id, ib = beta.id, n, rows, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Graph& gr, std::span<const double> go) {
                        const Tensor& tgam = gr.value(ig);
                        if (double* gg = gr.grad_buffer(ig)) {
                            for (std::size_t i = 0; i < rows * n; ++i) gg[i % n] += go[i] * xhat[i];
                        }
                        if (double* gb = gr.grad_buffer(ib)) {
                            for (std::size_t i = 0; i < rows * n; ++i) gb[i % n] += go[i];
                        }
                        if (double* gx = gr.grad_buffer(ix)) {
                            const double inv_n = 1.0 / static_cast<double>(n);
                            for (std::size_t r = 0; r < rows; ++r) {
                                double m1 = 0.0, m2 = 0.0;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double d = go[r * n + j] * tgam[j];
                                    m1 += d;
                                    m2 += d * xhat[r * n + j];
                                }
                                m1 *= inv_n;
                                m2 *= inv_n;
                                for (std::size_t j = 0; j < n; ++j) {
                                    const double d = go[r * n + j] * tgam[j];
                                    gx[r * n + j] += inv_std[r] * (d - m1 - xhat[r * n + j] * m2);
                                }
                            }
                        }
                    });
}

// 2-D cross-correlation of a C_in x H x W input with C_out x C_in x k x k
// weights and zero padding. `bias`, when given, has C_out entries. Output
// extent is floor((H + 2*pad - k) / stride) + 1.
inline Var conv2d(Var x, Var w, std::optional<Var> bias, std::size_t stride, std::size_t pad) {
    Graph& g = detail::graph_of(x, w);
    const Tensor& tx = g.value(x);
    const Tensor& tw = g.value(w);
    if (tx.rank() != 3 || tw.rank() != 4 || tw.dim(1) != tx.dim(0) || tw.dim(2) != tw.dim(3)) {
        throw DimensionError("conv2d: input " + shape_string(tx.shape()) + " and weight " +
                             shape_string(tw.shape()) + " are incompatible");
    }
    const std::size_t cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
    const std::size_t cout = tw.dim(0), k = tw.dim(2);
    if (k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    // Output size uses floor division, as in common frameworks; an odd kernel
    // with stride 2 never divides an even padded extent exactly.
    if (h + 2 * pad < k || wd + 2 * pad < k) {
        throw ConfigError("conv2d: kernel does not fit input " + shape_string(tx.shape()) + ", k=" +
                          std::to_string(k) + ", pad=" + std::to_string(pad));
    }
    const std::size_t oh = (h + 2 * pad - k) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
    std::vector<std::size_t> inputs{x.id, w.id};
    if (bias) {
        detail::graph_of(x, *bias);
        if (g.value(*bias).numel() != cout) throw DimensionError("conv2d: bias must have C_out entries");
        inputs.push_back(bias->id);
    }

    // Valid output range [lo, hi) along one axis for kernel offset `kk`.
    auto valid_range = [stride, pad](std::size_t kk, std::size_t in_len, std::size_t out_len) {
        const long long off = static_cast<long long>(kk) - static_cast<long long>(pad);
        long long lo = 0;
        if (off < 0) lo = (-off + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
        long long hi = (static_cast<long long>(in_len) - 1 - off);
        hi = hi < 0 ? 0 : hi / static_cast<long long>(stride) + 1;
        hi = std::min<long long>(hi, static_cast<long long>(out_len));
        lo = std::min(lo, hi);
        return std::pair<std::size_t, std::size_t>(lo, hi);
    };

    Tensor out(Shape{cout, oh, ow});
    const double* px = tx.data().data();
    const double* pw = tw.data().data();
    double* po = out.data().data();
    if (bias) {
        const Tensor& tb = g.value(*bias);
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(po + co * oh * ow, oh * ow, tb[co]);
    }
    for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
                const auto [y0, y1] = valid_range(ky, h, oh);
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const auto [x0, x1] = valid_range(kx, wd, ow);
                    const double wv = pw[((co * cin + ci) * k + ky) * k + kx];
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const std::size_t iy = oy * stride + ky - pad;
                        const double* xrow = px + (ci * h + iy) * wd + kx - pad;
                        double* orow = po + (co * oh + oy) * ow;
                        for (std::size_t ox = x0; ox < x1; ++ox) orow[ox] += wv * xrow[ox * stride];
                    }
                }
            }
        }
    }
    const bool has_bias = bias.has_value();
    return g.record(
        std::move(out), inputs,
        [ix = x.id, iw = w.id, ib = has_bias ? bias->id : 0, has_bias, cin, h, wd, cout, k, oh, ow, stride, pad,
         valid_range](Graph& gr, std::span<const double> go) {
            const double* px = gr.value(ix).data().data();
            const double* pw = gr.value(iw).data().data();
            double* gx = gr.grad_buffer(ix);
            double* gw = gr.grad_buffer(iw);
            if (has_bias) {
                if (double* gb = gr.grad_buffer(ib)) {
                    for (std::size_t co = 0; co < cout; ++co) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < oh * ow; ++i) s += go[co * oh * ow + i];
                        gb[co] += s;
                    }
                }
            }
            if (!gx && !gw) return;
            for (std::size_t co = 0; co < cout; ++co) {
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        const auto [y0, y1] = valid_range(ky, h, oh);
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const auto [x0, x1] = valid_range(kx, wd, ow);
                            const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
                            const double wv = pw[widx];
                            double acc = 0.0;
                            for (std::size_t oy = y0; oy < y1; ++oy) {
                                const std::size_t iy = oy * stride + ky - pad;
                                const std::size_t xoff = (ci * h + iy) * wd + kx - pad;
                                const double* grow = go.data() + (co * oh + oy) * ow;
                                if (gx) {
                                    double* gxrow = gx + xoff;
                                    for (std::size_t ox = x0; ox < x1; ++ox) gxrow[ox * stride] += wv * grow[ox];
                                }
                                if (gw) {
                                    const double* xrow = px + xoff;
                                    for (std::size_t ox = x0; ox < x1; ++ox) acc += xrow[ox * stride] * grow[ox];
                                }
                            }
                            if (gw) gw[widx] += acc;
                        }
                    }
                }
            }
        });
}

namespace detail {

// Half-pixel-centred 2x linear interpolation taps along one axis.
struct UpsampleTap {
    std::size_t i0, i1;
    double w0, w1;
};

inline std::vector<UpsampleTap> upsample_taps(std::size_t n) {
    std::vector<UpsampleTap> taps(2 * n);
    for (std::size_t o = 0; o < 2 * n; ++o) {
        const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        const double clamped = std::clamp(src, 0.0, static_cast<double>(n - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(clamped));
        const std::size_t i1 = std::min(i0 + 1, n - 1);
        const double f = clamped - static_cast<double>(i0);
        taps[o] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

}  // namespace detail

// Bilinear 2x upsampling of a C x H x W tensor (half-pixel centres, edge clamp).
inline Var bilinear_upsample2x(Var x) {
    Graph& g = detail::graph_of(x);
    const Tensor& tx = g.value(x);
    if (tx.rank() != 3) throw DimensionError("bilinear_upsample2x expects C x H x W, got " + shape_string(tx.shape()));
    const std::size_t c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    auto ty = detail::upsample_taps(h);
    auto tw = detail::upsample_taps(w);
    Tensor out(Shape{c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* in = tx.data().data() + ch * h * w;
        double* o = out.data().data() + ch * 4 * h * w;
        for (std::size_t oy = 0; oy < 2 * h; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                const auto& b = tw[ox];
                o[oy * 2 * w + ox] = a.w0 * (b.w0 * in[a.i0 * w + b.i0] + b.w1 * in[a.i0 * w + b.i1]) +
                                     a.w1 * (b.w0 * in[a.i1 * w + b.i0] + b.w1 * in[a.i1 * w + b.i1]);
            }
        }
    }
    return g.record(std::move(out), {x.id},
                    [ix = x.id, c, h, w, ty = std::move(ty), tw = std::move(tw)](Graph& gr, std::span<const double> go) {
                        double* gx = gr.grad_buffer(ix);
                        if (!gx) return;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            double* gi = gx + ch * h * w;
                            const double* o = go.data() + ch * 4 * h * w;
                            for (std::size_t oy = 0; oy < 2 * h; ++oy) {
                                const auto& a = ty[oy];
                                for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                                    const auto& b = tw[ox];
                                    const double v = o[oy * 2 * w + ox];
                                    gi[a.i0 * w + b.i0] += a.w0 * b.w0 * v;
                                    gi[a.i0 * w + b.i1] += a.w0 * b.w1 * v;
                                    gi[a.i1 * w + b.i0] += a.w1 * b.w0 * v;
                                    gi[a.i1 * w + b.i1] += a.w1 * b.w1 * v;
                                }
                            }
                        }
                    });
}

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Mean over non-ignored pixels of -log softmax(logits)[label], where logits is
// N x H x W and labels holds H*W class ids (row-major) or kIgnoreLabel.
// Returns 0 with zero gradient when every pixel is ignored.
inline Var cross_entropy_pixelwise(Var logits, std::span<const std::uint8_t> labels) {
    Graph& g = detail::graph_of(logits);
    const Tensor& tl = g.value(logits);
    if (tl.rank() != 3) throw DimensionError("cross_entropy_pixelwise expects N x H x W logits");
    const std::size_t n = tl.dim(0), hw = tl.dim(1) * tl.dim(2);
    if (labels.size() != hw) {
        throw DimensionError("cross_entropy_pixelwise: " + std::to_string(labels.size()) + " labels for " +
                             shape_string(tl.shape()) + " logits");
    }
    std::size_t count = 0;
    for (auto l : labels) {
        if (l == kIgnoreLabel) continue;
        if (l >= n) throw ValidationError("label id " + std::to_string(l) + " out of range for N=" + std::to_string(n));
        ++count;
    }
    // Per-pixel softmax probabilities, kept for backward.
    std::vector<double> prob(n * hw, 0.0);
    double total = 0.0;
    const double* pl = tl.data().data();
    for (std::size_t p = 0; p < hw; ++p) {
        if (labels[p] == kIgnoreLabel) continue;
        double mx = pl[p];
        for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, pl[c * hw + p]);
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += std::exp(pl[c * hw + p] - mx);
        for (std::size_t c = 0; c < n; ++c) prob[c * hw + p] = std::exp(pl[c * hw + p] - mx) / s;
        total += -(pl[labels[p] * hw + p] - mx - std::log(s));
    }
    const double loss = count ? total / static_cast<double>(count) : 0.0;
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return g.record(Tensor::scalar(loss), {logits.id},
                    [il = logits.id, n, hw, count, prob = std::move(prob), lab = std::move(lab)](
                        Graph& gr, std::span<const double> go) {
                        double* gl = gr.grad_buffer(il);
                        if (!gl || count == 0) return;
                        const double k = go[0] / static_cast<double>(count);
                        for (std::size_t p = 0; p < hw; ++p) {
                            if (lab[p] == kIgnoreLabel) continue;
                            for (std::size_t c = 0; c < n; ++c) gl[c * hw + p] += k * prob[c * hw + p];
                            gl[lab[p] * hw + p] -= k;
                        }
                    });
}

}  // namespace osseg
