#pragma once

// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Tape owns every value produced during one forward pass. Ops are free
// functions taking and returning Var handles; each op records a backward
// closure that accumulates into its inputs' gradients. Backward walks the
// tape once in reverse construction order.
//
// The op set is closed: it covers exactly what the DIB network and its
// losses need.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dib/common.hpp"
#include "dib/entropy.hpp"

namespace dib::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense row-major real array.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_size(shape_))
            throw Error("shape_mismatch", "tensor data length " + std::to_string(data_.size()) +
                                              " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Copy a rank-2 tensor into a (column-major) Eigen matrix.
inline Eigen::MatrixXd to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw Error("shape_mismatch", "to_matrix expects rank 2, got " + shape_str(t.shape()));
    return Eigen::Map<const RowMatrix>(t.data(), static_cast<Eigen::Index>(t.dim(0)),
                                       static_cast<Eigen::Index>(t.dim(1)));
}

inline Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<RowMatrix>(t.data(), m.rows(), m.cols()) = m;
    return t;
}

class Tape;

/// Handle to a value on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, const std::vector<double>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf input. Parameters are leaves with requires_grad = true.
    Var leaf(Tensor value, bool requires_grad, std::string name = "leaf") {
        if (!all_finite(value.data(), value.size()))
            throw Error("non_finite", "leaf '" + name + "' has non-finite values");
        nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(name), nullptr});
        return Var{this, nodes_.size() - 1};
    }
    Var constant(Tensor value, std::string name = "const") { return leaf(std::move(value), false, std::move(name)); }

    /// Record an op result. `inputs` decide whether gradients flow.
    Var record(Tensor value, std::string op, std::initializer_list<Var> inputs, Backward backward) {
        return record(std::move(value), std::move(op), std::vector<Var>(inputs), std::move(backward));
    }
    Var record(Tensor value, std::string op, const std::vector<Var>& inputs, Backward backward) {
        if (!all_finite(value.data(), value.size()))
            throw Error("non_finite", "op '" + op + "' produced non-finite values");
        bool rg = false;
        for (const Var& v : inputs) {
            if (v.tape != this) throw Error("invalid_argument", "op '" + op + "' mixes tapes");
            rg = rg || nodes_[v.id].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), {}, rg, std::move(op), rg ? std::move(backward) : nullptr});
        return Var{this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient accumulator for a node, allocated on first touch.
    std::vector<double>& grad_ref(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    /// Gradient of the last backward target with respect to `v`; zeros if no
    /// path reached it.
    Tensor grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
        return Tensor(n.value.shape(), n.grad);
    }
    bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

    /// Reverse sweep from a scalar output. Returns the ids whose backward
    /// rule ran, in visiting order.
    const std::vector<std::size_t>& backward(Var out) {
        if (out.tape != this || nodes_.at(out.id).value.size() != 1)
            throw Error("invalid_argument", "backward target must be a scalar on this tape");
        for (auto& n : nodes_) n.grad.clear();
        visited_.clear();
        grad_ref(out.id)[0] = 1.0;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            // the closure may grow other nodes' grads but never this vector
            const std::vector<double> g = n.grad;
            n.backward(*this, g);
            visited_.push_back(i);
        }
        return visited_;
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        std::string op;
        Backward backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::size_t> visited_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline void require(bool ok, const std::string& op, const Shape& a, const Shape& b) {
    if (!ok) throw Error("shape_mismatch", op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

inline bool is_suffix(const Shape& whole, const Shape& part) {
    if (part.size() > whole.size()) return false;
    return std::equal(part.rbegin(), part.rend(), whole.rbegin());
}

inline void accumulate(Tape& t, Var v, const std::vector<double>& g) {
    if (!t.requires_grad(v.id)) return;
    auto& dst = t.grad_ref(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <class F>
Var unary(Var a, std::string op, F&& f, std::function<double(double x, double y)> dydx) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    const Tensor ys = y;
    return a.tape->record(std::move(y), std::move(op), {a},
                          [a, ys, dydx](Tape& t, const std::vector<double>& g) {
                              if (!t.requires_grad(a.id)) return;
                              const Tensor& xv = t.value(a.id);
                              auto& dst = t.grad_ref(a.id);
                              for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * dydx(xv[i], ys[i]);
                          });
}

/// Leading/axis/trailing extents for an axis operation.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// Plain loop for products with a unit extent; keeps summation order fixed.
inline void gemm_small(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                       bool trans_a, bool trans_b) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = trans_a ? a[p * m + i] : a[i * k + p];
                const double bv = trans_b ? b[j * k + p] : b[p * n + j];
                s += av * bv;
            }
            c[i * n + j] += s;
        }
}

/// c (m x n, row-major) += op(a) * op(b).
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                     bool trans_a, bool trans_b) {
    if (m == 1 || n == 1 || k == 1) {
        gemm_small(a, b, c, m, k, n, trans_a, trans_b);
        return;
    }
    using Idx = Eigen::Index;
    Eigen::Map<RowMatrix> cm(c, static_cast<Idx>(m), static_cast<Idx>(n));
    if (!trans_a && !trans_b) {
        cm.noalias() += Eigen::Map<const RowMatrix>(a, static_cast<Idx>(m), static_cast<Idx>(k)) *
                        Eigen::Map<const RowMatrix>(b, static_cast<Idx>(k), static_cast<Idx>(n));
    } else if (trans_a && !trans_b) {
        cm.noalias() += Eigen::Map<const RowMatrix>(a, static_cast<Idx>(k), static_cast<Idx>(m)).transpose() *
                        Eigen::Map<const RowMatrix>(b, static_cast<Idx>(k), static_cast<Idx>(n));
    } else if (!trans_a && trans_b) {
        cm.noalias() += Eigen::Map<const RowMatrix>(a, static_cast<Idx>(m), static_cast<Idx>(k)) *
                        Eigen::Map<const RowMatrix>(b, static_cast<Idx>(n), static_cast<Idx>(k)).transpose();
    } else {
        cm.noalias() += Eigen::Map<const RowMatrix>(a, static_cast<Idx>(k), static_cast<Idx>(m)).transpose() *
                        Eigen::Map<const RowMatrix>(b, static_cast<Idx>(n), static_cast<Idx>(k)).transpose();
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic
// ---------------------------------------------------------------------------

/// x[..., k] @ w[k, n] -> [..., n]
inline Var matmul(Var x, Var w) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    detail::require(!xs.empty() && ws.size() == 2 && xs.back() == ws[0], "matmul", xs, ws);
    const std::size_t k = ws[0], n = ws[1], rows = x.size() / k;
    Shape os = xs;
    os.back() = n;
    Tensor out(os);
    detail::gemm_acc(x.value().data(), w.value().data(), out.data(), rows, k, n, false, false);
    return x.tape->record(std::move(out), "matmul", {x, w}, [x, w, rows, k, n](Tape& t, const std::vector<double>& g) {
        if (t.requires_grad(x.id))
            detail::gemm_acc(g.data(), t.value(w.id).data(), t.grad_ref(x.id).data(), rows, n, k, false, true);
        if (t.requires_grad(w.id))
            detail::gemm_acc(t.value(x.id).data(), g.data(), t.grad_ref(w.id).data(), k, rows, n, true, false);
    });
}

/// a + b where b has a's shape or a suffix of it (broadcast over leading axes).
inline Var add(Var a, Var b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    detail::require(detail::is_suffix(as, bs), "add", as, bs);
    const std::size_t nb = b.size();
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % nb];
    return a.tape->record(std::move(out), "add", {a, b}, [a, b, nb](Tape& t, const std::vector<double>& g) {
        detail::accumulate(t, a, g);
        if (t.requires_grad(b.id)) {
            auto& db = t.grad_ref(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += g[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::require(a.shape() == b.shape(), "sub", a.shape(), b.shape());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape->record(std::move(out), "sub", {a, b}, [a, b](Tape& t, const std::vector<double>& g) {
        detail::accumulate(t, a, g);
        if (t.requires_grad(b.id)) {
            auto& db = t.grad_ref(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        }
    });
}

inline Var scale(Var a, double c) {
    Tensor out = a.value();
    for (double& v : out.values()) v *= c;
    return a.tape->record(std::move(out), "scale", {a}, [a, c](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += c * g[i];
    });
}

/// Elementwise a * b; b may be a suffix-shaped tensor or a single element.
inline Var mul(Var a, Var b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    detail::require(detail::is_suffix(as, bs) || b.size() == 1, "mul", as, bs);
    const std::size_t nb = b.size();
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % nb];
    return a.tape->record(std::move(out), "mul", {a, b}, [a, b, nb](Tape& t, const std::vector<double>& g) {
        const Tensor& av = t.value(a.id);
        const Tensor& bvv = t.value(b.id);
        if (t.requires_grad(a.id)) {
            auto& da = t.grad_ref(a.id);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bvv[i % nb];
        }
        if (t.requires_grad(b.id)) {
            auto& db = t.grad_ref(b.id);
            for (std::size_t i = 0; i < g.size(); ++i) db[i % nb] += g[i] * av[i];
        }
    });
}

inline Var reshape(Var a, Shape shape) {
    detail::require(shape_size(shape) == a.size(), "reshape", a.shape(), shape);
    Tensor out(std::move(shape), a.value().values());
    return a.tape->record(std::move(out), "reshape", {a},
                          [a](Tape& t, const std::vector<double>& g) { detail::accumulate(t, a, g); });
}

/// [...] -> [count, ...]; backward sums over the new axis.
inline Var repeat(Var a, std::size_t count) {
    Shape s = a.shape();
    s.insert(s.begin(), count);
    Tensor out(s);
    const std::size_t n = a.size();
    for (std::size_t r = 0; r < count; ++r) std::copy_n(a.value().data(), n, out.data() + r * n);
    return a.tape->record(std::move(out), "repeat", {a}, [a, n](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) d[i % n] += g[i];
    });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw Error("invalid_argument", "concat of zero tensors");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw Error("shape_mismatch", "concat axis out of range for " + shape_str(s0));
    Shape os = s0;
    os[axis] = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i)
            if (i != axis && s[i] != s0[i]) ok = false;
        detail::require(ok, "concat", s0, s);
        os[axis] += s[axis];
    }
    const auto sp = detail::split_axis(os, axis);
    Tensor out(os);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const Var& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.shape()[axis];
        const Tensor& v = p.value();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(v.data() + o * len * sp.inner, len * sp.inner,
                        out.data() + (o * sp.len + off) * sp.inner);
        off += len;
    }
    return parts[0].tape->record(std::move(out), "concat", parts,
                                 [parts, offsets, sp, axis](Tape& t, const std::vector<double>& g) {
                                     for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                                         const Var p = parts[pi];
                                         if (!t.requires_grad(p.id)) continue;
                                         const std::size_t len = t.value(p.id).shape()[axis];
                                         auto& d = t.grad_ref(p.id);
                                         for (std::size_t o = 0; o < sp.outer; ++o)
                                             for (std::size_t i = 0; i < len * sp.inner; ++i)
                                                 d[o * len * sp.inner + i] +=
                                                     g[(o * sp.len + offsets[pi]) * sp.inner + i];
                                     }
                                 });
}

/// a[..., begin:end, ...] along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (axis >= s.size() || begin >= end || end > s[axis])
        throw Error("shape_mismatch", "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                                          std::to_string(axis) + " of " + shape_str(s));
    const auto sp = detail::split_axis(s, axis);
    Shape os = s;
    os[axis] = end - begin;
    const std::size_t len = end - begin;
    Tensor out(os);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(a.value().data() + (o * sp.len + begin) * sp.inner, len * sp.inner,
                    out.data() + o * len * sp.inner);
    return a.tape->record(std::move(out), "slice", {a}, [a, sp, begin, len](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < len * sp.inner; ++i)
                d[(o * sp.len + begin) * sp.inner + i] += g[o * len * sp.inner + i];
    });
}

/// Mean over `axis`, which is removed from the shape.
inline Var mean_pool(Var a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw Error("shape_mismatch", "mean_pool axis out of range for " + shape_str(s));
    const auto sp = detail::split_axis(s, axis);
    Shape os = s;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    if (os.empty()) os = {1};
    Tensor out(os);
    const Tensor& v = a.value();
    const double inv = 1.0 / static_cast<double>(sp.len);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t l = 0; l < sp.len; ++l)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += v[(o * sp.len + l) * sp.inner + i];
    for (double& x : out.values()) x *= inv;
    return a.tape->record(std::move(out), "mean_pool", {a}, [a, sp, inv](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t l = 0; l < sp.len; ++l)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    d[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i] * inv;
    });
}

inline Var sum_all(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return a.tape->record(Tensor::scalar(s), "sum", {a}, [a](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (double& x : d) x += g[0];
    });
}

inline Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(Var a) {
    return detail::unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
    return detail::unary(a, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
    return detail::unary(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// softmax(scale * a) along `axis`.
inline Var softmax(Var a, std::size_t axis, double scale_factor = 1.0) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw Error("shape_mismatch", "softmax axis out of range for " + shape_str(s));
    const auto sp = detail::split_axis(s, axis);
    const Tensor& x = a.value();
    Tensor y(s);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            auto idx = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, scale_factor * x[idx(l)]);
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                const double e = std::exp(scale_factor * x[idx(l)] - mx);
                y[idx(l)] = e;
                z += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) y[idx(l)] /= z;
        }
    const Tensor ys = y;
    return a.tape->record(std::move(y), "softmax", {a},
                          [a, ys, sp, scale_factor](Tape& t, const std::vector<double>& g) {
                              if (!t.requires_grad(a.id)) return;
                              auto& d = t.grad_ref(a.id);
                              for (std::size_t o = 0; o < sp.outer; ++o)
                                  for (std::size_t i = 0; i < sp.inner; ++i) {
                                      auto idx = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
                                      double dot = 0.0;
                                      for (std::size_t l = 0; l < sp.len; ++l) dot += g[idx(l)] * ys[idx(l)];
                                      for (std::size_t l = 0; l < sp.len; ++l)
                                          d[idx(l)] += scale_factor * ys[idx(l)] * (g[idx(l)] - dot);
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Stochastic ops. Randomness always comes from the caller.
// ---------------------------------------------------------------------------

inline constexpr double kLogSigmaMin = -8.0;
inline constexpr double kLogSigmaMax = 8.0;

/// z = mu + exp(clamp(log_sigma)) * eps with eps supplied by the caller.
inline Var gaussian_sample(Var mu, Var log_sigma, const Tensor& eps) {
    detail::require(mu.shape() == log_sigma.shape(), "gaussian_sample", mu.shape(), log_sigma.shape());
    detail::require(mu.shape() == eps.shape(), "gaussian_sample", mu.shape(), eps.shape());
    const Tensor& m = mu.value();
    const Tensor& ls = log_sigma.value();
    Tensor z(m.shape());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = m[i] + std::exp(std::clamp(ls[i], kLogSigmaMin, kLogSigmaMax)) * eps[i];
    return mu.tape->record(std::move(z), "gaussian_sample", {mu, log_sigma},
                           [mu, log_sigma, eps](Tape& t, const std::vector<double>& g) {
                               detail::accumulate(t, mu, g);
                               if (!t.requires_grad(log_sigma.id)) return;
                               const Tensor& lsv = t.value(log_sigma.id);
                               auto& d = t.grad_ref(log_sigma.id);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double l = lsv[i];
                                   if (l < kLogSigmaMin || l > kLogSigmaMax) continue;
                                   d[i] += g[i] * std::exp(l) * eps[i];
                               }
                           });
}

/// Inverted dropout: scales kept units by 1/(1-rate) in training, identity
/// otherwise.
inline Var dropout(Var a, double rate, bool train, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw Error("invalid_argument", "dropout rate must be in [0, 1)");
    if (!train || rate == 0.0) return a;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(a.size());
    for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return a.tape->record(std::move(out), "dropout", {a}, [a, mask](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(a.id)) return;
        auto& d = t.grad_ref(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// q: [b, lq, d], k and v: [b, lk, d]; d splits evenly across `heads`, and
/// each head's scores are scaled by 1/sqrt(d / heads) inside the softmax.
/// `key_mask`, when given, is [b, lk] with 1 for usable keys; a query row
/// with no usable key attends over all keys. If `weights_out` is non-null it
/// receives the attention weights as [b, heads, lq, lk].
inline Var attention(Var q, Var k, Var v, std::size_t heads, const std::vector<double>* key_mask = nullptr,
                     Tensor* weights_out = nullptr) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    const Shape& vs = v.shape();
    detail::require(qs.size() == 3 && ks.size() == 3 && qs[0] == ks[0] && qs[2] == ks[2], "attention(q,k)", qs, ks);
    detail::require(vs == ks, "attention(k,v)", ks, vs);
    const std::size_t b = qs[0], lq = qs[1], lk = ks[1], d = qs[2];
    if (heads == 0 || d % heads != 0)
        throw Error("shape_mismatch", "attention: width " + std::to_string(d) + " not divisible by " +
                                          std::to_string(heads) + " heads");
    if (key_mask && key_mask->size() != b * lk)
        throw Error("shape_mismatch", "attention: key mask has " + std::to_string(key_mask->size()) +
                                          " entries, expected " + std::to_string(b * lk));
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    Tensor probs({b, heads, lq, lk});
    Tensor out({b, lq, d});
    std::vector<double> row(lk);
    for (std::size_t bb = 0; bb < b; ++bb) {
        bool any_key = true;
        if (key_mask) {
            any_key = false;
            for (std::size_t j = 0; j < lk; ++j) any_key = any_key || (*key_mask)[bb * lk + j] > 0.5;
        }
        auto usable = [&](std::size_t j) { return !key_mask || !any_key || (*key_mask)[bb * lk + j] > 0.5; };
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < lq; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < lk; ++j) {
                    if (!usable(j)) continue;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qv.at(bb, i, h * dh + c) * kv.at(bb, j, h * dh + c);
                    row[j] = s * sc;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < lk; ++j) {
                    const double e = usable(j) ? std::exp(row[j] - mx) : 0.0;
                    row[j] = e;
                    z += e;
                }
                double* p = probs.data() + ((bb * heads + h) * lq + i) * lk;
                for (std::size_t j = 0; j < lk; ++j) p[j] = row[j] / z;
                for (std::size_t j = 0; j < lk; ++j) {
                    if (p[j] == 0.0) continue;
                    for (std::size_t c = 0; c < dh; ++c) out.at(bb, i, h * dh + c) += p[j] * vv.at(bb, j, h * dh + c);
                }
            }
    }
    if (weights_out) *weights_out = probs;
    return q.tape->record(
        std::move(out), "attention", {q, k, v},
        [q, k, v, probs, b, lq, lk, heads, dh, sc](Tape& t, const std::vector<double>& g) {
            const Tensor& qv2 = t.value(q.id);
            const Tensor& kv2 = t.value(k.id);
            const Tensor& vv2 = t.value(v.id);
            const std::size_t d2 = heads * dh;
            const bool gq = t.requires_grad(q.id), gk = t.requires_grad(k.id), gv = t.requires_grad(v.id);
            double* dq = gq ? t.grad_ref(q.id).data() : nullptr;
            double* dk = gk ? t.grad_ref(k.id).data() : nullptr;
            double* dv = gv ? t.grad_ref(v.id).data() : nullptr;
            std::vector<double> dp(lk);
            auto at3 = [&](std::size_t bb, std::size_t i, std::size_t c, std::size_t len) {
                return (bb * len + i) * d2 + c;
            };
            for (std::size_t bb = 0; bb < b; ++bb)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < lq; ++i) {
                        const double* p = probs.data() + ((bb * heads + h) * lq + i) * lk;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < lk; ++j) {
                            double s = 0.0;
                            if (p[j] != 0.0)
                                for (std::size_t c = 0; c < dh; ++c)
                                    s += g[at3(bb, i, h * dh + c, lq)] * vv2[at3(bb, j, h * dh + c, lk)];
                            dp[j] = s;
                            dot += s * p[j];
                            if (gv && p[j] != 0.0)
                                for (std::size_t c = 0; c < dh; ++c)
                                    dv[at3(bb, j, h * dh + c, lk)] += p[j] * g[at3(bb, i, h * dh + c, lq)];
                        }
                        for (std::size_t j = 0; j < lk; ++j) {
                            if (p[j] == 0.0) continue;
                            const double ds = p[j] * (dp[j] - dot) * sc;
                            for (std::size_t c = 0; c < dh; ++c) {
                                if (gq) dq[at3(bb, i, h * dh + c, lq)] += ds * kv2[at3(bb, j, h * dh + c, lk)];
                                if (gk) dk[at3(bb, j, h * dh + c, lk)] += ds * qv2[at3(bb, i, h * dh + c, lq)];
                            }
                        }
                    }
        });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
inline Var binary_cross_entropy(Var logits, const std::vector<double>& targets) {
    if (logits.size() != targets.size())
        throw Error("shape_mismatch", "binary_cross_entropy: " + std::to_string(logits.size()) + " logits vs " +
                                          std::to_string(targets.size()) + " targets");
    const Tensor& x = logits.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        // -[y log s(x) + (1-y) log(1-s(x))] = max(x,0) - x y + log(1 + exp(-|x|))
        loss += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i])));
    }
    const double n = static_cast<double>(x.size());
    return logits.tape->record(Tensor::scalar(loss / n), "binary_cross_entropy", {logits},
                               [logits, targets, n](Tape& t, const std::vector<double>& g) {
                                   if (!t.requires_grad(logits.id)) return;
                                   const Tensor& xv = t.value(logits.id);
                                   auto& d = t.grad_ref(logits.id);
                                   for (std::size_t i = 0; i < d.size(); ++i)
                                       d[i] += g[0] * (sigmoid_value(xv[i]) - targets[i]) / n;
                               });
}

/// Mean softmax cross-entropy; logits [n, classes], integer class targets.
inline Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& targets) {
    const Shape& s = logits.shape();
    if (s.size() != 2 || s[0] != targets.size())
        throw Error("shape_mismatch", "softmax_cross_entropy: logits " + shape_str(s) + " vs " +
                                          std::to_string(targets.size()) + " targets");
    const std::size_t n = s[0], c = s[1];
    const Tensor& x = logits.value();
    std::vector<double> probs(n * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] >= c) throw Error("invalid_argument", "softmax_cross_entropy: target class out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(x[i * c + j] - mx) / z;
        loss += -(x[i * c + targets[i]] - mx - std::log(z));
    }
    const double nn = static_cast<double>(n);
    return logits.tape->record(Tensor::scalar(loss / nn), "softmax_cross_entropy", {logits},
                               [logits, targets, probs, c, nn](Tape& t, const std::vector<double>& g) {
                                   if (!t.requires_grad(logits.id)) return;
                                   auto& d = t.grad_ref(logits.id);
                                   for (std::size_t i = 0; i < targets.size(); ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           d[i * c + j] +=
                                               g[0] * (probs[i * c + j] - (j == targets[i] ? 1.0 : 0.0)) / nn;
                               });
}

/// Mean absolute error.
inline Var mean_abs_error(Var pred, const std::vector<double>& targets) {
    if (pred.size() != targets.size())
        throw Error("shape_mismatch", "mean_abs_error: " + std::to_string(pred.size()) + " predictions vs " +
                                          std::to_string(targets.size()) + " targets");
    const Tensor& x = pred.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) loss += std::abs(x[i] - targets[i]);
    const double n = static_cast<double>(x.size());
    return pred.tape->record(Tensor::scalar(loss / n), "mean_abs_error", {pred},
                             [pred, targets, n](Tape& t, const std::vector<double>& g) {
                                 if (!t.requires_grad(pred.id)) return;
                                 const Tensor& xv = t.value(pred.id);
                                 auto& d = t.grad_ref(pred.id);
                                 for (std::size_t i = 0; i < d.size(); ++i) {
                                     const double r = xv[i] - targets[i];
                                     d[i] += g[0] * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) / n;
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Information measures as graph nodes
// ---------------------------------------------------------------------------

/// Low-rank Renyi entropy (bits) of the Gram matrix of a [n, d] batch.
inline Var entropy_node(Var x, const entropy::KernelConfig& cfg) {
    if (x.shape().size() != 2) throw Error("shape_mismatch", "entropy_node expects [n, d], got " + shape_str(x.shape()));
    const auto r = entropy::entropy_grad_wrt_batch(to_matrix(x.value()), cfg);
    const Tensor grad = from_matrix(r.grad);
    return x.tape->record(Tensor::scalar(r.value), "entropy", {x}, [x, grad](Tape& t, const std::vector<double>& g) {
        if (!t.requires_grad(x.id)) return;
        auto& d = t.grad_ref(x.id);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * grad[i];
    });
}

/// Diagnostics from the most recent mutual information evaluation.
struct InfoDiagnostics {
    double h_x = 0.0, h_y = 0.0, h_joint = 0.0;
    bool degenerate_batch = false;
    bool degenerate_cluster = false;
};

/// Low-rank mutual information I(X;Y) (bits) between two [n, *] batches.
inline Var mutual_information_node(Var x, Var y, const entropy::KernelConfig& cfg, InfoDiagnostics* diag = nullptr) {
    if (x.shape().size() != 2 || y.shape().size() != 2 || x.shape()[0] != y.shape()[0])
        throw Error("shape_mismatch", "mutual_information_node: incompatible shapes " + shape_str(x.shape()) +
                                          " and " + shape_str(y.shape()));
    const auto r = entropy::mutual_information_grad(to_matrix(x.value()), to_matrix(y.value()), cfg);
    if (diag) *diag = {r.h_x, r.h_y, r.h_joint, r.degenerate_batch, r.degenerate_cluster};
    const Tensor gx = from_matrix(r.grad_x);
    const Tensor gy = from_matrix(r.grad_y);
    return x.tape->record(Tensor::scalar(r.value), "mutual_information", {x, y},
                          [x, y, gx, gy](Tape& t, const std::vector<double>& g) {
                              if (t.requires_grad(x.id)) {
                                  auto& d = t.grad_ref(x.id);
                                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * gx[i];
                              }
                              if (t.requires_grad(y.id)) {
                                  auto& d = t.grad_ref(y.id);
                                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * gy[i];
                              }
                          });
}

}  // namespace dib::ad
