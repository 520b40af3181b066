#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "headlab/common.hpp"

namespace headlab {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized on first accumulation
    bool requires_grad = false;
    const void* tape = nullptr;  // tape that produced this node, null for leaves
};

// Value-semantics handle to a tensor node. Copies share storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(static_cast<size_t>(shape_numel(t.n_->shape)), T(0));
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<TensorNode<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, RandomSource& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->value) v = static_cast<T>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

    std::vector<T>& data() { return n_->value; }
    const std::vector<T>& data() const { return n_->value; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    bool has_grad() const { return !n_->grad.empty(); }
    std::vector<T>& grad() {
        if (n_->grad.empty()) n_->grad.assign(n_->value.size(), T(0));
        return n_->grad;
    }
    const std::vector<T>& grad() const { return n_->grad; }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->value[0];
    }

    TensorNode<T>* node() const { return n_.get(); }
    std::weak_ptr<TensorNode<T>> watch() const { return n_; }
    const void* producer() const { return n_->tape; }
    void set_producer(const void* tape) { n_->tape = tape; }

    // Detached deep copy (fresh storage, no producer, no grad).
    Tensor clone_values() const {
        return from_data(n_->shape, n_->value, n_->requires_grad);
    }

private:
    std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

// C (+)= A[m,k] * B[k,n], double accumulation per output element.
template <typename T>
void gemm_nn(int m, int k, int n, const T* a, const T* b, T* c, bool accumulate) {
    std::vector<double> row(static_cast<size_t>(n));
    for (int i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        for (int p = 0; p < k; ++p) {
            const double av = static_cast<double>(a[i * k + p]);
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) row[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
        }
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            T v = static_cast<T>(row[static_cast<size_t>(j)]);
            crow[j] = accumulate ? crow[j] + v : v;
        }
    }
}

// C[m,k] (+)= A[m,n] * B^T where B is [k,n]  (i.e. C = A * B^T).
template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            double acc = 0.0;
            const T* arow = a + static_cast<size_t>(i) * n;
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) acc += static_cast<double>(arow[j]) * static_cast<double>(brow[j]);
            T v = static_cast<T>(acc);
            c[i * k + p] = accumulate ? c[i * k + p] + v : v;
        }
    }
}

// C[k,n] (+)= A^T * B where A is [m,k], B is [m,n].
template <typename T>
void gemm_tn(int m, int k, int n, const T* a, const T* b, T* c, bool accumulate) {
    std::vector<double> row(static_cast<size_t>(n));
    for (int p = 0; p < k; ++p) {
        std::fill(row.begin(), row.end(), 0.0);
        for (int i = 0; i < m; ++i) {
            const double av = static_cast<double>(a[i * k + p]);
            const T* brow = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) row[static_cast<size_t>(j)] += av * static_cast<double>(brow[j]);
        }
        T* crow = c + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) {
            T v = static_cast<T>(row[static_cast<size_t>(j)]);
            crow[j] = accumulate ? crow[j] + v : v;
        }
    }
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

}  // namespace detail

// Records op backward closures in execution order; backward() replays them
// in exact reverse order. Lifetime is intended to be one forward/backward
// pair; clear() drops every recorded tensor reference.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t num_steps() const { return steps_.size(); }

    void clear() {
        steps_.clear();
        steps_.shrink_to_fit();
    }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (loss.producer() != nullptr && loss.producer() != this)
            throw ContractError("backward: loss was produced on a different tape");
        if (loss.requires_grad()) {
            loss.node()->grad.assign(1, T(1));
        }
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        clear();
    }

    // ---- elementwise ----

    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape("add", a, b);
        Tensor<T> out = make_like(a.shape(), a.requires_grad() || b.requires_grad());
        const auto& av = a.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
        if (out.requires_grad()) {
            record([a, b, out]() {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = const_cast<Tensor<T>&>(a).grad();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = const_cast<Tensor<T>&>(b).grad();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            });
        }
        return out;
    }

    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape("mul", a, b);
        Tensor<T> out = make_like(a.shape(), a.requires_grad() || b.requires_grad());
        const auto& av = a.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
        if (out.requires_grad()) {
            record([a, b, out]() {
                const auto& g = out.grad();
                if (a.requires_grad()) {
                    auto& ga = const_cast<Tensor<T>&>(a).grad();
                    const auto& bv2 = b.data();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
                }
                if (b.requires_grad()) {
                    auto& gb = const_cast<Tensor<T>&>(b).grad();
                    const auto& av2 = a.data();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
                }
            });
        }
        return out;
    }

    // Multiply by a compile-time constant (no gradient w.r.t. the constant).
    Tensor<T> scale(const Tensor<T>& x, T c) {
        Tensor<T> out = make_like(x.shape(), x.requires_grad());
        const auto& xv = x.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
        if (out.requires_grad()) {
            record([x, out, c]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
            });
        }
        return out;
    }

    // Scalar-gate multiply: y = g * x where g has shape (1).
    Tensor<T> gate(const Tensor<T>& x, const Tensor<T>& g) {
        if (g.numel() != 1) throw ShapeError("gate: gate must be scalar, got " + shape_str(g.shape()));
        Tensor<T> out = make_like(x.shape(), x.requires_grad() || g.requires_grad());
        const T gv = g.data()[0];
        const auto& xv = x.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = gv * xv[i];
        if (out.requires_grad()) {
            record([x, g, out]() {
                const auto& go = out.grad();
                if (x.requires_grad()) {
                    auto& gx = const_cast<Tensor<T>&>(x).grad();
                    const T gv2 = g.data()[0];
                    for (size_t i = 0; i < go.size(); ++i) gx[i] += gv2 * go[i];
                }
                if (g.requires_grad()) {
                    double acc = 0.0;
                    const auto& xv2 = x.data();
                    for (size_t i = 0; i < go.size(); ++i)
                        acc += static_cast<double>(go[i]) * static_cast<double>(xv2[i]);
                    const_cast<Tensor<T>&>(g).grad()[0] += static_cast<T>(acc);
                }
            });
        }
        return out;
    }

    // Per-head scalar gates on (B, H, S, Dh): slice h is multiplied by gates[h].
    Tensor<T> gate_heads(const Tensor<T>& x, const std::vector<Tensor<T>>& gates) {
        if (x.ndim() != 4)
            throw ShapeError("gate_heads: expected rank-4 input, got " + shape_str(x.shape()));
        const int batch = x.dim(0), heads = x.dim(1);
        const int64_t inner = static_cast<int64_t>(x.dim(2)) * x.dim(3);
        if (static_cast<int>(gates.size()) != heads)
            throw ShapeError("gate_heads: " + std::to_string(gates.size()) + " gates for " +
                             std::to_string(heads) + " heads");
        bool rg = x.requires_grad();
        for (const auto& g : gates) {
            if (g.numel() != 1) throw ShapeError("gate_heads: gates must be scalars");
            rg = rg || g.requires_grad();
        }
        Tensor<T> out = make_like(x.shape(), rg);
        const auto& xv = x.data();
        auto& ov = out.data();
        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                const T gv = gates[static_cast<size_t>(h)].data()[0];
                const int64_t base = (static_cast<int64_t>(b) * heads + h) * inner;
                for (int64_t i = 0; i < inner; ++i) ov[static_cast<size_t>(base + i)] = gv * xv[static_cast<size_t>(base + i)];
            }
        }
        if (out.requires_grad()) {
            record([x, gates, out, batch, heads, inner]() {
                const auto& go = out.grad();
                const auto& xv2 = x.data();
                for (int h = 0; h < heads; ++h) {
                    const auto& g = gates[static_cast<size_t>(h)];
                    const T gv = g.data()[0];
                    double gacc = 0.0;
                    for (int b = 0; b < batch; ++b) {
                        const int64_t base = (static_cast<int64_t>(b) * heads + h) * inner;
                        if (x.requires_grad()) {
                            auto& gx = const_cast<Tensor<T>&>(x).grad();
                            for (int64_t i = 0; i < inner; ++i)
                                gx[static_cast<size_t>(base + i)] += gv * go[static_cast<size_t>(base + i)];
                        }
                        if (g.requires_grad()) {
                            for (int64_t i = 0; i < inner; ++i)
                                gacc += static_cast<double>(go[static_cast<size_t>(base + i)]) *
                                        static_cast<double>(xv2[static_cast<size_t>(base + i)]);
                        }
                    }
                    if (g.requires_grad()) const_cast<Tensor<T>&>(g).grad()[0] += static_cast<T>(gacc);
                }
            });
        }
        return out;
    }

    // Bias over the last dimension: x(..., D) + b(D).
    Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
        const int d = x.dim(x.ndim() - 1);
        if (b.ndim() != 1 || b.dim(0) != d)
            throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
        Tensor<T> out = make_like(x.shape(), x.requires_grad() || b.requires_grad());
        const auto& xv = x.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        const int64_t rows = x.numel() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j)
                ov[static_cast<size_t>(r * d + j)] = xv[static_cast<size_t>(r * d + j)] + bv[static_cast<size_t>(j)];
        if (out.requires_grad()) {
            record([x, b, out, rows, d]() {
                const auto& g = out.grad();
                if (x.requires_grad()) {
                    auto& gx = const_cast<Tensor<T>&>(x).grad();
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (b.requires_grad()) {
                    auto& gb = const_cast<Tensor<T>&>(b).grad();
                    for (int j = 0; j < d; ++j) {
                        double acc = 0.0;
                        for (int64_t r = 0; r < rows; ++r) acc += static_cast<double>(g[static_cast<size_t>(r * d + j)]);
                        gb[static_cast<size_t>(j)] += static_cast<T>(acc);
                    }
                }
            });
        }
        return out;
    }

    // x(B,S,D) + pos(P,D) broadcast over batch, using the first S rows of pos.
    Tensor<T> add_position(const Tensor<T>& x, const Tensor<T>& pos) {
        if (x.ndim() != 3 || pos.ndim() != 2)
            throw ShapeError("add_position: need (B,S,D) and (P,D), got " + shape_str(x.shape()) +
                             " and " + shape_str(pos.shape()));
        const int batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
        if (pos.dim(1) != d || pos.dim(0) < seq)
            throw ShapeError("add_position: position table " + shape_str(pos.shape()) +
                             " too small for input " + shape_str(x.shape()));
        Tensor<T> out = make_like(x.shape(), x.requires_grad() || pos.requires_grad());
        const auto& xv = x.data();
        const auto& pv = pos.data();
        auto& ov = out.data();
        for (int b = 0; b < batch; ++b)
            for (int s = 0; s < seq; ++s)
                for (int j = 0; j < d; ++j)
                    ov[static_cast<size_t>((static_cast<int64_t>(b) * seq + s) * d + j)] =
                        xv[static_cast<size_t>((static_cast<int64_t>(b) * seq + s) * d + j)] + pv[static_cast<size_t>(s * d + j)];
        if (out.requires_grad()) {
            record([x, pos, out, batch, seq, d]() {
                const auto& g = out.grad();
                if (x.requires_grad()) {
                    auto& gx = const_cast<Tensor<T>&>(x).grad();
                    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                }
                if (pos.requires_grad()) {
                    auto& gp = const_cast<Tensor<T>&>(pos).grad();
                    for (int s = 0; s < seq; ++s)
                        for (int j = 0; j < d; ++j) {
                            double acc = 0.0;
                            for (int b = 0; b < batch; ++b)
                                acc += static_cast<double>(g[static_cast<size_t>((static_cast<int64_t>(b) * seq + s) * d + j)]);
                            gp[static_cast<size_t>(s * d + j)] += static_cast<T>(acc);
                        }
                }
            });
        }
        return out;
    }

    // ---- linear algebra ----

    // (m,k)x(k,n); (B,m,k)x(B,k,n); (B,m,k)x(k,n).
    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.ndim() == 2 && b.ndim() == 2) {
            check_inner("matmul", a, b, a.dim(1), b.dim(0));
            return matmul_impl(a, b, 1, a.dim(0), a.dim(1), b.dim(1), false);
        }
        if (a.ndim() == 3 && b.ndim() == 3) {
            if (a.dim(0) != b.dim(0))
                throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
            check_inner("matmul", a, b, a.dim(2), b.dim(1));
            return matmul_impl(a, b, a.dim(0), a.dim(1), a.dim(2), b.dim(2), true);
        }
        if (a.ndim() == 3 && b.ndim() == 2) {
            check_inner("matmul", a, b, a.dim(2), b.dim(0));
            return matmul_impl(a, b, a.dim(0), a.dim(1), a.dim(2), b.dim(1), false);
        }
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }

    Tensor<T> transpose_last2(const Tensor<T>& x) {
        if (x.ndim() < 2) throw ShapeError("transpose_last2: rank < 2, " + shape_str(x.shape()));
        Shape os = x.shape();
        std::swap(os[os.size() - 1], os[os.size() - 2]);
        const int m = x.dim(x.ndim() - 2), n = x.dim(x.ndim() - 1);
        const int64_t batches = x.numel() / (static_cast<int64_t>(m) * n);
        Tensor<T> out = make_like(os, x.requires_grad());
        const auto& xv = x.data();
        auto& ov = out.data();
        for (int64_t b = 0; b < batches; ++b) {
            const int64_t base = b * m * n;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    ov[static_cast<size_t>(base + static_cast<int64_t>(j) * m + i)] = xv[static_cast<size_t>(base + static_cast<int64_t>(i) * n + j)];
        }
        if (out.requires_grad()) {
            record([x, out, batches, m, n]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                for (int64_t b = 0; b < batches; ++b) {
                    const int64_t base = b * m * n;
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            gx[static_cast<size_t>(base + static_cast<int64_t>(i) * n + j)] += g[static_cast<size_t>(base + static_cast<int64_t>(j) * m + i)];
                }
            });
        }
        return out;
    }

    Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
        const int nd = x.ndim();
        if (static_cast<int>(perm.size()) != nd)
            throw ShapeError("permute: perm size " + std::to_string(perm.size()) + " vs rank " + std::to_string(nd));
        Shape os(static_cast<size_t>(nd));
        for (int i = 0; i < nd; ++i) os[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
        Tensor<T> out = make_like(os, x.requires_grad());
        auto in_strides = detail::row_major_strides(x.shape());
        auto out_strides = detail::row_major_strides(os);
        const auto& xv = x.data();
        auto& ov = out.data();
        const int64_t n = x.numel();
        std::vector<int> idx(static_cast<size_t>(nd), 0);
        for (int64_t lin = 0; lin < n; ++lin) {
            // idx enumerates the *output* index.
            int64_t src = 0;
            for (int i = 0; i < nd; ++i) src += static_cast<int64_t>(idx[static_cast<size_t>(i)]) * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            ov[static_cast<size_t>(lin)] = xv[static_cast<size_t>(src)];
            for (int i = nd - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < os[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
        if (out.requires_grad()) {
            std::vector<int> perm_copy = perm;
            record([x, out, perm_copy]() {
                const int nd2 = x.ndim();
                auto in_strides2 = detail::row_major_strides(x.shape());
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                const auto& os2 = out.shape();
                std::vector<int> idx2(static_cast<size_t>(nd2), 0);
                for (int64_t lin = 0; lin < out.numel(); ++lin) {
                    int64_t src = 0;
                    for (int i = 0; i < nd2; ++i) src += static_cast<int64_t>(idx2[static_cast<size_t>(i)]) * in_strides2[static_cast<size_t>(perm_copy[static_cast<size_t>(i)])];
                    gx[static_cast<size_t>(src)] += g[static_cast<size_t>(lin)];
                    for (int i = nd2 - 1; i >= 0; --i) {
                        if (++idx2[static_cast<size_t>(i)] < os2[static_cast<size_t>(i)]) break;
                        idx2[static_cast<size_t>(i)] = 0;
                    }
                }
            });
        }
        return out;
    }

    Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
        if (shape_numel(shape) != x.numel())
            throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
        Tensor<T> out = make_like(shape, x.requires_grad());
        out.data() = x.data();
        if (out.requires_grad()) {
            record([x, out]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            });
        }
        return out;
    }

    // ---- nonlinearities ----

    // Max-subtracted softmax along `axis` (negative counts from the end).
    Tensor<T> softmax(const Tensor<T>& x, int axis) {
        const int nd = x.ndim();
        if (axis < 0) axis += nd;
        if (axis < 0 || axis >= nd) throw ShapeError("softmax: bad axis");
        const int len = x.dim(axis);
        int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
        for (int i = 0; i < axis; ++i) outer *= x.dim(i);
        Tensor<T> out = make_like(x.shape(), x.requires_grad());
        const auto& xv = x.data();
        auto& ov = out.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double mx = -std::numeric_limits<double>::infinity();
                for (int a = 0; a < len; ++a) mx = std::max(mx, static_cast<double>(xv[static_cast<size_t>(base + a * inner)]));
                double sum = 0.0;
                for (int a = 0; a < len; ++a) sum += std::exp(static_cast<double>(xv[static_cast<size_t>(base + a * inner)]) - mx);
                for (int a = 0; a < len; ++a)
                    ov[static_cast<size_t>(base + a * inner)] =
                        static_cast<T>(std::exp(static_cast<double>(xv[static_cast<size_t>(base + a * inner)]) - mx) / sum);
            }
        }
        if (out.requires_grad()) {
            record([x, out, outer, inner, len]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                const auto& yv = out.data();
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t in = 0; in < inner; ++in) {
                        const int64_t base = o * len * inner + in;
                        double dot = 0.0;
                        for (int a = 0; a < len; ++a)
                            dot += static_cast<double>(g[static_cast<size_t>(base + a * inner)]) * static_cast<double>(yv[static_cast<size_t>(base + a * inner)]);
                        for (int a = 0; a < len; ++a) {
                            const size_t ix = static_cast<size_t>(base + a * inner);
                            gx[ix] += static_cast<T>(static_cast<double>(yv[ix]) * (static_cast<double>(g[ix]) - dot));
                        }
                    }
                }
            });
        }
        return out;
    }

    // Sets scores at invalid key positions to a large negative constant.
    // scores: (B,H,S,S) [query x key], key_valid: B*S bytes.
    Tensor<T> mask_keys(const Tensor<T>& scores, const std::vector<uint8_t>& key_valid) {
        if (scores.ndim() != 4) throw ShapeError("mask_keys: expected (B,H,S,S), got " + shape_str(scores.shape()));
        const int batch = scores.dim(0), heads = scores.dim(1), sq = scores.dim(2), sk = scores.dim(3);
        if (static_cast<int64_t>(key_valid.size()) != static_cast<int64_t>(batch) * sk)
            throw ShapeError("mask_keys: validity size mismatch");
        constexpr T kNeg = static_cast<T>(-1e9);
        Tensor<T> out = make_like(scores.shape(), scores.requires_grad());
        const auto& xv = scores.data();
        auto& ov = out.data();
        int64_t p = 0;
        for (int b = 0; b < batch; ++b) {
            const uint8_t* valid = key_valid.data() + static_cast<size_t>(b) * sk;
            for (int h = 0; h < heads; ++h)
                for (int q = 0; q < sq; ++q)
                    for (int k = 0; k < sk; ++k, ++p)
                        ov[static_cast<size_t>(p)] = valid[k] ? xv[static_cast<size_t>(p)] : kNeg;
        }
        if (out.requires_grad()) {
            auto kv = key_valid;
            record([scores, out, kv, batch, heads, sq, sk]() {
                auto& gx = const_cast<Tensor<T>&>(scores).grad();
                const auto& g = out.grad();
                int64_t p2 = 0;
                for (int b = 0; b < batch; ++b) {
                    const uint8_t* valid = kv.data() + static_cast<size_t>(b) * sk;
                    for (int h = 0; h < heads; ++h)
                        for (int q = 0; q < sq; ++q)
                            for (int k = 0; k < sk; ++k, ++p2)
                                if (valid[k]) gx[static_cast<size_t>(p2)] += g[static_cast<size_t>(p2)];
                }
            });
        }
        return out;
    }

    Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        double eps = 1e-5) {
        const int d = x.dim(x.ndim() - 1);
        if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d)
            throw ShapeError("layernorm: parameter shape mismatch for input " + shape_str(x.shape()));
        const int64_t rows = x.numel() / d;
        Tensor<T> out = make_like(x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
        // cache per-row mean and inverse stddev for backward
        auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);
        const auto& xv = x.data();
        const auto& gv = gamma.data();
        const auto& bv = beta.data();
        auto& ov = out.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = xv.data() + r * d;
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += static_cast<double>(row[j]);
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double c = static_cast<double>(row[j]) - mean;
                var += c * c;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps);
            (*stats)[static_cast<size_t>(r) * 2] = mean;
            (*stats)[static_cast<size_t>(r) * 2 + 1] = inv;
            for (int j = 0; j < d; ++j) {
                const double xh = (static_cast<double>(row[j]) - mean) * inv;
                ov[static_cast<size_t>(r * d + j)] = static_cast<T>(xh * static_cast<double>(gv[static_cast<size_t>(j)]) + static_cast<double>(bv[static_cast<size_t>(j)]));
            }
        }
        if (out.requires_grad()) {
            record([x, gamma, beta, out, stats, rows, d]() {
                const auto& g = out.grad();
                const auto& xv2 = x.data();
                const auto& gv2 = gamma.data();
                for (int64_t r = 0; r < rows; ++r) {
                    const double mean = (*stats)[static_cast<size_t>(r) * 2];
                    const double inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
                    const T* row = xv2.data() + r * d;
                    const T* grow = g.data() + r * d;
                    double m1 = 0.0, m2 = 0.0;  // mean(dxh), mean(dxh * xh)
                    for (int j = 0; j < d; ++j) {
                        const double xh = (static_cast<double>(row[j]) - mean) * inv;
                        const double dxh = static_cast<double>(grow[j]) * static_cast<double>(gv2[static_cast<size_t>(j)]);
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    m1 /= d;
                    m2 /= d;
                    if (x.requires_grad()) {
                        auto& gx = const_cast<Tensor<T>&>(x).grad();
                        for (int j = 0; j < d; ++j) {
                            const double xh = (static_cast<double>(row[j]) - mean) * inv;
                            const double dxh = static_cast<double>(grow[j]) * static_cast<double>(gv2[static_cast<size_t>(j)]);
                            gx[static_cast<size_t>(r * d + j)] += static_cast<T>((dxh - m1 - xh * m2) * inv);
                        }
                    }
                    if (gamma.requires_grad() || beta.requires_grad()) {
                        auto& gg = const_cast<Tensor<T>&>(gamma).grad();
                        auto& gb = const_cast<Tensor<T>&>(beta).grad();
                        for (int j = 0; j < d; ++j) {
                            const double xh = (static_cast<double>(row[j]) - mean) * inv;
                            if (gamma.requires_grad()) gg[static_cast<size_t>(j)] += static_cast<T>(static_cast<double>(grow[j]) * xh);
                            if (beta.requires_grad()) gb[static_cast<size_t>(j)] += grow[j];
                        }
                    }
                }
            });
        }
        return out;
    }

    // Exact (erf-based) GELU.
    Tensor<T> gelu(const Tensor<T>& x) {
        Tensor<T> out = make_like(x.shape(), x.requires_grad());
        const auto& xv = x.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ov.size(); ++i) {
            const double v = static_cast<double>(xv[i]);
            ov[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
        }
        if (out.requires_grad()) {
            record([x, out]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                const auto& xv2 = x.data();
                for (size_t i = 0; i < g.size(); ++i) {
                    const double v = static_cast<double>(xv2[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
                    const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
                    gx[i] += static_cast<T>(static_cast<double>(g[i]) * (cdf + v * pdf));
                }
            });
        }
        return out;
    }

    // ---- lookups and reductions ----

    // ids (batch*seq, flattened) into table (V, D) -> (batch, seq, D).
    Tensor<T> embedding(const std::vector<int>& ids, int batch, int seq, const Tensor<T>& table) {
        if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(batch) * seq)
            throw ShapeError("embedding: ids size mismatch");
        const int vocab = table.dim(0), d = table.dim(1);
        for (int id : ids)
            if (id < 0 || id >= vocab)
                throw InputError("embedding: token id " + std::to_string(id) + " out of range [0," +
                                 std::to_string(vocab) + ")");
        Tensor<T> out = make_like({batch, seq, d}, table.requires_grad());
        const auto& tv = table.data();
        auto& ov = out.data();
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(tv.data() + static_cast<size_t>(ids[i]) * d, d, ov.data() + i * d);
        if (out.requires_grad()) {
            auto ids_copy = ids;
            record([table, out, ids_copy, d]() {
                auto& gt = const_cast<Tensor<T>&>(table).grad();
                const auto& g = out.grad();
                for (size_t i = 0; i < ids_copy.size(); ++i) {
                    T* dst = gt.data() + static_cast<size_t>(ids_copy[i]) * d;
                    const T* src = g.data() + i * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            });
        }
        return out;
    }

    // x (B,S,D) -> (B,D), the row at sequence position `pos`.
    Tensor<T> select_position(const Tensor<T>& x, int pos) {
        if (x.ndim() != 3) throw ShapeError("select_position: expected (B,S,D), got " + shape_str(x.shape()));
        const int batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
        if (pos < 0 || pos >= seq) throw ContractError("select_position: position out of range");
        Tensor<T> out = make_like({batch, d}, x.requires_grad());
        const auto& xv = x.data();
        auto& ov = out.data();
        for (int b = 0; b < batch; ++b)
            std::copy_n(xv.data() + (static_cast<int64_t>(b) * seq + pos) * d, d, ov.data() + static_cast<int64_t>(b) * d);
        if (out.requires_grad()) {
            record([x, out, pos, batch, seq, d]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const auto& g = out.grad();
                for (int b = 0; b < batch; ++b) {
                    T* dst = gx.data() + (static_cast<int64_t>(b) * seq + pos) * d;
                    const T* src = g.data() + static_cast<int64_t>(b) * d;
                    for (int j = 0; j < d; ++j) dst[j] += src[j];
                }
            });
        }
        return out;
    }

    // Weighted mean cross entropy over rows of logits (N, V).
    // loss = sum_i w_i * (logsumexp(logits_i) - logits_i[t_i]) / sum_i w_i
    Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& targets,
                                   const std::vector<double>& weights) {
        if (logits.ndim() != 2) throw ShapeError("cross_entropy_logits: expected (N,V), got " + shape_str(logits.shape()));
        const int n = logits.dim(0), v = logits.dim(1);
        if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
            throw ShapeError("cross_entropy_logits: targets/weights size mismatch");
        double wsum = 0.0;
        for (double w : weights) {
            if (w < 0) throw ContractError("cross_entropy_logits: negative weight");
            wsum += w;
        }
        if (wsum <= 0) throw ContractError("cross_entropy_logits: no weighted positions");
        const auto& lv = logits.data();
        auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            if (weights[static_cast<size_t>(i)] == 0.0) continue;
            const int t = targets[static_cast<size_t>(i)];
            if (t < 0 || t >= v) throw InputError("cross_entropy_logits: target out of range");
            const T* row = lv.data() + static_cast<int64_t>(i) * v;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double s = 0.0;
            for (int j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
            const double l = std::log(s) + mx;
            (*lse)[static_cast<size_t>(i)] = l;
            total += weights[static_cast<size_t>(i)] * (l - static_cast<double>(row[t]));
        }
        Tensor<T> out = make_like({1}, logits.requires_grad());
        out.data()[0] = static_cast<T>(total / wsum);
        if (out.requires_grad()) {
            auto tg = targets;
            auto wt = weights;
            record([logits, out, tg, wt, lse, wsum, n, v]() {
                auto& gl = const_cast<Tensor<T>&>(logits).grad();
                const double go = static_cast<double>(out.grad()[0]);
                const auto& lv2 = logits.data();
                for (int i = 0; i < n; ++i) {
                    const double w = wt[static_cast<size_t>(i)];
                    if (w == 0.0) continue;
                    const double scale = go * w / wsum;
                    const T* row = lv2.data() + static_cast<int64_t>(i) * v;
                    const double l = (*lse)[static_cast<size_t>(i)];
                    T* grow = gl.data() + static_cast<int64_t>(i) * v;
                    for (int j = 0; j < v; ++j) {
                        const double p = std::exp(static_cast<double>(row[j]) - l);
                        grow[j] += static_cast<T>(scale * p);
                    }
                    grow[tg[static_cast<size_t>(i)]] -= static_cast<T>(scale);
                }
            });
        }
        return out;
    }

    Tensor<T> sum(const Tensor<T>& x) {
        Tensor<T> out = make_like({1}, x.requires_grad());
        double acc = 0.0;
        for (const T& v : x.data()) acc += static_cast<double>(v);
        out.data()[0] = static_cast<T>(acc);
        if (out.requires_grad()) {
            record([x, out]() {
                auto& gx = const_cast<Tensor<T>&>(x).grad();
                const T g = out.grad()[0];
                for (auto& v : gx) v += g;
            });
        }
        return out;
    }

private:
    std::vector<std::function<void()>> steps_;

    void record(std::function<void()> fn) { steps_.push_back(std::move(fn)); }

    Tensor<T> make_like(Shape shape, bool requires_grad) {
        Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
        t.set_producer(this);
        return t;
    }

    static void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
        if (a.shape() != b.shape())
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }

    static void check_inner(const char* op, const Tensor<T>& a, const Tensor<T>& b, int ak, int bk) {
        if (ak != bk)
            throw ShapeError(std::string(op) + ": inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }

    Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, int batches, int m, int k, int n,
                          bool b_batched) {
        Shape os = (a.ndim() == 2) ? Shape{m, n} : Shape{batches, m, n};
        Tensor<T> out = make_like(os, a.requires_grad() || b.requires_grad());
        const auto& av = a.data();
        const auto& bv = b.data();
        auto& ov = out.data();
        for (int bi = 0; bi < batches; ++bi) {
            detail::gemm_nn(m, k, n, av.data() + static_cast<int64_t>(bi) * m * k,
                            bv.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0),
                            ov.data() + static_cast<int64_t>(bi) * m * n, false);
        }
        if (out.requires_grad()) {
            record([a, b, out, batches, m, k, n, b_batched]() {
                const auto& g = out.grad();
                const auto& av2 = a.data();
                const auto& bv2 = b.data();
                for (int bi = 0; bi < batches; ++bi) {
                    const T* gslice = g.data() + static_cast<int64_t>(bi) * m * n;
                    const T* aslice = av2.data() + static_cast<int64_t>(bi) * m * k;
                    const T* bslice = bv2.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0);
                    if (a.requires_grad()) {
                        auto& ga = const_cast<Tensor<T>&>(a).grad();
                        detail::gemm_nt(m, n, k, gslice, bslice, ga.data() + static_cast<int64_t>(bi) * m * k, true);
                    }
                    if (b.requires_grad()) {
                        auto& gb = const_cast<Tensor<T>&>(b).grad();
                        detail::gemm_tn(m, k, n, aslice, gslice,
                                        gb.data() + (b_batched ? static_cast<int64_t>(bi) * k * n : 0), true);
                    }
                }
            });
        }
        return out;
    }
};

}  // namespace headlab
