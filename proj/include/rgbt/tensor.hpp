#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rgbt/common.hpp"
#include "rgbt/rng.hpp"

namespace rgbt {

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

// Cephes-style expf, ~2 ulp. Softmax/sigmoid over attention maps are hot
// enough that libm exp shows up in profiles.
inline float fast_expf(float x) {
    if (x > 88.3762626647949f) x = 88.3762626647949f;
    if (x < -87.3365478515625f) x = -87.3365478515625f;
    float n = std::floor(1.44269504088896341f * x + 0.5f);
    x -= n * 0.693359375f;
    x -= n * -2.12194440e-4f;
    float z = x * x;
    float p = 1.9875691500e-4f;
    p = p * x + 1.3981999507e-3f;
    p = p * x + 8.3334519073e-3f;
    p = p * x + 4.1665795894e-2f;
    p = p * x + 1.6666665459e-1f;
    p = p * x + 5.0000001201e-1f;
    float y = p * z + x + 1.0f;
    return std::ldexp(y, static_cast<int>(n));
}

template <typename T>
inline T t_exp(T x) {
    return std::exp(x);
}
template <>
inline float t_exp<float>(float x) {
    return fast_expf(x);
}

template <typename T>
inline T t_sigmoid(T x) {
    return T(1) / (T(1) + t_exp(-x));
}

// ---------------------------------------------------------------------------
// Shape / broadcast utilities (trailing-dimension alignment)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        i64 da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        i64 db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::vector<i64> row_major_strides(const Shape& s) {
    std::vector<i64> st(s.size());
    i64 acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Element strides of `in` viewed through `out`, zero on broadcast dims.
inline std::vector<i64> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<i64> st(out.size(), 0);
    auto in_st = row_major_strides(in);
    const size_t off = out.size() - in.size();
    for (size_t i = 0; i < in.size(); ++i) {
        st[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : in_st[i];
    }
    return st;
}

// Visits every output element with the matching offsets into two (possibly
// broadcast) inputs. f(linear_out_index, a_offset, b_offset).
template <class F>
inline void for_each_broadcast(const Shape& out, const std::vector<i64>& sa,
                               const std::vector<i64>& sb, F&& f) {
    const i64 n = numel_of(out);
    const int rank = static_cast<int>(out.size());
    if (rank == 0) {
        f(i64(0), i64(0), i64(0));
        return;
    }
    std::vector<i64> idx(rank, 0);
    i64 ao = 0, bo = 0;
    for (i64 i = 0;;) {
        f(i, ao, bo);
        if (++i == n) break;
        for (int d = rank - 1;; --d) {
            ++idx[d];
            ao += sa[d];
            bo += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            ao -= sa[d] * out[d];
            bo -= sb[d] * out[d];
        }
    }
}

// ---------------------------------------------------------------------------
// GEMM kernel. C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
// Accumulation order over k is ascending for every output element, so results
// do not depend on the row-blocking factor.
// ---------------------------------------------------------------------------

template <typename T>
inline void gemm_acc(i64 M, i64 K, i64 N, const T* A, const T* B, T* C) {
    i64 m = 0;
    for (; m + 4 <= M; m += 4) {
        const T* a0 = A + (m + 0) * K;
        const T* a1 = A + (m + 1) * K;
        const T* a2 = A + (m + 2) * K;
        const T* a3 = A + (m + 3) * K;
        T* c0 = C + (m + 0) * N;
        T* c1 = C + (m + 1) * N;
        T* c2 = C + (m + 2) * N;
        T* c3 = C + (m + 3) * N;
        for (i64 k = 0; k < K; ++k) {
            const T* bk = B + k * N;
            const T x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
            for (i64 n = 0; n < N; ++n) {
                c0[n] += x0 * bk[n];
                c1[n] += x1 * bk[n];
                c2[n] += x2 * bk[n];
                c3[n] += x3 * bk[n];
            }
        }
    }
    for (; m < M; ++m) {
        const T* am = A + m * K;
        T* cm = C + m * N;
        for (i64 k = 0; k < K; ++k) {
            const T* bk = B + k * N;
            const T x = am[k];
            for (i64 n = 0; n < N; ++n) cm[n] += x * bk[n];
        }
    }
}

template <typename T>
inline void transpose_2d(i64 R, i64 C, const T* src, T* dst) {
    constexpr i64 kBlock = 32;
    for (i64 r0 = 0; r0 < R; r0 += kBlock) {
        for (i64 c0 = 0; c0 < C; c0 += kBlock) {
            const i64 r1 = std::min(r0 + kBlock, R);
            const i64 c1 = std::min(c0 + kBlock, C);
            for (i64 r = r0; r < r1; ++r)
                for (i64 c = c0; c < c1; ++c) dst[c * R + r] = src[r * C + c];
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor with a reverse-mode tape
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph recording in scope (sampling, evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first use, accumulates additively
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class TensorT {
  public:
    using Node = TensorNode<T>;

    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), T(0)); }
    static TensorT ones(Shape shape) { return filled(std::move(shape), T(1)); }

    static TensorT filled(Shape shape, T v) {
        auto n = std::make_shared<Node>();
        n->value.assign(numel_of(shape), v);
        n->shape = std::move(shape);
        return TensorT(std::move(n));
    }

    static TensorT from_data(Shape shape, std::vector<T> data) {
        if (numel_of(shape) != static_cast<i64>(data.size())) {
            throw ShapeError("data of size " + std::to_string(data.size()) +
                             " does not fill shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return TensorT(std::move(n));
    }

    static TensorT scalar(T v) { return filled(Shape{}, v); }

    static TensorT randn(Shape shape, Rng& rng) {
        auto t = zeros(std::move(shape));
        for (T& x : t.node()->value) x = static_cast<T>(rng.normal());
        return t;
    }

    static TensorT uniform(Shape shape, Rng& rng, double lo, double hi) {
        auto t = zeros(std::move(shape));
        for (T& x : t.node()->value) x = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    i64 numel() const { return static_cast<i64>(n_->value.size()); }
    i64 dim(int i) const { return n_->shape.at(i); }

    std::span<T> data() { return n_->value; }
    std::span<const T> data() const { return n_->value; }
    std::span<const T> grad() const { return n_->grad; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
    }

    bool has_grad() const { return !n_->grad.empty(); }

    // Reverse-mode through the recorded graph. Gradients accumulate; callers
    // zero them explicitly between steps.
    void backward() const {
        if (numel() != 1) {
            throw ShapeError("backward() requires a scalar loss, got " + shape_str(shape()));
        }
        if (!n_->requires_grad) return;

        // Iterative post-order DFS over grad-requiring ancestors.
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->ensure_grad();
        n_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward) node->backward(*node);
        }
    }

    std::shared_ptr<Node>& node() { return n_; }
    const std::shared_ptr<Node>& node() const { return n_; }

    explicit TensorT(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  private:
    std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;

template <typename T>
inline bool recording(std::initializer_list<const TensorT<T>*> inputs) {
    if (!detail::grad_mode()) return false;
    for (auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// ---------------------------------------------------------------------------
// Elementwise ops with broadcasting
// ---------------------------------------------------------------------------

// fwd(a, b) -> out; ba/bb map (gout, a, b) -> gradient contribution.
template <typename T, class F, class BA, class BB>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, F fwd, BA ba, BB bb) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto out = TensorT<T>::zeros(out_shape);
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T* ov = out.data().data();

    if (a.shape() == b.shape()) {
        const i64 n = a.numel();
        for (i64 i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
    } else if (b.numel() == 1) {
        const T s = bv[0];
        const i64 n = a.numel();
        for (i64 i = 0; i < n; ++i) ov[i] = fwd(av[i], s);
    } else if (a.numel() == 1) {
        const T s = av[0];
        const i64 n = b.numel();
        for (i64 i = 0; i < n; ++i) ov[i] = fwd(s, bv[i]);
    } else {
        auto sa = broadcast_strides(a.shape(), out_shape);
        auto sb = broadcast_strides(b.shape(), out_shape);
        for_each_broadcast(out_shape, sa, sb,
                           [&](i64 i, i64 ao, i64 bo) { ov[i] = fwd(av[ao], bv[bo]); });
    }

    if (recording<T>({&a, &b})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node(), b.node()};
        n->backward = [ba, bb](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            const bool ga = A.requires_grad, gb = B.requires_grad;
            if (ga) A.ensure_grad();
            if (gb) B.ensure_grad();
            auto sa = broadcast_strides(A.shape, self.shape);
            auto sb = broadcast_strides(B.shape, self.shape);
            const T* av = A.value.data();
            const T* bv = B.value.data();
            const T* g = self.grad.data();
            T* gA = A.grad.data();
            T* gB = B.grad.data();
            for_each_broadcast(self.shape, sa, sb, [&](i64 i, i64 ao, i64 bo) {
                if (ga) gA[ao] += ba(g[i], av[ao], bv[bo]);
                if (gb) gB[bo] += bb(g[i], av[ao], bv[bo]);
            });
        };
    }
    return out;
}

// dfdx maps (gout, x, y) -> gradient; y is the op output.
template <typename T, class F, class D>
TensorT<T> unary_op(const TensorT<T>& a, F fwd, D dfdx) {
    auto out = TensorT<T>::zeros(a.shape());
    const T* av = a.data().data();
    T* ov = out.data().data();
    const i64 n = a.numel();
    for (i64 i = 0; i < n; ++i) ov[i] = fwd(av[i]);

    if (recording<T>({&a})) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {a.node()};
        node->backward = [dfdx](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            const i64 n = static_cast<i64>(self.value.size());
            const T* g = self.grad.data();
            const T* x = A.value.data();
            const T* y = self.value.data();
            T* gA = A.grad.data();
            for (i64 i = 0; i < n; ++i) gA[i] += dfdx(g[i], x[i], y[i]);
        };
    }
    return out;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
        [](T g, T x, T y) { return -g * x / (y * y); });
}

// y = mul * x + add
template <typename T>
TensorT<T> affine(const TensorT<T>& a, T mul_c, T add_c) {
    return unary_op(
        a, [mul_c, add_c](T x) { return mul_c * x + add_c; },
        [mul_c](T g, T, T) { return mul_c * g; });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return affine(a, T(-1), T(0));
}

template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return x * t_sigmoid(x); },
        [](T g, T x, T) {
            const T s = t_sigmoid(x);
            return g * s * (T(1) + x * (T(1) - s));
        });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return t_sigmoid(x); },
        [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
TensorT<T> square(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return x * x; }, [](T g, T x, T) { return T(2) * g * x; });
}

template <typename T>
TensorT<T> abs(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return std::abs(x); },
        [](T g, T x, T) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    return unary_op(
        a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](T g, T x, T) { return (x >= lo && x <= hi) ? g : T(0); });
}

template <typename T>
TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) {
    return add(a, b);
}
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) {
    return sub(a, b);
}
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) {
    return mul(a, b);
}
template <typename T>
TensorT<T> operator/(const TensorT<T>& a, const TensorT<T>& b) {
    return div(a, b);
}
template <typename T>
TensorT<T> operator*(const TensorT<T>& a, double s) {
    return affine(a, static_cast<T>(s), T(0));
}
template <typename T>
TensorT<T> operator*(double s, const TensorT<T>& a) {
    return affine(a, static_cast<T>(s), T(0));
}
template <typename T>
TensorT<T> operator+(const TensorT<T>& a, double s) {
    return affine(a, T(1), static_cast<T>(s));
}
template <typename T>
TensorT<T> operator-(const TensorT<T>& a, double s) {
    return affine(a, T(1), static_cast<T>(-s));
}

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    double acc = 0;
    for (T x : a.data()) acc += static_cast<double>(x);
    auto out = TensorT<T>::scalar(static_cast<T>(acc));
    if (recording<T>({&a})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node()};
        n->backward = [](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            const T g = self.grad[0];
            for (T& x : A.grad) x += g;
        };
    }
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    const i64 n = a.numel();
    if (n == 0) throw ShapeError("mean of empty tensor");
    double acc = 0;
    for (T x : a.data()) acc += static_cast<double>(x);
    auto out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (recording<T>({&a})) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {a.node()};
        node->backward = [n](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            const T g = self.grad[0] / static_cast<T>(n);
            for (T& x : A.grad) x += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel()) {
        throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(new_shape));
    }
    auto out = TensorT<T>::from_data(std::move(new_shape), {a.data().begin(), a.data().end()});
    if (recording<T>({&a})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node()};
        n->backward = [](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            const i64 n = static_cast<i64>(self.value.size());
            for (i64 i = 0; i < n; ++i) A.grad[i] += self.grad[i];
        };
    }
    return out;
}

namespace detail {
template <typename T>
inline void permute_copy(const Shape& in_shape, const std::vector<int>& perm, const T* src, T* dst,
                         bool add) {
    const int rank = static_cast<int>(in_shape.size());
    Shape out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];
    auto in_st = row_major_strides(in_shape);
    auto out_st = row_major_strides(out_shape);
    // walk the input linearly; compute matching output offset incrementally
    std::vector<i64> dst_stride_of_in_dim(rank);
    for (int i = 0; i < rank; ++i) {
        // position of input dim d in the output
        for (int o = 0; o < rank; ++o)
            if (perm[o] == i) dst_stride_of_in_dim[i] = out_st[o];
    }
    const i64 n = numel_of(in_shape);
    std::vector<i64> idx(rank, 0);
    i64 dof = 0;
    for (i64 i = 0;;) {
        if (add)
            dst[dof] += src[i];
        else
            dst[dof] = src[i];
        if (++i == n) break;
        for (int d = rank - 1;; --d) {
            ++idx[d];
            dof += dst_stride_of_in_dim[d];
            if (idx[d] < in_shape[d]) break;
            idx[d] = 0;
            dof -= dst_stride_of_in_dim[d] * in_shape[d];
        }
    }
}
}  // namespace detail

template <typename T>
TensorT<T> permute(const TensorT<T>& a, std::vector<int> perm) {
    const int rank = static_cast<int>(a.shape().size());
    if (static_cast<int>(perm.size()) != rank) {
        throw ShapeError("permute order size " + std::to_string(perm.size()) +
                         " does not match rank of " + shape_str(a.shape()));
    }
    Shape out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = a.shape()[perm[i]];
    auto out = TensorT<T>::zeros(out_shape);
    detail::permute_copy(a.shape(), perm, a.data().data(), out.data().data(), false);
    if (recording<T>({&a})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node()};
        n->backward = [perm](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            // scatter self.grad (out layout) back into A's layout:
            // inverse permutation applied to the out tensor
            const int rank = static_cast<int>(perm.size());
            std::vector<int> inv(rank);
            for (int i = 0; i < rank; ++i) inv[perm[i]] = i;
            detail::permute_copy(self.shape, inv, self.grad.data(), A.grad.data(), true);
        };
    }
    return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int dim) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int rank = static_cast<int>(parts[0].shape().size());
    if (dim < 0) dim += rank;
    Shape out_shape = parts[0].shape();
    i64 total = 0;
    for (const auto& p : parts) {
        if (static_cast<int>(p.shape().size()) != rank)
            throw ShapeError("concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        for (int i = 0; i < rank; ++i) {
            if (i != dim && p.shape()[i] != out_shape[i])
                throw ShapeError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.shape()[dim];
    }
    out_shape[dim] = total;

    i64 outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= out_shape[i];
    for (int i = dim + 1; i < rank; ++i) inner *= out_shape[i];

    auto out = TensorT<T>::zeros(out_shape);
    T* ov = out.data().data();
    const i64 out_row = total * inner;
    i64 at = 0;
    for (const auto& p : parts) {
        const i64 rows = p.shape()[dim] * inner;
        const T* pv = p.data().data();
        for (i64 o = 0; o < outer; ++o) {
            std::memcpy(ov + o * out_row + at, pv + o * rows, sizeof(T) * rows);
        }
        at += rows;
    }

    bool rec = detail::grad_mode();
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (rec && any) {
        auto* n = out.node().get();
        n->requires_grad = true;
        for (const auto& p : parts) n->parents.push_back(p.node());
        n->backward = [dim, outer, inner](TensorNode<T>& self) {
            const i64 out_row = self.shape[dim] * inner;
            i64 at = 0;
            for (auto& pp : self.parents) {
                auto& P = *pp;
                const i64 rows = P.shape[dim] * inner;
                if (P.requires_grad) {
                    P.ensure_grad();
                    for (i64 o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + o * out_row + at;
                        T* gp = P.grad.data() + o * rows;
                        for (i64 i = 0; i < rows; ++i) gp[i] += g[i];
                    }
                }
                at += rows;
            }
        };
    }
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int dim, i64 start, i64 len) {
    const int rank = static_cast<int>(a.shape().size());
    if (dim < 0) dim += rank;
    if (dim < 0 || dim >= rank || start < 0 || len < 0 || start + len > a.shape()[dim]) {
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for dim " + std::to_string(dim) + " of " +
                         shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape[dim] = len;
    i64 outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= a.shape()[i];
    for (int i = dim + 1; i < rank; ++i) inner *= a.shape()[i];

    auto out = TensorT<T>::zeros(out_shape);
    const i64 in_row = a.shape()[dim] * inner;
    const i64 out_row = len * inner;
    const T* av = a.data().data();
    T* ov = out.data().data();
    for (i64 o = 0; o < outer; ++o) {
        std::memcpy(ov + o * out_row, av + o * in_row + start * inner, sizeof(T) * out_row);
    }
    if (recording<T>({&a})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node()};
        n->backward = [outer, inner, start, in_row, out_row](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            A.ensure_grad();
            for (i64 o = 0; o < outer; ++o) {
                const T* g = self.grad.data() + o * out_row;
                T* gp = A.grad.data() + o * in_row + start * inner;
                for (i64 i = 0; i < out_row; ++i) gp[i] += g[i];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched matrix multiply: [.., m, k] x [.., k, n] -> [.., m, n]
// Leading dims broadcast under the usual trailing-dimension rules.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw ShapeError("matmul requires rank >= 2, got " + shape_str(sa) + " and " +
                         shape_str(sb));
    }
    const i64 M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    const i64 Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != Kb) {
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(sa) + " x " +
                         shape_str(sb));
    }
    Shape la(sa.begin(), sa.end() - 2), lb(sb.begin(), sb.end() - 2);
    Shape batch = broadcast_shape(la, lb);
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);

    const i64 nbatch = numel_of(batch);
    auto stride_a = broadcast_strides(la, batch);
    auto stride_b = broadcast_strides(lb, batch);
    // offsets measured in matrices
    auto out = TensorT<T>::zeros(out_shape);
    const T* av = a.data().data();
    const T* bv = b.data().data();
    T* ov = out.data().data();

    auto batch_offsets = [&](i64 bi, i64& ao, i64& bo) {
        ao = 0;
        bo = 0;
        i64 rem = bi;
        for (int d = static_cast<int>(batch.size()) - 1; d >= 0; --d) {
            const i64 id = rem % batch[d];
            rem /= batch[d];
            ao += id * stride_a[d];
            bo += id * stride_b[d];
        }
    };

    // batch strides are measured in whole matrices
    for (i64 bi = 0; bi < nbatch; ++bi) {
        i64 ao, bo;
        batch_offsets(bi, ao, bo);
        gemm_acc(M, K, N, av + ao * M * K, bv + bo * K * N, ov + bi * M * N);
    }

    if (recording<T>({&a, &b})) {
        auto* n = out.node().get();
        n->requires_grad = true;
        n->parents = {a.node(), b.node()};
        n->backward = [M, K, N, batch, stride_a, stride_b](TensorNode<T>& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            const bool ga = A.requires_grad, gb = B.requires_grad;
            if (ga) A.ensure_grad();
            if (gb) B.ensure_grad();
            const i64 nbatch = numel_of(batch);
            auto offsets = [&](i64 bi, i64& ao, i64& bo) {
                ao = 0;
                bo = 0;
                i64 rem = bi;
                for (int d = static_cast<int>(batch.size()) - 1; d >= 0; --d) {
                    const i64 id = rem % batch[d];
                    rem /= batch[d];
                    ao += id * stride_a[d];
                    bo += id * stride_b[d];
                }
            };
            const T* av = A.value.data();
            const T* bv = B.value.data();
            const T* g = self.grad.data();
            std::vector<T> scratch;
            for (i64 bi = 0; bi < nbatch; ++bi) {
                i64 ao, bo;
                offsets(bi, ao, bo);
                const T* gb_mat = g + bi * M * N;
                if (ga) {
                    // dA += G * B^T
                    scratch.assign(N * K, T(0));
                    transpose_2d(K, N, bv + bo * K * N, scratch.data());
                    gemm_acc(M, N, K, gb_mat, scratch.data(), A.grad.data() + ao * M * K);
                }
                if (gb) {
                    // dB += A^T * G
                    scratch.assign(M * K, T(0));
                    transpose_2d(M, K, av + ao * M * K, scratch.data());
                    gemm_acc(K, M, N, scratch.data(), gb_mat, B.grad.data() + bo * K * N);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: x [N,C,H,W], w [O,C,kh,kw], optional bias [O]
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline void im2col(const T* x, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad, i64 OH,
                   i64 OW, T* col) {
    for (i64 c = 0; c < C; ++c) {
        for (i64 ki = 0; ki < kh; ++ki) {
            for (i64 kj = 0; kj < kw; ++kj) {
                T* row = col + ((c * kh + ki) * kw + kj) * OH * OW;
                for (i64 oh = 0; oh < OH; ++oh) {
                    const i64 ih = oh * stride - pad + ki;
                    T* dst = row + oh * OW;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + OW, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + ih) * W;
                    // valid ow range: 0 <= ow*stride - pad + kj < W
                    i64 lo = 0;
                    while (lo < OW && lo * stride - pad + kj < 0) ++lo;
                    i64 hi = OW;
                    while (hi > lo && (hi - 1) * stride - pad + kj >= W) --hi;
                    std::fill(dst, dst + lo, T(0));
                    if (stride == 1) {
                        const i64 base = lo - pad + kj;
                        std::memcpy(dst + lo, src + base, sizeof(T) * (hi - lo));
                    } else {
                        for (i64 ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride - pad + kj];
                    }
                    std::fill(dst + hi, dst + OW, T(0));
                }
            }
        }
    }
}

template <typename T>
inline void col2im_acc(const T* col, i64 C, i64 H, i64 W, i64 kh, i64 kw, i64 stride, i64 pad,
                       i64 OH, i64 OW, T* x_grad) {
    for (i64 c = 0; c < C; ++c) {
        for (i64 ki = 0; ki < kh; ++ki) {
            for (i64 kj = 0; kj < kw; ++kj) {
                const T* row = col + ((c * kh + ki) * kw + kj) * OH * OW;
                for (i64 oh = 0; oh < OH; ++oh) {
                    const i64 ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = x_grad + (c * H + ih) * W;
                    const T* src = row + oh * OW;
                    i64 lo = 0;
                    while (lo < OW && lo * stride - pad + kj < 0) ++lo;
                    i64 hi = OW;
                    while (hi > lo && (hi - 1) * stride - pad + kj >= W) --hi;
                    for (i64 ow = lo; ow < hi; ++ow) dst[ow * stride - pad + kj] += src[ow];
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, i64 stride,
                  i64 pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4) {
        throw ShapeError("conv2d expects x [N,C,H,W] and w [O,C,kh,kw], got " + shape_str(xs) +
                         " and " + shape_str(ws));
    }
    const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const i64 O = ws[0], Cw = ws[1], kh = ws[2], kw = ws[3];
    if (C != Cw) {
        throw ShapeError("conv2d channel mismatch: input " + shape_str(xs) + " vs weight " +
                         shape_str(ws));
    }
    if (stride < 1 || pad < 0 || kh > H + 2 * pad || kw > W + 2 * pad) {
        throw ShapeError("conv2d invalid geometry: kernel " + shape_str(ws) + ", input " +
                         shape_str(xs) + ", stride " + std::to_string(stride) + ", pad " +
                         std::to_string(pad));
    }
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != O)) {
        throw ShapeError("conv2d bias must be [O], got " + shape_str(bias.shape()));
    }
    const i64 OH = (H + 2 * pad - kh) / stride + 1;
    const i64 OW = (W + 2 * pad - kw) / stride + 1;
    const i64 CKK = C * kh * kw;
    const i64 L = OH * OW;
    const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    auto out = TensorT<T>::zeros({N, O, OH, OW});
    const T* xv = x.data().data();
    const T* wv = w.data().data();
    T* ov = out.data().data();

    std::vector<T> col;
    if (!pointwise) col.resize(CKK * L);
    for (i64 n = 0; n < N; ++n) {
        const T* xn = xv + n * C * H * W;
        const T* cn = pointwise ? xn : col.data();
        if (!pointwise) detail::im2col(xn, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
        gemm_acc(O, CKK, L, wv, cn, ov + n * O * L);
    }
    if (bias.defined()) {
        const T* bv = bias.data().data();
        for (i64 n = 0; n < N; ++n) {
            for (i64 o = 0; o < O; ++o) {
                T* dst = ov + (n * O + o) * L;
                const T b = bv[o];
                for (i64 i = 0; i < L; ++i) dst[i] += b;
            }
        }
    }

    const bool rec = bias.defined() ? recording<T>({&x, &w, &bias}) : recording<T>({&x, &w});
    if (rec) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {x.node(), w.node()};
        if (bias.defined()) node->parents.push_back(bias.node());
        node->backward = [N, C, H, W, O, kh, kw, stride, pad, OH, OW](TensorNode<T>& self) {
            auto& X = *self.parents[0];
            auto& Wt = *self.parents[1];
            TensorNode<T>* Bp = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
            const i64 CKK = C * kh * kw;
            const i64 L = OH * OW;
            const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
            const bool gx = X.requires_grad, gw = Wt.requires_grad;
            const bool gb = Bp && Bp->requires_grad;
            if (gx) X.ensure_grad();
            if (gw) Wt.ensure_grad();
            if (gb) Bp->ensure_grad();
            const T* xv = X.value.data();
            const T* wv = Wt.value.data();
            const T* g = self.grad.data();

            std::vector<T> col, colT, wT, dcol;
            if (!pointwise && (gw || gx)) col.resize(CKK * L);
            if (gw) colT.resize(L * CKK);
            if (gx) {
                wT.assign(CKK * O, T(0));
                transpose_2d(O, CKK, wv, wT.data());
                dcol.resize(CKK * L);
            }
            for (i64 n = 0; n < N; ++n) {
                const T* xn = xv + n * C * H * W;
                const T* gn = g + n * O * L;
                const T* cn = nullptr;
                if (gw || gx) {
                    if (pointwise) {
                        cn = xn;
                    } else {
                        detail::im2col(xn, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
                        cn = col.data();
                    }
                }
                if (gw) {
                    transpose_2d(CKK, L, cn, colT.data());
                    gemm_acc(O, L, CKK, gn, colT.data(), Wt.grad.data());
                }
                if (gx) {
                    T* xg = X.grad.data() + n * C * H * W;
                    if (pointwise) {
                        gemm_acc(CKK, O, L, wT.data(), gn, xg);
                    } else {
                        std::fill(dcol.begin(), dcol.end(), T(0));
                        gemm_acc(CKK, O, L, wT.data(), gn, dcol.data());
                        detail::col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW, xg);
                    }
                }
                if (gb) {
                    for (i64 o = 0; o < O; ++o) {
                        double acc = 0;
                        const T* row = gn + o * L;
                        for (i64 i = 0; i < L; ++i) acc += static_cast<double>(row[i]);
                        Bp->grad[o] += static_cast<T>(acc);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// group_norm: x [N,C,H,W]; scale/shift [C]. Statistics in double.
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, i64 groups, double eps, const TensorT<T>& scale,
                      const TensorT<T>& shift) {
    const auto& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("group_norm expects [N,C,H,W], got " + shape_str(xs));
    const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (groups < 1 || C % groups != 0) {
        throw ShapeError("group_norm: channels " + std::to_string(C) + " not divisible by " +
                         std::to_string(groups) + " groups");
    }
    if (scale.numel() != C || shift.numel() != C) {
        throw ShapeError("group_norm affine params must have C=" + std::to_string(C) +
                         " elements, got " + shape_str(scale.shape()) + " and " +
                         shape_str(shift.shape()));
    }
    const i64 Cg = C / groups;
    const i64 HW = H * W;
    const i64 m = Cg * HW;

    auto out = TensorT<T>::zeros(xs);
    const T* xv = x.data().data();
    const T* sv = scale.data().data();
    const T* bv = shift.data().data();
    T* ov = out.data().data();

    auto stats = std::make_shared<std::vector<double>>(N * groups * 2);  // mean, invstd
    for (i64 n = 0; n < N; ++n) {
        for (i64 g = 0; g < groups; ++g) {
            const T* base = xv + (n * C + g * Cg) * HW;
            double s1 = 0, s2 = 0;
            for (i64 i = 0; i < m; ++i) {
                const double v = base[i];
                s1 += v;
                s2 += v * v;
            }
            const double mu = s1 / m;
            double var = s2 / m - mu * mu;
            if (var < 0) var = 0;
            const double invstd = 1.0 / std::sqrt(var + eps);
            (*stats)[(n * groups + g) * 2] = mu;
            (*stats)[(n * groups + g) * 2 + 1] = invstd;
            T* dst = ov + (n * C + g * Cg) * HW;
            for (i64 c = 0; c < Cg; ++c) {
                const T sc = sv[g * Cg + c];
                const T sh = bv[g * Cg + c];
                const T* xr = base + c * HW;
                T* orow = dst + c * HW;
                for (i64 i = 0; i < HW; ++i) {
                    orow[i] = static_cast<T>((xr[i] - mu) * invstd) * sc + sh;
                }
            }
        }
    }

    if (recording<T>({&x, &scale, &shift})) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {x.node(), scale.node(), shift.node()};
        node->backward = [N, C, HW, groups, Cg, m, stats](TensorNode<T>& self) {
            auto& X = *self.parents[0];
            auto& Sc = *self.parents[1];
            auto& Sh = *self.parents[2];
            const bool gx = X.requires_grad, gs = Sc.requires_grad, gh = Sh.requires_grad;
            if (gx) X.ensure_grad();
            if (gs) Sc.ensure_grad();
            if (gh) Sh.ensure_grad();
            const T* xv = X.value.data();
            const T* sv = Sc.value.data();
            const T* g = self.grad.data();
            for (i64 n = 0; n < N; ++n) {
                for (i64 gr = 0; gr < groups; ++gr) {
                    const double mu = (*stats)[(n * groups + gr) * 2];
                    const double invstd = (*stats)[(n * groups + gr) * 2 + 1];
                    const T* xb = xv + (n * C + gr * Cg) * HW;
                    const T* gb = g + (n * C + gr * Cg) * HW;
                    if (gx) {
                        double s1 = 0, s2 = 0;  // sum(dxhat), sum(dxhat*xhat)
                        for (i64 c = 0; c < Cg; ++c) {
                            const double sc = sv[gr * Cg + c];
                            const T* xr = xb + c * HW;
                            const T* grow = gb + c * HW;
                            for (i64 i = 0; i < HW; ++i) {
                                const double dxh = static_cast<double>(grow[i]) * sc;
                                s1 += dxh;
                                s2 += dxh * (xr[i] - mu) * invstd;
                            }
                        }
                        const double c1 = s1 / m, c2 = s2 / m;
                        T* xg = X.grad.data() + (n * C + gr * Cg) * HW;
                        for (i64 c = 0; c < Cg; ++c) {
                            const double sc = sv[gr * Cg + c];
                            const T* xr = xb + c * HW;
                            const T* grow = gb + c * HW;
                            T* xgr = xg + c * HW;
                            for (i64 i = 0; i < HW; ++i) {
                                const double xhat = (xr[i] - mu) * invstd;
                                const double dxh = static_cast<double>(grow[i]) * sc;
                                xgr[i] += static_cast<T>(invstd * (dxh - c1 - xhat * c2));
                            }
                        }
                    }
                    if (gs || gh) {
                        for (i64 c = 0; c < Cg; ++c) {
                            const T* xr = xb + c * HW;
                            const T* grow = gb + c * HW;
                            double dsc = 0, dsh = 0;
                            for (i64 i = 0; i < HW; ++i) {
                                dsc += static_cast<double>(grow[i]) * (xr[i] - mu) * invstd;
                                dsh += grow[i];
                            }
                            if (gs) Sc.grad[gr * Cg + c] += static_cast<T>(dsc);
                            if (gh) Sh.grad[gr * Cg + c] += static_cast<T>(dsh);
                        }
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-subtracted
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    const int rank = static_cast<int>(x.shape().size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) {
        throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
    const i64 L = x.shape()[axis];
    i64 outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < rank; ++i) inner *= x.shape()[i];

    auto out = TensorT<T>::zeros(x.shape());
    const T* xv = x.data().data();
    T* ov = out.data().data();
    for (i64 o = 0; o < outer; ++o) {
        for (i64 in = 0; in < inner; ++in) {
            const T* lane = xv + o * L * inner + in;
            T* dst = ov + o * L * inner + in;
            T mx = lane[0];
            for (i64 i = 1; i < L; ++i) mx = std::max(mx, lane[i * inner]);
            double denom = 0;
            for (i64 i = 0; i < L; ++i) {
                const T e = t_exp(static_cast<T>(lane[i * inner] - mx));
                dst[i * inner] = e;
                denom += static_cast<double>(e);
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (i64 i = 0; i < L; ++i) dst[i * inner] *= inv;
        }
    }

    if (recording<T>({&x})) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {x.node()};
        node->backward = [L, outer, inner](TensorNode<T>& self) {
            auto& X = *self.parents[0];
            X.ensure_grad();
            const T* s = self.value.data();
            const T* g = self.grad.data();
            T* xg = X.grad.data();
            for (i64 o = 0; o < outer; ++o) {
                for (i64 in = 0; in < inner; ++in) {
                    const i64 base = o * L * inner + in;
                    double dot = 0;
                    for (i64 i = 0; i < L; ++i) {
                        dot += static_cast<double>(g[base + i * inner]) * s[base + i * inner];
                    }
                    for (i64 i = 0; i < L; ++i) {
                        const i64 k = base + i * inner;
                        xg[k] += s[k] * static_cast<T>(g[k] - dot);
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// resample: 2x average-pool down / nearest-neighbor up on [N,C,H,W]
// ---------------------------------------------------------------------------

enum class ResampleDir { down, up };

template <typename T>
TensorT<T> resample(const TensorT<T>& x, ResampleDir dir) {
    const auto& xs = x.shape();
    if (xs.size() != 4) throw ShapeError("resample expects [N,C,H,W], got " + shape_str(xs));
    const i64 N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (dir == ResampleDir::down && (H % 2 != 0 || W % 2 != 0)) {
        throw ShapeError("resample down requires even extents, got " + shape_str(xs));
    }
    const i64 OH = dir == ResampleDir::down ? H / 2 : H * 2;
    const i64 OW = dir == ResampleDir::down ? W / 2 : W * 2;
    auto out = TensorT<T>::zeros({N, C, OH, OW});
    const T* xv = x.data().data();
    T* ov = out.data().data();
    const i64 planes = N * C;
    if (dir == ResampleDir::down) {
        for (i64 p = 0; p < planes; ++p) {
            const T* src = xv + p * H * W;
            T* dst = ov + p * OH * OW;
            for (i64 i = 0; i < OH; ++i) {
                for (i64 j = 0; j < OW; ++j) {
                    const T* q = src + 2 * i * W + 2 * j;
                    dst[i * OW + j] = static_cast<T>(0.25) * (q[0] + q[1] + q[W] + q[W + 1]);
                }
            }
        }
    } else {
        for (i64 p = 0; p < planes; ++p) {
            const T* src = xv + p * H * W;
            T* dst = ov + p * OH * OW;
            for (i64 i = 0; i < OH; ++i) {
                const T* srow = src + (i / 2) * W;
                T* drow = dst + i * OW;
                for (i64 j = 0; j < OW; ++j) drow[j] = srow[j / 2];
            }
        }
    }

    if (recording<T>({&x})) {
        auto* node = out.node().get();
        node->requires_grad = true;
        node->parents = {x.node()};
        node->backward = [dir, planes, H, W, OH, OW](TensorNode<T>& self) {
            auto& X = *self.parents[0];
            X.ensure_grad();
            const T* g = self.grad.data();
            T* xg = X.grad.data();
            if (dir == ResampleDir::down) {
                for (i64 p = 0; p < planes; ++p) {
                    const T* gp = g + p * OH * OW;
                    T* xp = xg + p * H * W;
                    for (i64 i = 0; i < OH; ++i) {
                        for (i64 j = 0; j < OW; ++j) {
                            const T q = static_cast<T>(0.25) * gp[i * OW + j];
                            T* dst = xp + 2 * i * W + 2 * j;
                            dst[0] += q;
                            dst[1] += q;
                            dst[W] += q;
                            dst[W + 1] += q;
                        }
                    }
                }
            } else {
                for (i64 p = 0; p < planes; ++p) {
                    const T* gp = g + p * OH * OW;
                    T* xp = xg + p * H * W;
                    for (i64 i = 0; i < OH; ++i) {
                        const T* grow = gp + i * OW;
                        T* xrow = xp + (i / 2) * W;
                        for (i64 j = 0; j < OW; ++j) xrow[j / 2] += grow[j];
                    }
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Weight init
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> kaiming_uniform(Shape shape, i64 fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<i64>(1, fan_in)));
    return TensorT<T>::uniform(std::move(shape), rng, -bound, bound);
}

}  // namespace rgbt
