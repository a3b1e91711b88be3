#include "ammnet/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace ammnet {

namespace {

thread_local bool g_grad_mode = true;

// One BLAS thread: the backward pass relies on bit-deterministic GEMMs.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, float alpha, const float* a,
          int64_t lda, const float* b, int64_t ldb, float beta, float* c, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha,
          const double* a, int64_t lda, const double* b, int64_t ldb, double beta, double* c,
          int64_t ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
                beta, c, static_cast<int>(ldc));
}

template <typename T>
void check_finite_or_nan(const std::vector<T>& v, const char* op) {
    for (const T x : v) {
        if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
    }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = prev_; }
bool grad_mode_enabled() { return g_grad_mode; }

// ---- Tensor basics -------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return from(std::move(shape), {}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
    const int64_t n = shape_numel(shape);
    if (data.empty()) {
        data.assign(static_cast<size_t>(n), T(0));
    } else if (static_cast<int64_t>(data.size()) != n) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    if (node_->grad.empty())
        throw InvariantError("gradient not populated; run backward() first");
    return node_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor::from(node_->shape, node_->value, false);
}

template <typename T>
void Tensor<T>::backward() {
    if (numel() != 1) throw InvariantError("backward() requires a scalar root, got " + shape_str(shape()));
    if (!node_->requires_grad) throw InvariantError("backward() on a tensor that does not require grad");

    // Reverse post-order DFS = reverse topological order of the executed ops.
    std::vector<Node<T>*> order;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    std::vector<Node<T>*> seen;
    auto mark_seen = [&](Node<T>* n) {
        // small graphs: linear scan would be fine, but keep it O(1)
        return n->seen_flag ? true : (n->seen_flag = true, seen.push_back(n), false);
    };
    stack.emplace_back(node_.get(), 0);
    mark_seen(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && !mark_seen(p)) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node<T>* n : seen) n->seen_flag = false;

    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward_fn) continue;
        if (n->backward_ran)
            throw InvariantError("backward already ran on this graph; re-execute the forward pass");
        n->backward_fn();
        n->backward_ran = true;
    }
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

// ---- op helpers ----------------------------------------------------------

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
bool track(std::initializer_list<const Tensor<T>*> ins) {
    if (!grad_mode_enabled()) return false;
    for (const Tensor<T>* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
void attach(Tensor<T>& out, std::vector<NodePtr<T>> parents, std::function<void()> fn) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(fn);
}

// Broadcast layout: equal shapes, suffix-of broadcast over leading axes, or
// a single-element operand.
struct BcastPlan {
    int64_t outer = 1;   // repetitions of the small operand
    int64_t inner = 1;   // elements of the small operand
    bool b_small = true; // which side broadcasts
    bool same = false;
};

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <typename T>
BcastPlan bcast_plan(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    BcastPlan p;
    if (a.shape() == b.shape()) {
        p.same = true;
        p.inner = a.numel();
        return p;
    }
    if (b.numel() == 1) {
        p.b_small = true;
        p.outer = a.numel();
        return p;
    }
    if (a.numel() == 1) {
        p.b_small = false;
        p.outer = b.numel();
        return p;
    }
    if (is_suffix(b.shape(), a.shape())) {
        p.b_small = true;
        p.inner = b.numel();
        p.outer = a.numel() / b.numel();
        return p;
    }
    if (is_suffix(a.shape(), b.shape())) {
        p.b_small = false;
        p.inner = a.numel();
        p.outer = b.numel() / a.numel();
        return p;
    }
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not broadcast-compatible");
}

// forward_fn(big_elem, small_elem) -> value
// dbig_fn(g, big, small), dsmall_fn(g, big, small) -> gradient contributions
template <typename T, typename F, typename DB, typename DS>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DB d_a, DS d_b) {
    BcastPlan p = bcast_plan(a, b, name);
    const Tensor<T>& big = (p.same || p.b_small) ? a : b;
    const Tensor<T>& small = (p.same || p.b_small) ? b : a;
    const bool a_is_big = (p.same || p.b_small);

    const auto& bv = big.data();
    const auto& sv = small.data();
    std::vector<T> out(bv.size());
    for (int64_t o = 0; o < p.outer; ++o) {
        const int64_t base = o * p.inner;
        for (int64_t i = 0; i < p.inner; ++i) {
            const T x = bv[base + i], y = sv[i];
            out[base + i] = a_is_big ? f(x, y) : f(y, x);
        }
    }

    Tensor<T> r = Tensor<T>::from(big.shape(), std::move(out));
    if (track<T>({&a, &b})) {
        Node<T>* rn = r.node().get();
        Node<T>* bn = big.node().get();
        Node<T>* sn = small.node().get();
        attach(r, {big.node(), small.node()}, [=]() {
            const auto& g = rn->grad;
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t o = 0; o < p.outer; ++o)
                    for (int64_t i = 0; i < p.inner; ++i) {
                        const int64_t j = o * p.inner + i;
                        bn->grad[j] += a_is_big ? d_a(g[j], bn->value[j], sn->value[i])
                                                : d_b(g[j], sn->value[i], bn->value[j]);
                    }
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                for (int64_t o = 0; o < p.outer; ++o)
                    for (int64_t i = 0; i < p.inner; ++i) {
                        const int64_t j = o * p.inner + i;
                        sn->grad[i] += a_is_big ? d_b(g[j], bn->value[j], sn->value[i])
                                                : d_a(g[j], sn->value[i], bn->value[j]);
                    }
            }
        });
    }
    return r;
}

template <typename T, typename F, typename D>
Tensor<T> unary_op(const Tensor<T>& a, F f, D df) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    Tensor<T> r = Tensor<T>::from(a.shape(), std::move(out));
    if (track<T>({&a})) {
        Node<T>* rn = r.node().get();
        Node<T>* an = a.node().get();
        attach(r, {a.node()}, [=]() {
            an->ensure_grad();
            for (size_t i = 0; i < an->value.size(); ++i)
                an->grad[i] += df(rn->grad[i], an->value[i], rn->value[i]);
        });
    }
    return r;
}

}  // namespace

// ---- elementwise suite ----------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, "div", [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
        [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return unary_op(
        a, [s](T x) { return x + s; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return unary_op(
        a, [s](T x) { return x * s; }, [s](T g, T, T) { return g * s; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::exp(x); }, [](T g, T, T y) { return g * y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::log(x); }, [](T g, T x, T) { return g / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    // gradient at exactly 0 is 0
    return unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
    return unary_op(
        a, [lo](T x) { return x < lo ? lo : x; },
        [lo](T g, T x, T) { return x < lo ? T(0) : g; });
}

// ---- linear algebra --------------------------------------------------------

namespace {

template <typename T>
void check_2d(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor<T> r = Tensor<T>::zeros({m, n});
    gemm(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0),
         r.data().data(), n);
    if (track<T>({&a, &b})) {
        Node<T>* rn = r.node().get();
        Node<T>* an = a.node().get();
        Node<T>* bn = b.node().get();
        attach(r, {a.node(), b.node()}, [=]() {
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B^T
                gemm(false, true, m, k, n, T(1), rn->grad.data(), n, bn->value.data(), n, T(1),
                     an->grad.data(), k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += A^T * dC
                gemm(true, false, k, n, m, T(1), an->value.data(), k, rn->grad.data(), n, T(1),
                     bn->grad.data(), n);
            }
        });
    }
    return r;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    check_2d(a, "matmul_nt");
    check_2d(b, "matmul_nt");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimensionError("matmul_nt: inner extents disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    Tensor<T> r = Tensor<T>::zeros({m, n});
    gemm(false, true, m, n, k, T(1), a.data().data(), k, b.data().data(), k, T(0),
         r.data().data(), n);
    if (track<T>({&a, &b})) {
        Node<T>* rn = r.node().get();
        Node<T>* an = a.node().get();
        Node<T>* bn = b.node().get();
        attach(r, {a.node(), b.node()}, [=]() {
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B
                gemm(false, false, m, k, n, T(1), rn->grad.data(), n, bn->value.data(), k, T(1),
                     an->grad.data(), k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += dC^T * A
                gemm(true, false, n, k, m, T(1), rn->grad.data(), n, an->value.data(), k, T(1),
                     bn->grad.data(), k);
            }
        });
    }
    return r;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    check_2d(x, "softmax_rows");
    check_finite_or_nan(x.data(), "softmax_rows");
    const int64_t m = x.dim(0), n = x.dim(1);
    std::vector<T> out(x.data().size());
    for (int64_t i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        T* orow = out.data() + i * n;
        T mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int64_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    Tensor<T> r = Tensor<T>::from(x.shape(), std::move(out));
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                const T* y = rn->value.data() + i * n;
                const T* g = rn->grad.data() + i * n;
                T dot = T(0);
                for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
                T* gx = xn->grad.data() + i * n;
                for (int64_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return r;
}

// ---- shape ops --------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor<T> r = Tensor<T>::from(std::move(shape), x.data());
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += rn->grad[i];
        });
    }
    return r;
}

template <typename T>
Tensor<T> rows(const Tensor<T>& x, int64_t r0, int64_t r1) {
    check_2d(x, "rows");
    if (r0 < 0 || r1 > x.dim(0) || r0 >= r1)
        throw DimensionError("rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                             ") out of " + shape_str(x.shape()));
    const int64_t c = x.dim(1);
    std::vector<T> out(x.data().begin() + r0 * c, x.data().begin() + r1 * c);
    Tensor<T> r = Tensor<T>::from({r1 - r0, c}, std::move(out));
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            for (int64_t i = 0; i < (r1 - r0) * c; ++i) xn->grad[r0 * c + i] += rn->grad[i];
        });
    }
    return r;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const int64_t c = parts[0].dim(1);
    int64_t total = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p.dim(1) != c)
            throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()));
        total += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(total * c);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Tensor<T> r = Tensor<T>::from({total, c}, std::move(out));

    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (grad_mode_enabled() && any) {
        std::vector<NodePtr<T>> parents;
        for (const auto& p : parts) parents.push_back(p.node());
        Node<T>* rn = r.node().get();
        auto ps = parents;  // captured copy of raw layout
        attach(r, std::move(parents), [rn, ps, c]() {
            int64_t off = 0;
            for (const auto& pn : ps) {
                const int64_t n = pn->numel();
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (int64_t i = 0; i < n; ++i) pn->grad[i] += rn->grad[off + i];
                }
                off += n;
            }
        });
    }
    return r;
}

template <typename T>
Tensor<T> tokens_from_nchw(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("tokens_from_nchw: expected [B,C,H,W], got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.data().size());
    const T* src = x.data().data();
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* plane = src + (ib * c + ic) * hw;
            T* dst = out.data() + ib * hw * c + ic;
            for (int64_t q = 0; q < hw; ++q) dst[q * c] = plane[q];
        }
    Tensor<T> r = Tensor<T>::from({b * hw, c}, std::move(out));
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            for (int64_t ib = 0; ib < b; ++ib)
                for (int64_t ic = 0; ic < c; ++ic) {
                    T* gplane = xn->grad.data() + (ib * c + ic) * hw;
                    const T* gsrc = rn->grad.data() + ib * hw * c + ic;
                    for (int64_t q = 0; q < hw; ++q) gplane[q] += gsrc[q * c];
                }
        });
    }
    return r;
}

template <typename T>
Tensor<T> tokens_to_nchw(const Tensor<T>& t, int64_t b, int64_t c, int64_t h, int64_t w) {
    check_2d(t, "tokens_to_nchw");
    const int64_t hw = h * w;
    if (t.dim(0) != b * hw || t.dim(1) != c)
        throw DimensionError("tokens_to_nchw: " + shape_str(t.shape()) + " does not match B=" +
                             std::to_string(b) + " C=" + std::to_string(c) + " HW=" + std::to_string(hw));
    std::vector<T> out(t.data().size());
    const T* src = t.data().data();
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            T* plane = out.data() + (ib * c + ic) * hw;
            const T* col = src + ib * hw * c + ic;
            for (int64_t q = 0; q < hw; ++q) plane[q] = col[q * c];
        }
    Tensor<T> r = Tensor<T>::from({b, c, h, w}, std::move(out));
    if (track<T>({&t})) {
        Node<T>* rn = r.node().get();
        Node<T>* tn = t.node().get();
        attach(r, {t.node()}, [=]() {
            tn->ensure_grad();
            for (int64_t ib = 0; ib < b; ++ib)
                for (int64_t ic = 0; ic < c; ++ic) {
                    const T* gplane = rn->grad.data() + (ib * c + ic) * hw;
                    T* gcol = tn->grad.data() + ib * hw * c + ic;
                    for (int64_t q = 0; q < hw; ++q) gcol[q * c] += gplane[q];
                }
        });
    }
    return r;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw DimensionError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t nb = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    std::vector<T> out(static_cast<size_t>(nb * (ca + cb) * hw));
    for (int64_t ib = 0; ib < nb; ++ib) {
        std::memcpy(out.data() + ib * (ca + cb) * hw, a.data().data() + ib * ca * hw,
                    sizeof(T) * ca * hw);
        std::memcpy(out.data() + ib * (ca + cb) * hw + ca * hw, b.data().data() + ib * cb * hw,
                    sizeof(T) * cb * hw);
    }
    Tensor<T> r = Tensor<T>::from({nb, ca + cb, a.dim(2), a.dim(3)}, std::move(out));
    if (track<T>({&a, &b})) {
        Node<T>* rn = r.node().get();
        Node<T>* an = a.node().get();
        Node<T>* bn = b.node().get();
        attach(r, {a.node(), b.node()}, [=]() {
            for (int64_t ib = 0; ib < nb; ++ib) {
                const T* g = rn->grad.data() + ib * (ca + cb) * hw;
                if (an->requires_grad) {
                    an->ensure_grad();
                    T* ga = an->grad.data() + ib * ca * hw;
                    for (int64_t i = 0; i < ca * hw; ++i) ga[i] += g[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    T* gb = bn->grad.data() + ib * cb * hw;
                    for (int64_t i = 0; i < cb * hw; ++i) gb[i] += g[ca * hw + i];
                }
            }
        });
    }
    return r;
}

// ---- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    Tensor<T> r = Tensor<T>::scalar(s);
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            const T g = rn->grad[0];
            for (auto& gi : xn->grad) gi += g;
        });
    }
    return r;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("global_avg_pool: expected [B,C,H,W], got " + shape_str(x.shape()));
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(static_cast<size_t>(b * c));
    for (int64_t i = 0; i < b * c; ++i) {
        const T* plane = x.data().data() + i * hw;
        T s = T(0);
        for (int64_t q = 0; q < hw; ++q) s += plane[q];
        out[i] = s / static_cast<T>(hw);
    }
    Tensor<T> r = Tensor<T>::from({b, c}, std::move(out));
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            const T inv = T(1) / static_cast<T>(hw);
            for (int64_t i = 0; i < b * c; ++i) {
                const T g = rn->grad[i] * inv;
                T* gp = xn->grad.data() + i * hw;
                for (int64_t q = 0; q < hw; ++q) gp[q] += g;
            }
        });
    }
    return r;
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// im2col for one sample: cols is [C*k*k, cols_total] row-major, this sample's
// block starting at column col_off with out_hw columns.
template <typename T>
void im2col_sample(const T* x, int64_t c_in, int64_t h, int64_t w, int k, int stride, int pad,
                   int64_t out_h, int64_t out_w, T* cols, int64_t cols_total, int64_t col_off) {
    for (int64_t c = 0; c < c_in; ++c) {
        const T* plane = x + c * h * w;
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                T* crow = cols + ((c * k + ki) * k + kj) * cols_total + col_off;
                for (int64_t oi = 0; oi < out_h; ++oi) {
                    const int64_t ii = oi * stride - pad + ki;
                    T* dst = crow + oi * out_w;
                    if (ii < 0 || ii >= h) {
                        std::fill(dst, dst + out_w, T(0));
                        continue;
                    }
                    const T* srow = plane + ii * w;
                    for (int64_t oj = 0; oj < out_w; ++oj) {
                        const int64_t jj = oj * stride - pad + kj;
                        dst[oj] = (jj >= 0 && jj < w) ? srow[jj] : T(0);
                    }
                }
            }
    }
}

template <typename T>
void col2im_sample(const T* cols, int64_t cols_total, int64_t col_off, int64_t c_in, int64_t h,
                   int64_t w, int k, int stride, int pad, int64_t out_h, int64_t out_w, T* gx) {
    for (int64_t c = 0; c < c_in; ++c) {
        T* plane = gx + c * h * w;
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const T* crow = cols + ((c * k + ki) * k + kj) * cols_total + col_off;
                for (int64_t oi = 0; oi < out_h; ++oi) {
                    const int64_t ii = oi * stride - pad + ki;
                    if (ii < 0 || ii >= h) continue;
                    T* drow = plane + ii * w;
                    const T* srow = crow + oi * out_w;
                    for (int64_t oj = 0; oj < out_w; ++oj) {
                        const int64_t jj = oj * stride - pad + kj;
                        if (jj >= 0 && jj < w) drow[jj] += srow[oj];
                    }
                }
            }
    }
}

template <typename T>
std::vector<T> build_cols(const Node<T>* xn, int k, int stride, int pad, int64_t out_h,
                          int64_t out_w) {
    const int64_t b = xn->shape[0], c = xn->shape[1], h = xn->shape[2], w = xn->shape[3];
    const int64_t out_hw = out_h * out_w;
    std::vector<T> cols(static_cast<size_t>(c * k * k * b * out_hw));
    for (int64_t ib = 0; ib < b; ++ib)
        im2col_sample(xn->value.data() + ib * c * h * w, c, h, w, k, stride, pad, out_h, out_w,
                      cols.data(), b * out_hw, ib * out_hw);
    return cols;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 int stride, int pad) {
    if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw DimensionError("conv2d: weight must be [O,C,k,k], got " + shape_str(w.shape()));
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t o = w.dim(0), k = w.dim(2);
    if (w.dim(1) != c)
        throw DimensionError("conv2d: input channels " + shape_str(x.shape()) +
                             " do not match weight " + shape_str(w.shape()));
    if (w.dim(3) != k || (k != 1 && k != 3))
        throw DimensionError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(w.shape()));
    if ((h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0)
        throw DimensionError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                             " kernel " + shape_str(w.shape()) + " stride " + std::to_string(stride) +
                             " pad " + std::to_string(pad));
    const int64_t out_h = (h + 2 * pad - k) / stride + 1;
    const int64_t out_w = (wd + 2 * pad - k) / stride + 1;
    const int64_t out_hw = out_h * out_w, ckk = c * k * k, bhw = b * out_hw;
    if (bias && (bias->rank() != 1 || bias->dim(0) != o))
        throw DimensionError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match O=" + std::to_string(o));

    std::vector<T> cols = build_cols(x.node().get(), static_cast<int>(k), stride, pad, out_h, out_w);
    std::vector<T> y_all(static_cast<size_t>(o * bhw));
    gemm(false, false, o, bhw, ckk, T(1), w.data().data(), ckk, cols.data(), bhw, T(0),
         y_all.data(), bhw);

    std::vector<T> out(static_cast<size_t>(b * o * out_hw));
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t io = 0; io < o; ++io) {
            const T* src = y_all.data() + io * bhw + ib * out_hw;
            T* dst = out.data() + (ib * o + io) * out_hw;
            if (bias) {
                const T bv = bias->data()[io];
                for (int64_t q = 0; q < out_hw; ++q) dst[q] = src[q] + bv;
            } else {
                std::memcpy(dst, src, sizeof(T) * out_hw);
            }
        }

    Tensor<T> r = Tensor<T>::from({b, o, out_h, out_w}, std::move(out));
    const bool need = bias ? track<T>({&x, &w, &*bias}) : track<T>({&x, &w});
    if (need) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        Node<T>* wn = w.node().get();
        Node<T>* bn = bias ? bias->node().get() : nullptr;
        std::vector<NodePtr<T>> parents{x.node(), w.node()};
        if (bias) parents.push_back(bias->node());
        const int ki = static_cast<int>(k);
        attach(r, std::move(parents), [=]() {
            // regroup output gradient as [O, B*out_hw]
            std::vector<T> gy(static_cast<size_t>(o * bhw));
            for (int64_t ib = 0; ib < b; ++ib)
                for (int64_t io = 0; io < o; ++io)
                    std::memcpy(gy.data() + io * bhw + ib * out_hw,
                                rn->grad.data() + (ib * o + io) * out_hw, sizeof(T) * out_hw);
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t io = 0; io < o; ++io) {
                    T s = T(0);
                    const T* row = gy.data() + io * bhw;
                    for (int64_t q = 0; q < bhw; ++q) s += row[q];
                    bn->grad[io] += s;
                }
            }
            if (wn->requires_grad || xn->requires_grad) {
                std::vector<T> cols2 = build_cols(xn, ki, stride, pad, out_h, out_w);
                if (wn->requires_grad) {
                    wn->ensure_grad();  // dW += gY * cols^T
                    gemm(false, true, o, ckk, bhw, T(1), gy.data(), bhw, cols2.data(), bhw, T(1),
                         wn->grad.data(), ckk);
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();  // dcols = W^T * gY, then col2im
                    std::vector<T> gcols(static_cast<size_t>(ckk * bhw));
                    gemm(true, false, ckk, bhw, o, T(1), wn->value.data(), ckk, gy.data(), bhw,
                         T(0), gcols.data(), bhw);
                    const int64_t hh = xn->shape[2], ww = xn->shape[3];
                    for (int64_t ib = 0; ib < b; ++ib)
                        col2im_sample(gcols.data(), bhw, ib * out_hw, c, hh, ww, ki, stride, pad,
                                      out_h, out_w, xn->grad.data() + ib * c * hh * ww);
                }
            }
        });
    }
    return r;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    if (x.rank() != 4) throw DimensionError("upsample_nearest2x: expected [B,C,H,W], got " + shape_str(x.shape()));
    const int64_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    std::vector<T> out(static_cast<size_t>(bc * 4 * h * w));
    for (int64_t p = 0; p < bc; ++p) {
        const T* src = x.data().data() + p * h * w;
        T* dst = out.data() + p * 4 * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                const T v = src[i * w + j];
                T* q = dst + (2 * i) * (2 * w) + 2 * j;
                q[0] = v;
                q[1] = v;
                q[2 * w] = v;
                q[2 * w + 1] = v;
            }
    }
    Tensor<T> r = Tensor<T>::from({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out));
    if (track<T>({&x})) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        attach(r, {x.node()}, [=]() {
            xn->ensure_grad();
            for (int64_t p = 0; p < bc; ++p) {
                T* gx = xn->grad.data() + p * h * w;
                const T* gy = rn->grad.data() + p * 4 * h * w;
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j) {
                        const T* q = gy + (2 * i) * (2 * w) + 2 * j;
                        gx[i * w + j] += q[0] + q[1] + q[2 * w] + q[2 * w + 1];
                    }
            }
        });
    }
    return r;
}

// ---- cross entropy -----------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy_nchw(const Tensor<T>& logits, const std::vector<int32_t>& labels,
                             int32_t ignore_value) {
    if (logits.rank() != 4)
        throw DimensionError("cross_entropy: logits must be [B,K,H,W], got " + shape_str(logits.shape()));
    const int64_t b = logits.dim(0), kk = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    const int64_t hw = h * w;
    if (static_cast<int64_t>(labels.size()) != b * hw)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(b * hw) + " pixels");
    int64_t count = 0;
    double total = 0.0;
    for (int64_t ib = 0; ib < b; ++ib) {
        const T* base = logits.data().data() + ib * kk * hw;
        for (int64_t q = 0; q < hw; ++q) {
            const int32_t lab = labels[ib * hw + q];
            if (lab == ignore_value) continue;
            if (lab < 0 || lab >= kk)
                throw DataError("cross_entropy: label " + std::to_string(lab) + " >= num_classes " +
                                std::to_string(kk) + " at pixel (b=" + std::to_string(ib) + ", y=" +
                                std::to_string(q / w) + ", x=" + std::to_string(q % w) + ")");
            T mx = base[q];
            for (int64_t ic = 1; ic < kk; ++ic) mx = std::max(mx, base[ic * hw + q]);
            T lse = T(0);
            for (int64_t ic = 0; ic < kk; ++ic) lse += std::exp(base[ic * hw + q] - mx);
            total += static_cast<double>(std::log(lse) - (base[lab * hw + q] - mx));
            ++count;
        }
    }
    if (count == 0) throw DataError("cross_entropy: no labeled pixels (all ignored)");
    Tensor<T> r = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(count)));
    if (track<T>({&logits})) {
        Node<T>* rn = r.node().get();
        Node<T>* ln = logits.node().get();
        auto labs = labels;  // keep a copy alive for the backward pass
        attach(r, {logits.node()}, [rn, ln, labs, b, kk, hw, w, count, ignore_value]() {
            ln->ensure_grad();
            const T scale = rn->grad[0] / static_cast<T>(count);
            for (int64_t ib = 0; ib < b; ++ib) {
                const T* base = ln->value.data() + ib * kk * hw;
                T* gbase = ln->grad.data() + ib * kk * hw;
                for (int64_t q = 0; q < hw; ++q) {
                    const int32_t lab = labs[ib * hw + q];
                    if (lab == ignore_value) continue;
                    T mx = base[q];
                    for (int64_t ic = 1; ic < kk; ++ic) mx = std::max(mx, base[ic * hw + q]);
                    T lse = T(0);
                    for (int64_t ic = 0; ic < kk; ++ic) lse += std::exp(base[ic * hw + q] - mx);
                    for (int64_t ic = 0; ic < kk; ++ic) {
                        const T p = std::exp(base[ic * hw + q] - mx) / lse;
                        gbase[ic * hw + q] += scale * (p - (ic == lab ? T(1) : T(0)));
                    }
                }
            }
        });
    }
    return r;
}

// ---- explicit instantiations ---------------------------------------------------

#define AMMNET_INSTANTIATE(T)                                                                  \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                       \
    template Tensor<T> exp(const Tensor<T>&);                                                 \
    template Tensor<T> log(const Tensor<T>&);                                                 \
    template Tensor<T> relu(const Tensor<T>&);                                                \
    template Tensor<T> clamp_min(const Tensor<T>&, T);                                        \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> softmax_rows(const Tensor<T>&);                                        \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
    template Tensor<T> rows(const Tensor<T>&, int64_t, int64_t);                              \
    template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                            \
    template Tensor<T> tokens_from_nchw(const Tensor<T>&);                                    \
    template Tensor<T> tokens_to_nchw(const Tensor<T>&, int64_t, int64_t, int64_t, int64_t);  \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> sum_all(const Tensor<T>&);                                             \
    template Tensor<T> mean_all(const Tensor<T>&);                                            \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                     \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&, \
                              int, int);                                                      \
    template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                  \
    template Tensor<T> cross_entropy_nchw(const Tensor<T>&, const std::vector<int32_t>&, int32_t);

AMMNET_INSTANTIATE(float)
AMMNET_INSTANTIATE(double)

#undef AMMNET_INSTANTIATE

}  // namespace ammnet
