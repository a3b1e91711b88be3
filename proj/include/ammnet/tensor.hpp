#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ammnet/error.hpp"

namespace ammnet {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Reverse-mode autodiff over dense row-major tensors.
//
// A Tensor is a shared handle to a Node. Ops link result nodes to their
// parents and attach a backward closure; the linked nodes form the graph of
// executed operations. backward() on a scalar root visits that graph in
// reverse topological order and accumulates into .grad of every reachable
// node that requires gradients. Running backward twice over the same nodes
// is an error; re-execute the forward pass instead.
//
// T is float for training and double for gradient-check work.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward reaches this node
    bool requires_grad = false;
    bool backward_ran = false;
    bool seen_flag = false;  // scratch for the backward traversal
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;  // absent on leaves

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

// Scoped switch that disables graph recording (evaluation / data paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_mode_enabled();

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T v, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const;
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
    void clear_grad() { node_->grad.clear(); }

    // Value copy outside the graph (no parents, no gradient flow).
    Tensor detach() const;

    // Reverse pass from a scalar root. Seeds d(root)/d(root) = 1.
    void backward();

    std::shared_ptr<Node<T>>& node() { return node_; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// ---- elementwise suite -------------------------------------------------
// Binary ops accept equal shapes, or a right/left operand whose shape is a
// trailing suffix of the other's (it is then broadcast over the leading
// axes), or a scalar tensor. Gradients for a broadcast operand sum over the
// leading axes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> clamp_min(const Tensor<T>& a, T lo);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }

// ---- linear algebra ----------------------------------------------------
// matmul: [M,K]x[K,N] -> [M,N]. matmul_nt: [M,K]x[N,K] -> [M,N] (B transposed).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

// Row-wise softmax of a [M,N] matrix, max-subtracted for stability.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);

// ---- shape ops ---------------------------------------------------------
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> rows(const Tensor<T>& x, int64_t r0, int64_t r1);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
// [B,C,H,W] -> [(B*H*W), C] tokens, rows grouped by sample; and back.
template <typename T> Tensor<T> tokens_from_nchw(const Tensor<T>& x);
template <typename T> Tensor<T> tokens_to_nchw(const Tensor<T>& t, int64_t b, int64_t c, int64_t h, int64_t w);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// ---- reductions --------------------------------------------------------
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);  // [B,C,H,W] -> [B,C]

// ---- conv / spatial ----------------------------------------------------
// Cross-correlation, kernels 1x1 or 3x3. x [B,C,H,W], w [O,C,k,k],
// optional bias [O]. Output extent (H + 2*pad - k) / stride + 1 must be
// integral.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 int stride, int pad);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    return conv2d(x, w, std::optional<Tensor<T>>{}, stride, pad);
}
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);

// ---- losses ------------------------------------------------------------
// Mean cross entropy over non-ignored pixels. logits [B,K,H,W]; labels are
// B*H*W entries in [0,K) or ignore_value. log-sum-exp stabilized.
template <typename T>
Tensor<T> cross_entropy_nchw(const Tensor<T>& logits, const std::vector<int32_t>& labels,
                             int32_t ignore_value = 255);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ammnet
