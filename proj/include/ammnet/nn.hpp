#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ammnet/tensor.hpp"

namespace ammnet {

enum class ParamKind { Weight, Bias, BnGamma, BnBeta };

// Ordered, named collection of trainable tensors. Iteration order is the
// registration order; names must be unique. Frozen entries are kept out of
// optimization (used for detached-target mappers).
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        int64_t fan_in;
        ParamKind kind;
        bool frozen;
    };

    void add(const std::string& name, Tensor<T> tensor, int64_t fan_in, ParamKind kind,
             bool frozen = false);
    Tensor<T>& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    size_t size() const { return entries_.size(); }
    int64_t total_numel() const;
    void zero_grads();

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Named non-trainable state (batchnorm running statistics). Checkpointed
// alongside parameters.
template <typename T>
class BufferStore {
public:
    struct Entry {
        std::string name;
        std::vector<T>* data;  // owned by the layer
    };
    void add(const std::string& name, std::vector<T>* data);
    const std::vector<Entry>& entries() const { return entries_; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Kaiming fan-in init: weights ~ N(0, 2/fan_in), biases 0, gamma 1, beta 0.
// Each parameter draws from a stream derived from (seed, name), so values do
// not depend on registration order.
template <typename T>
void init_params(ParamStore<T>& store, uint64_t seed);

// ---- layers ---------------------------------------------------------------

template <typename T>
struct Linear {
    Tensor<T> weight;  // [out, in]
    Tensor<T> bias;    // [out]
    int64_t in_features = 0, out_features = 0;

    Linear() = default;
    Linear(int64_t in, int64_t out);
    void register_params(ParamStore<T>& store, const std::string& prefix, bool frozen = false);
    Tensor<T> forward(const Tensor<T>& x) const;  // x [N,in] -> x W^T + b
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> weight;  // [O, C, k, k]
    std::optional<Tensor<T>> bias;
    int stride = 1, pad = 0, k = 1;
    int64_t in_ch = 0, out_ch = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t in, int64_t out, int k, int stride, int pad, bool with_bias);
    void register_params(ParamStore<T>& store, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& x) const;
};

// Batch normalization over the non-channel axes of [N,C] or [B,C,H,W].
// Training mode normalizes by batch statistics (biased variance) and folds
// them into the running buffers with the given momentum; eval mode uses the
// running buffers. Training requires at least 2 reduced elements per channel.
template <typename T>
struct BatchNorm {
    Tensor<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);
    int64_t channels = 0;

    BatchNorm() = default;
    explicit BatchNorm(int64_t c);
    void register_params(ParamStore<T>& store, const std::string& prefix);
    void register_buffers(BufferStore<T>& store, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& x, bool training);
};

// ---- optimizer --------------------------------------------------------------

// AdamW with decoupled weight decay. Moments are keyed by parameter name.
// Every non-frozen parameter must carry a gradient when step() runs.
template <typename T>
class AdamW {
public:
    T lr = T(2e-4);
    T beta1 = T(0.9), beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0.01);

    AdamW() = default;
    AdamW(T lr, T weight_decay) : lr(lr), weight_decay(weight_decay) {}

    void step(ParamStore<T>& params, T lr_scale = T(1));
    int64_t step_count() const { return step_count_; }

    struct Moments {
        std::vector<T> m, v;
    };
    std::unordered_map<std::string, Moments>& moments() { return moments_; }
    void set_step_count(int64_t t) { step_count_ = t; }

private:
    std::unordered_map<std::string, Moments> moments_;
    int64_t step_count_ = 0;
};

// Cosine annealing factor 0.5 * (1 + cos(pi * t / total)).
double cosine_factor(int64_t t, int64_t total);

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class BufferStore<float>;
extern template class BufferStore<double>;
extern template struct Linear<float>;
extern template struct Linear<double>;
extern template struct Conv2dLayer<float>;
extern template struct Conv2dLayer<double>;
extern template struct BatchNorm<float>;
extern template struct BatchNorm<double>;
extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace ammnet
