#pragma once

#include <vector>

#include "ammnet/nn.hpp"

namespace ammnet {

// Prior-matrix fusion. Residual mappers keep modality-specific contextual
// (RGB) and structural (DSM) token features; a semantic enhancer runs on the
// RGB branch only. The prior softmax((f_sem f_str^T) / sqrt(d)) is a
// row-stochastic N x N matrix applied to the contextual tokens, so every
// fused token is a convex combination of contextual tokens.
template <typename T>
struct ApfWeights {
    Linear<T> rm_rgb, rm_dsm;  // c1 -> d
    Linear<T> se_linear;       // c1 -> d
    BatchNorm<T> se_bn;        // over d
    int64_t width_in = 0;      // c1
    int64_t width = 0;         // d

    ApfWeights() = default;
    ApfWeights(int64_t c1, int64_t d);
    void register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix);
};

template <typename T>
struct FusionBundle {
    Tensor<T> f_con, f_str, f_sem;      // [(B*N), d]
    std::vector<Tensor<T>> f_prior;     // per sample, [N, N]
    Tensor<T> f_fuse;                   // [(B*N), d]
    int64_t token_group = 0;            // N
};

// Plain linear projection of tokens (the residual retention path).
template <typename T>
Tensor<T> residual_map(const Tensor<T>& tokens, const Linear<T>& rm);

// relu(batchnorm(linear(x))): RGB-only semantic features, nonnegative.
template <typename T>
Tensor<T> semantic_enhance(const Tensor<T>& tokens, ApfWeights<T>& w, bool training);

// softmax((f_sem f_str^T) / sqrt(d)) per sample, rows sum to 1.
template <typename T>
Tensor<T> prior_matrix(const Tensor<T>& f_sem, const Tensor<T>& f_str);

// f_prior f_con: convex recombination of contextual tokens.
template <typename T>
Tensor<T> fuse(const Tensor<T>& f_prior, const Tensor<T>& f_con);

// Full pass over batched tokens [(B*N), c1] grouped in runs of N rows per
// sample. Returns every intermediate for inspection.
template <typename T>
FusionBundle<T> apf_forward(const Tensor<T>& tokens_rgb, const Tensor<T>& tokens_dsm,
                            int64_t token_group, ApfWeights<T>& w, bool training);

// Ablation baseline: channel concatenation followed by a 1x1 convolution.
template <typename T>
struct ConcatFuser {
    Conv2dLayer<T> proj;  // 2*c1 -> d
    ConcatFuser() = default;
    ConcatFuser(int64_t c1, int64_t d);
    void register_params(ParamStore<T>& p, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& f_rgb, const Tensor<T>& f_dsm);
};

extern template struct ApfWeights<float>;
extern template struct ApfWeights<double>;
extern template struct ConcatFuser<float>;
extern template struct ConcatFuser<double>;

}  // namespace ammnet
