#pragma once

#include "ammnet/nn.hpp"

namespace ammnet {

// Latent mapping: two linear heads produce the mean and log-variance of a
// per-sample latent vector; sigma = exp(logvar / 2) keeps the scale positive.
template <typename T>
struct LatentMapper {
    Linear<T> to_mu, to_logvar;  // F -> L
    int64_t in_width = 0, latent_len = 0;

    LatentMapper() = default;
    LatentMapper(int64_t in_width, int64_t latent_len);
    // frozen=true keeps the mapper out of optimization (detached-target side)
    void register_params(ParamStore<T>& p, const std::string& prefix, bool frozen = false);
};

template <typename T>
struct LatentPair {
    Tensor<T> mu;     // [B, L]
    Tensor<T> sigma;  // [B, L], > 0
    Tensor<T> z;      // mu + sigma * eps
    Tensor<T> eps;    // the recorded standard-normal draw (constant)
};

// z = mu + sigma * eps with eps ~ N(0,1) from the seeded stream; gradients
// flow through mu and sigma, not eps.
template <typename T>
LatentPair<T> latent_map(const Tensor<T>& f, const LatentMapper<T>& lm, uint64_t seed);

// softmax over the latent axis; the discrete distribution the alignment
// loss compares.
template <typename T>
Tensor<T> latent_to_probs(const Tensor<T>& z);

// Mean over the batch of KL(p_dsm || p_rgb). Rows must be stochastic to 1e-4;
// entries are clamped to 1e-12 before the logs. The RGB side is detached, so
// no gradient reaches it.
template <typename T>
Tensor<T> alignment_loss(const Tensor<T>& p_dsm, const Tensor<T>& p_rgb);

template <typename T>
struct DaResult {
    Tensor<T> loss;
    LatentPair<T> rgb, dsm;
};

// Training path: map both modalities, derive probabilities, pull the DSM
// latent distribution toward the (detached) RGB one.
template <typename T>
DaResult<T> da_forward(const Tensor<T>& f_rgb, const Tensor<T>& f_dsm,
                       const LatentMapper<T>& lm_rgb, const LatentMapper<T>& lm_dsm,
                       uint64_t seed);

extern template struct LatentMapper<float>;
extern template struct LatentMapper<double>;

}  // namespace ammnet
