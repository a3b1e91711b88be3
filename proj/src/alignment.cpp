#include "ammnet/alignment.hpp"

#include <cmath>

#include "ammnet/rng.hpp"

namespace ammnet {

template <typename T>
LatentMapper<T>::LatentMapper(int64_t in_width, int64_t latent_len)
    : to_mu(in_width, latent_len), to_logvar(in_width, latent_len), in_width(in_width),
      latent_len(latent_len) {}

template <typename T>
void LatentMapper<T>::register_params(ParamStore<T>& p, const std::string& prefix, bool frozen) {
    to_mu.register_params(p, prefix + ".to_mu", frozen);
    to_logvar.register_params(p, prefix + ".to_logvar", frozen);
}

template <typename T>
LatentPair<T> latent_map(const Tensor<T>& f, const LatentMapper<T>& lm, uint64_t seed) {
    if (f.rank() != 2 || f.dim(1) != lm.in_width)
        throw DimensionError("latent_map: features " + shape_str(f.shape()) +
                             " do not match mapper width " + std::to_string(lm.in_width));
    LatentPair<T> out;
    out.mu = lm.to_mu.forward(f);
    Tensor<T> logvar = lm.to_logvar.forward(f);
    out.sigma = exp(mul_scalar(logvar, T(0.5)));

    Rng rng(seed);
    Tensor<T> eps = Tensor<T>::zeros({f.dim(0), lm.latent_len});
    for (auto& v : eps.data()) v = static_cast<T>(rng.normal());
    out.eps = eps;
    out.z = add(out.mu, mul(out.sigma, eps));
    return out;
}

template <typename T>
Tensor<T> latent_to_probs(const Tensor<T>& z) {
    return softmax_rows(z);
}

template <typename T>
Tensor<T> alignment_loss(const Tensor<T>& p_dsm, const Tensor<T>& p_rgb) {
    if (p_dsm.rank() != 2 || p_dsm.shape() != p_rgb.shape())
        throw DimensionError("alignment_loss: " + shape_str(p_dsm.shape()) + " vs " +
                             shape_str(p_rgb.shape()));
    const int64_t b = p_dsm.dim(0), l = p_dsm.dim(1);
    for (const Tensor<T>* t : {&p_dsm, &p_rgb}) {
        for (int64_t i = 0; i < b; ++i) {
            T s = T(0);
            for (int64_t j = 0; j < l; ++j) s += t->data()[i * l + j];
            if (std::abs(static_cast<double>(s) - 1.0) > 1e-4)
                throw InvariantError("alignment_loss: row " + std::to_string(i) +
                                     " is not stochastic (sum " + std::to_string(static_cast<double>(s)) + ")");
        }
    }
    Tensor<T> target = p_rgb.detach();
    Tensor<T> terms = mul(p_dsm, sub(log(clamp_min(p_dsm, T(1e-12))), log(clamp_min(target, T(1e-12)))));
    return mul_scalar(sum_all(terms), T(1) / static_cast<T>(b));
}

template <typename T>
DaResult<T> da_forward(const Tensor<T>& f_rgb, const Tensor<T>& f_dsm,
                       const LatentMapper<T>& lm_rgb, const LatentMapper<T>& lm_dsm,
                       uint64_t seed) {
    DaResult<T> out;
    out.rgb = latent_map(f_rgb, lm_rgb, Rng::derive(seed, 0));
    out.dsm = latent_map(f_dsm, lm_dsm, Rng::derive(seed, 1));
    Tensor<T> p_rgb = latent_to_probs(out.rgb.z);
    Tensor<T> p_dsm = latent_to_probs(out.dsm.z);
    out.loss = alignment_loss(p_dsm, p_rgb);  // KL(dsm || rgb)
    return out;
}

template struct LatentMapper<float>;
template struct LatentMapper<double>;

#define AMMNET_INSTANTIATE(T)                                                         \
    template LatentPair<T> latent_map(const Tensor<T>&, const LatentMapper<T>&, uint64_t); \
    template Tensor<T> latent_to_probs(const Tensor<T>&);                             \
    template Tensor<T> alignment_loss(const Tensor<T>&, const Tensor<T>&);            \
    template DaResult<T> da_forward(const Tensor<T>&, const Tensor<T>&,               \
                                    const LatentMapper<T>&, const LatentMapper<T>&, uint64_t);

AMMNET_INSTANTIATE(float)
AMMNET_INSTANTIATE(double)
#undef AMMNET_INSTANTIATE

}  // namespace ammnet
