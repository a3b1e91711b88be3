#include "ammnet/fuser.hpp"

#include <cmath>

namespace ammnet {

template <typename T>
ApfWeights<T>::ApfWeights(int64_t c1, int64_t d)
    : rm_rgb(c1, d), rm_dsm(c1, d), se_linear(c1, d), se_bn(d), width_in(c1), width(d) {}

template <typename T>
void ApfWeights<T>::register_params(ParamStore<T>& p, BufferStore<T>& b,
                                    const std::string& prefix) {
    rm_rgb.register_params(p, prefix + ".rm_rgb");
    rm_dsm.register_params(p, prefix + ".rm_dsm");
    se_linear.register_params(p, prefix + ".se.linear");
    se_bn.register_params(p, prefix + ".se.bn");
    se_bn.register_buffers(b, prefix + ".se.bn");
}

template <typename T>
Tensor<T> residual_map(const Tensor<T>& tokens, const Linear<T>& rm) {
    return rm.forward(tokens);
}

template <typename T>
Tensor<T> semantic_enhance(const Tensor<T>& tokens, ApfWeights<T>& w, bool training) {
    return relu(w.se_bn.forward(w.se_linear.forward(tokens), training));
}

template <typename T>
Tensor<T> prior_matrix(const Tensor<T>& f_sem, const Tensor<T>& f_str) {
    if (f_sem.rank() != 2 || f_str.rank() != 2 || f_sem.dim(1) != f_str.dim(1))
        throw DimensionError("prior_matrix: token widths disagree, " + shape_str(f_sem.shape()) +
                             " vs " + shape_str(f_str.shape()));
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(f_str.dim(1)));
    return softmax_rows(mul_scalar(matmul_nt(f_sem, f_str), inv_sqrt_d));
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& f_prior, const Tensor<T>& f_con) {
    if (f_prior.rank() != 2 || f_prior.dim(0) != f_prior.dim(1))
        throw DimensionError("fuse: prior must be square, got " + shape_str(f_prior.shape()));
    return matmul(f_prior, f_con);
}

template <typename T>
FusionBundle<T> apf_forward(const Tensor<T>& tokens_rgb, const Tensor<T>& tokens_dsm,
                            int64_t token_group, ApfWeights<T>& w, bool training) {
    if (tokens_rgb.rank() != 2 || tokens_rgb.dim(1) != w.width_in)
        throw DimensionError("apf: rgb tokens " + shape_str(tokens_rgb.shape()) +
                             " do not match c1=" + std::to_string(w.width_in));
    if (tokens_dsm.shape() != tokens_rgb.shape())
        throw DimensionError("apf: dsm tokens " + shape_str(tokens_dsm.shape()) +
                             " do not match rgb tokens " + shape_str(tokens_rgb.shape()));
    const int64_t rows_total = tokens_rgb.dim(0);
    if (token_group <= 0 || rows_total % token_group != 0)
        throw DimensionError("apf: row count " + std::to_string(rows_total) +
                             " is not a multiple of the token group " + std::to_string(token_group));

    FusionBundle<T> out;
    out.token_group = token_group;
    out.f_con = residual_map(tokens_rgb, w.rm_rgb);
    out.f_str = residual_map(tokens_dsm, w.rm_dsm);
    out.f_sem = semantic_enhance(tokens_rgb, w, training);

    const int64_t batch = rows_total / token_group;
    std::vector<Tensor<T>> fused;
    fused.reserve(static_cast<size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
        const int64_t r0 = b * token_group, r1 = r0 + token_group;
        Tensor<T> prior = prior_matrix(rows(out.f_sem, r0, r1), rows(out.f_str, r0, r1));
        fused.push_back(fuse(prior, rows(out.f_con, r0, r1)));
        out.f_prior.push_back(std::move(prior));
    }
    out.f_fuse = batch == 1 ? fused[0] : concat_rows(fused);
    return out;
}

template <typename T>
ConcatFuser<T>::ConcatFuser(int64_t c1, int64_t d) : proj(2 * c1, d, 1, 1, 0, true) {}

template <typename T>
void ConcatFuser<T>::register_params(ParamStore<T>& p, const std::string& prefix) {
    proj.register_params(p, prefix + ".proj");
}

template <typename T>
Tensor<T> ConcatFuser<T>::forward(const Tensor<T>& f_rgb, const Tensor<T>& f_dsm) {
    return proj.forward(concat_channels(f_rgb, f_dsm));
}

template struct ApfWeights<float>;
template struct ApfWeights<double>;
template struct ConcatFuser<float>;
template struct ConcatFuser<double>;

#define AMMNET_INSTANTIATE(T)                                                              \
    template Tensor<T> residual_map(const Tensor<T>&, const Linear<T>&);                   \
    template Tensor<T> semantic_enhance(const Tensor<T>&, ApfWeights<T>&, bool);           \
    template Tensor<T> prior_matrix(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&);                           \
    template FusionBundle<T> apf_forward(const Tensor<T>&, const Tensor<T>&, int64_t,      \
                                         ApfWeights<T>&, bool);

AMMNET_INSTANTIATE(float)
AMMNET_INSTANTIATE(double)
#undef AMMNET_INSTANTIATE

}  // namespace ammnet
