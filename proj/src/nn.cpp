#include "ammnet/nn.hpp"

#include <cmath>

#include "ammnet/rng.hpp"

namespace ammnet {

// ---- ParamStore / BufferStore ---------------------------------------------

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> tensor, int64_t fan_in, ParamKind kind,
                        bool frozen) {
    if (index_.count(name)) throw InvariantError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, std::move(tensor), fan_in, kind, frozen});
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvariantError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

template <typename T>
int64_t ParamStore<T>::total_numel() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
void BufferStore<T>::add(const std::string& name, std::vector<T>* data) {
    if (index_.count(name)) throw InvariantError("duplicate buffer name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, data});
}

// ---- init -------------------------------------------------------------------

template <typename T>
void init_params(ParamStore<T>& store, uint64_t seed) {
    for (auto& e : store.entries()) {
        Rng rng(Rng::derive(seed, fnv1a(e.name.data(), e.name.size())));
        auto& v = e.tensor.data();
        switch (e.kind) {
            case ParamKind::Weight: {
                const double std = std::sqrt(2.0 / static_cast<double>(e.fan_in));
                for (auto& x : v) x = static_cast<T>(rng.normal() * std);
                break;
            }
            case ParamKind::Bias:
            case ParamKind::BnBeta:
                std::fill(v.begin(), v.end(), T(0));
                break;
            case ParamKind::BnGamma:
                std::fill(v.begin(), v.end(), T(1));
                break;
        }
    }
}

// ---- Linear -------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(int64_t in, int64_t out)
    : weight(Tensor<T>::zeros({out, in}, true)),
      bias(Tensor<T>::zeros({out}, true)),
      in_features(in),
      out_features(out) {}

template <typename T>
void Linear<T>::register_params(ParamStore<T>& store, const std::string& prefix, bool frozen) {
    store.add(prefix + ".weight", weight, in_features, ParamKind::Weight, frozen);
    store.add(prefix + ".bias", bias, in_features, ParamKind::Bias, frozen);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != in_features)
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match in=" +
                             std::to_string(in_features));
    return add(matmul_nt(x, weight), bias);
}

// ---- Conv2dLayer ----------------------------------------------------------------

template <typename T>
Conv2dLayer<T>::Conv2dLayer(int64_t in, int64_t out, int k, int stride, int pad, bool with_bias)
    : weight(Tensor<T>::zeros({out, in, k, k}, true)),
      stride(stride),
      pad(pad),
      k(k),
      in_ch(in),
      out_ch(out) {
    if (with_bias) bias = Tensor<T>::zeros({out}, true);
}

template <typename T>
void Conv2dLayer<T>::register_params(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".weight", weight, in_ch * k * k, ParamKind::Weight);
    if (bias) store.add(prefix + ".bias", *bias, in_ch * k * k, ParamKind::Bias);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, pad);
}

// ---- BatchNorm -------------------------------------------------------------------

template <typename T>
BatchNorm<T>::BatchNorm(int64_t c)
    : gamma(Tensor<T>::zeros({c}, true)),
      beta(Tensor<T>::zeros({c}, true)),
      running_mean(static_cast<size_t>(c), T(0)),
      running_var(static_cast<size_t>(c), T(1)),
      channels(c) {}

template <typename T>
void BatchNorm<T>::register_params(ParamStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".gamma", gamma, channels, ParamKind::BnGamma);
    store.add(prefix + ".beta", beta, channels, ParamKind::BnBeta);
}

template <typename T>
void BatchNorm<T>::register_buffers(BufferStore<T>& store, const std::string& prefix) {
    store.add(prefix + ".running_mean", &running_mean);
    store.add(prefix + ".running_var", &running_var);
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, bool training) {
    int64_t outer, inner;
    if (x.rank() == 2 && x.dim(1) == channels) {
        outer = x.dim(0);
        inner = 1;
    } else if (x.rank() == 4 && x.dim(1) == channels) {
        outer = x.dim(0);
        inner = x.dim(2) * x.dim(3);
    } else {
        throw DimensionError("batchnorm: input " + shape_str(x.shape()) + " does not match C=" +
                             std::to_string(channels));
    }
    const int64_t c = channels, n = outer * inner;
    const auto& xv = x.data();

    std::vector<T> mean(c), inv_std(c);
    if (training) {
        if (n < 2)
            throw InvariantError("batchnorm: training mode needs at least 2 elements per channel, got " +
                                 std::to_string(n));
        for (int64_t ic = 0; ic < c; ++ic) {
            double s = 0.0;
            for (int64_t o = 0; o < outer; ++o) {
                const T* p = xv.data() + (o * c + ic) * inner;
                for (int64_t i = 0; i < inner; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(n);
            double sq = 0.0;
            for (int64_t o = 0; o < outer; ++o) {
                const T* p = xv.data() + (o * c + ic) * inner;
                for (int64_t i = 0; i < inner; ++i) {
                    const double d = p[i] - m;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(n);  // biased
            mean[ic] = static_cast<T>(m);
            inv_std[ic] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            running_mean[ic] = (T(1) - momentum) * running_mean[ic] + momentum * static_cast<T>(m);
            running_var[ic] = (T(1) - momentum) * running_var[ic] + momentum * static_cast<T>(var);
        }
    } else {
        for (int64_t ic = 0; ic < c; ++ic) {
            mean[ic] = running_mean[ic];
            inv_std[ic] = T(1) / std::sqrt(running_var[ic] + eps);
        }
    }

    std::vector<T> out(xv.size());
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = xv.data() + (o * c + ic) * inner;
            T* q = out.data() + (o * c + ic) * inner;
            const T m = mean[ic], is = inv_std[ic], g = gv[ic], b = bv[ic];
            for (int64_t i = 0; i < inner; ++i) q[i] = g * (p[i] - m) * is + b;
        }

    Tensor<T> r = Tensor<T>::from(x.shape(), std::move(out));
    if (grad_mode_enabled() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        Node<T>* rn = r.node().get();
        Node<T>* xn = x.node().get();
        Node<T>* gn = gamma.node().get();
        Node<T>* bn = beta.node().get();
        auto mean_c = mean;
        auto istd_c = inv_std;
        r.node()->requires_grad = true;
        r.node()->parents = {x.node(), gamma.node(), beta.node()};
        r.node()->backward_fn = [rn, xn, gn, bn, mean_c, istd_c, outer, inner, c, n, training]() {
            const auto& g = rn->grad;
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t ic = 0; ic < c; ++ic) {
                    T s = T(0);
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* p = g.data() + (o * c + ic) * inner;
                        for (int64_t i = 0; i < inner; ++i) s += p[i];
                    }
                    bn->grad[ic] += s;
                }
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int64_t ic = 0; ic < c; ++ic) {
                    const T m = mean_c[ic], is = istd_c[ic];
                    T s = T(0);
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* p = g.data() + (o * c + ic) * inner;
                        const T* xp = xn->value.data() + (o * c + ic) * inner;
                        for (int64_t i = 0; i < inner; ++i) s += p[i] * (xp[i] - m) * is;
                    }
                    gn->grad[ic] += s;
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int64_t ic = 0; ic < c; ++ic) {
                    const T m = mean_c[ic], is = istd_c[ic], ga = gn->value[ic];
                    if (!training) {
                        const T f = ga * is;
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* p = g.data() + (o * c + ic) * inner;
                            T* q = xn->grad.data() + (o * c + ic) * inner;
                            for (int64_t i = 0; i < inner; ++i) q[i] += f * p[i];
                        }
                        continue;
                    }
                    // training mode: batch statistics couple the gradient
                    T sum_g = T(0), sum_gx = T(0);
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* p = g.data() + (o * c + ic) * inner;
                        const T* xp = xn->value.data() + (o * c + ic) * inner;
                        for (int64_t i = 0; i < inner; ++i) {
                            sum_g += p[i];
                            sum_gx += p[i] * (xp[i] - m) * is;
                        }
                    }
                    const T invn = T(1) / static_cast<T>(n);
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* p = g.data() + (o * c + ic) * inner;
                        const T* xp = xn->value.data() + (o * c + ic) * inner;
                        T* q = xn->grad.data() + (o * c + ic) * inner;
                        for (int64_t i = 0; i < inner; ++i) {
                            const T xh = (xp[i] - m) * is;
                            q[i] += ga * is * (p[i] - sum_g * invn - xh * sum_gx * invn);
                        }
                    }
                }
            }
        };
    }
    return r;
}

// ---- AdamW -----------------------------------------------------------------------

template <typename T>
void AdamW<T>::step(ParamStore<T>& params, T lr_scale) {
    ++step_count_;
    const T t = static_cast<T>(step_count_);
    const T bc1 = T(1) - std::pow(beta1, t);
    const T bc2 = T(1) - std::pow(beta2, t);
    const T lr_t = lr * lr_scale;
    for (auto& e : params.entries()) {
        if (e.frozen) continue;
        if (!e.tensor.has_grad())
            throw InvariantError("adamw: missing gradient for parameter " + e.name);
        auto& p = e.tensor.data();
        const auto& g = e.tensor.node()->grad;
        auto& mom = moments_[e.name];
        if (mom.m.empty()) {
            mom.m.assign(p.size(), T(0));
            mom.v.assign(p.size(), T(0));
        }
        for (size_t i = 0; i < p.size(); ++i) {
            p[i] -= lr_t * weight_decay * p[i];
            mom.m[i] = beta1 * mom.m[i] + (T(1) - beta1) * g[i];
            mom.v[i] = beta2 * mom.v[i] + (T(1) - beta2) * g[i] * g[i];
            const T mhat = mom.m[i] / bc1;
            const T vhat = mom.v[i] / bc2;
            p[i] -= lr_t * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double cosine_factor(int64_t t, int64_t total) {
    if (total <= 0) return 1.0;
    return 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) /
                                 static_cast<double>(total)));
}

template class ParamStore<float>;
template class ParamStore<double>;
template class BufferStore<float>;
template class BufferStore<double>;
template void init_params(ParamStore<float>&, uint64_t);
template void init_params(ParamStore<double>&, uint64_t);
template struct Linear<float>;
template struct Linear<double>;
template struct Conv2dLayer<float>;
template struct Conv2dLayer<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace ammnet
