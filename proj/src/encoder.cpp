#include "ammnet/encoder.hpp"

namespace ammnet {

EncoderTier tier_from_name(const std::string& name) {
    if (name == "tiny") return {"tiny", {1, 1, 1, 1}, 16};
    if (name == "small") return {"small", {2, 2, 2, 2}, 24};
    if (name == "base") return {"base", {2, 2, 4, 2}, 32};
    throw ConfigError("unknown encoder tier: '" + name + "' (expected tiny|small|base)");
}

// ---- ResBlock ---------------------------------------------------------------

template <typename T>
ResBlock<T>::ResBlock(int64_t in_ch, int64_t out_ch, int stride)
    : bn1(in_ch),
      bn2(out_ch),
      conv1(in_ch, out_ch, 3, stride, 1, false),
      conv2(out_ch, out_ch, 3, 1, 1, false),
      has_proj(stride != 1 || in_ch != out_ch),
      proj() {
    if (has_proj) proj = Conv2dLayer<T>(in_ch, out_ch, 1, stride, 0, false);
}

template <typename T>
void ResBlock<T>::register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix) {
    bn1.register_params(p, prefix + ".bn1");
    bn1.register_buffers(b, prefix + ".bn1");
    conv1.register_params(p, prefix + ".conv1");
    bn2.register_params(p, prefix + ".bn2");
    bn2.register_buffers(b, prefix + ".bn2");
    conv2.register_params(p, prefix + ".conv2");
    if (has_proj) proj.register_params(p, prefix + ".proj");
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, bool training) {
    Tensor<T> a = relu(bn1.forward(x, training));
    Tensor<T> h = conv1.forward(a);
    h = conv2.forward(relu(bn2.forward(h, training)));
    Tensor<T> skip = has_proj ? proj.forward(a) : x;
    return add(h, skip);
}

// ---- Encoder ------------------------------------------------------------------

template <typename T>
Encoder<T>::Encoder(int64_t in_channels, const EncoderTier& tier)
    : stem1_(in_channels, tier.base_width, 3, 2, 1, false),
      stem2_(tier.base_width, tier.base_width, 3, 2, 1, false),
      sbn1_(tier.base_width),
      sbn2_(tier.base_width),
      stem_width_(tier.base_width) {
    int64_t prev = tier.base_width;
    for (int s = 0; s < 4; ++s) {
        const int64_t width = static_cast<int64_t>(tier.base_width) << s;
        std::vector<ResBlock<T>> blocks;
        for (int d = 0; d < tier.stage_depths[static_cast<size_t>(s)]; ++d) {
            const int stride = (d == 0 && s > 0) ? 2 : 1;
            blocks.emplace_back(d == 0 ? prev : width, width, stride);
        }
        stages_.push_back(std::move(blocks));
        prev = width;
    }
    final_channels_ = prev;
}

template <typename T>
void Encoder<T>::register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix) {
    stem1_.register_params(p, prefix + ".stem1");
    sbn1_.register_params(p, prefix + ".sbn1");
    sbn1_.register_buffers(b, prefix + ".sbn1");
    stem2_.register_params(p, prefix + ".stem2");
    sbn2_.register_params(p, prefix + ".sbn2");
    sbn2_.register_buffers(b, prefix + ".sbn2");
    for (size_t s = 0; s < stages_.size(); ++s)
        for (size_t d = 0; d < stages_[s].size(); ++d)
            stages_[s][d].register_params(
                p, b, prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(d));
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const Tensor<T>& x, bool training) {
    EncoderOutput<T> out;
    Tensor<T> h = relu(sbn1_.forward(stem1_.forward(x), training));
    out.stem_mid = h;
    h = relu(sbn2_.forward(stem2_.forward(h), training));
    for (size_t s = 0; s < 4; ++s) {
        for (auto& block : stages_[s]) h = block.forward(h, training);
        out.stages[s] = h;
    }
    out.final_channels = final_channels_;
    return out;
}

// ---- ChannelMatcher ----------------------------------------------------------------

template <typename T>
ChannelMatcher<T>::ChannelMatcher(int64_t c2, int64_t c1)
    : proj(c2, c1, 1, 1, 0, false), bn(c1), in_ch(c2), out_ch(c1) {}

template <typename T>
void ChannelMatcher<T>::register_params(ParamStore<T>& p, BufferStore<T>& b,
                                        const std::string& prefix) {
    proj.register_params(p, prefix + ".proj");
    bn.register_params(p, prefix + ".bn");
    bn.register_buffers(b, prefix + ".bn");
}

template <typename T>
Tensor<T> ChannelMatcher<T>::forward(const Tensor<T>& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != in_ch)
        throw DimensionError("channel matcher: input " + shape_str(x.shape()) +
                             " does not have c2=" + std::to_string(in_ch) + " channels");
    return relu(bn.forward(proj.forward(x), training));
}

// ---- DualEncoder --------------------------------------------------------------------

template <typename T>
DualEncoder<T>::DualEncoder(const EncoderTier& rgb_tier, const EncoderTier& dsm_tier)
    : rgb_(3, rgb_tier),
      dsm_(1, dsm_tier),
      matcher_(dsm_.final_channels(), rgb_.final_channels()) {}

template <typename T>
void DualEncoder<T>::register_params(ParamStore<T>& p, BufferStore<T>& b,
                                     const std::string& prefix) {
    rgb_.register_params(p, b, prefix + ".rgb");
    dsm_.register_params(p, b, prefix + ".dsm");
    matcher_.register_params(p, b, prefix + ".cm");
}

template <typename T>
std::pair<EncoderOutput<T>, EncoderOutput<T>> DualEncoder<T>::forward(const Tensor<T>& rgb,
                                                                      const Tensor<T>& dsm,
                                                                      bool training) {
    if (rgb.rank() != 4 || rgb.dim(1) != 3)
        throw DimensionError("dual encoder: rgb input must be [B,3,H,W], got " + shape_str(rgb.shape()));
    if (dsm.rank() != 4 || dsm.dim(1) != 1)
        throw DimensionError("dual encoder: dsm input must be [B,1,H,W], got " + shape_str(dsm.shape()));
    if (rgb.dim(2) % 32 != 0 || rgb.dim(3) % 32 != 0)
        throw DimensionError("dual encoder: extents must be divisible by 32, got " +
                             shape_str(rgb.shape()));
    if (rgb.dim(0) != dsm.dim(0) || rgb.dim(2) != dsm.dim(2) || rgb.dim(3) != dsm.dim(3))
        throw DimensionError("dual encoder: rgb " + shape_str(rgb.shape()) + " and dsm " +
                             shape_str(dsm.shape()) + " extents disagree");

    EncoderOutput<T> r = rgb_.forward(rgb, training);
    EncoderOutput<T> d = dsm_.forward(dsm, training);
    d.stages[3] = matcher_.forward(d.stages[3], training);
    d.final_channels = rgb_.final_channels();
    return {std::move(r), std::move(d)};
}

template struct ResBlock<float>;
template struct ResBlock<double>;
template class Encoder<float>;
template class Encoder<double>;
template struct ChannelMatcher<float>;
template struct ChannelMatcher<double>;
template class DualEncoder<float>;
template class DualEncoder<double>;

}  // namespace ammnet
