#pragma once

#include <array>
#include <string>
#include <vector>

#include "ammnet/nn.hpp"

namespace ammnet {

// Capacity tiers. Stage s runs at width base_width * 2^s; total parameter
// count is strictly ordered tiny < small < base.
struct EncoderTier {
    std::string name;
    std::array<int, 4> stage_depths;
    int base_width;
};

EncoderTier tier_from_name(const std::string& name);  // tiny | small | base

// Pre-activation residual block: bn-relu-conv3x3, bn-relu-conv3x3, additive
// skip (1x1 projection when the extents or widths change).
template <typename T>
struct ResBlock {
    BatchNorm<T> bn1, bn2;
    Conv2dLayer<T> conv1, conv2;
    bool has_proj = false;
    Conv2dLayer<T> proj;

    ResBlock() = default;
    ResBlock(int64_t in_ch, int64_t out_ch, int stride);
    void register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& x, bool training);
};

template <typename T>
struct EncoderOutput {
    std::array<Tensor<T>, 4> stages;  // strides 4, 8, 16, 32
    Tensor<T> stem_mid;               // stride 2, used by the decoder's fine path
    int64_t final_channels = 0;
};

// Stride-4 stem (two 3x3 stride-2 convs) followed by 4 residual stages, each
// halving the spatial extents after the first.
template <typename T>
class Encoder {
public:
    Encoder() = default;
    Encoder(int64_t in_channels, const EncoderTier& tier);
    void register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix);
    EncoderOutput<T> forward(const Tensor<T>& x, bool training);
    int64_t final_channels() const { return final_channels_; }
    int64_t stem_width() const { return stem_width_; }

private:
    Conv2dLayer<T> stem1_, stem2_;
    BatchNorm<T> sbn1_, sbn2_;
    std::vector<std::vector<ResBlock<T>>> stages_;
    int64_t final_channels_ = 0;
    int64_t stem_width_ = 0;
};

// 1x1 conv (no bias) + batchnorm + relu lifting DSM channels c2 to the RGB
// width c1. Parameter overhead is exactly c1*c2 + 2*c1.
template <typename T>
struct ChannelMatcher {
    Conv2dLayer<T> proj;
    BatchNorm<T> bn;
    int64_t in_ch = 0, out_ch = 0;

    ChannelMatcher() = default;
    ChannelMatcher(int64_t c2, int64_t c1);
    void register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& x, bool training);
};

// Asymmetric dual encoder: deep RGB branch, shallow DSM branch, channel
// matching applied to the DSM final stage.
template <typename T>
class DualEncoder {
public:
    DualEncoder() = default;
    DualEncoder(const EncoderTier& rgb_tier, const EncoderTier& dsm_tier);
    void register_params(ParamStore<T>& p, BufferStore<T>& b, const std::string& prefix);

    // rgb [B,3,H,W], dsm [B,1,H,W], H and W divisible by 32. The returned DSM
    // output has its final stage channel-matched to the RGB width.
    std::pair<EncoderOutput<T>, EncoderOutput<T>> forward(const Tensor<T>& rgb,
                                                          const Tensor<T>& dsm, bool training);

    int64_t rgb_channels() const { return rgb_.final_channels(); }
    Encoder<T>& rgb_encoder() { return rgb_; }
    Encoder<T>& dsm_encoder() { return dsm_; }
    ChannelMatcher<T>& matcher() { return matcher_; }

private:
    Encoder<T> rgb_, dsm_;
    ChannelMatcher<T> matcher_;
};

extern template struct ResBlock<float>;
extern template struct ResBlock<double>;
extern template class Encoder<float>;
extern template class Encoder<double>;
extern template struct ChannelMatcher<float>;
extern template struct ChannelMatcher<double>;
extern template class DualEncoder<float>;
extern template class DualEncoder<double>;

}  // namespace ammnet
