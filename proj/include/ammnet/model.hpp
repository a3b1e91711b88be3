#pragma once

#include <optional>
#include <string>

#include "ammnet/alignment.hpp"
#include "ammnet/encoder.hpp"
#include "ammnet/fuser.hpp"
#include "ammnet/synth.hpp"

namespace ammnet {

struct ModelConfig {
    std::string rgb_tier = "base";
    std::string dsm_tier = "small";
    std::string fusion = "apf";  // apf | concat
    bool da_enabled = true;
    double da_alpha = 5e-4;
    int num_classes = 6;
    int crop = 64;
    bool single_modal = false;  // RGB-only path, fusion and alignment disabled
    int da_latent_len = 128;

    void validate() const;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;                          // [B, K, H, W]
    std::optional<Tensor<T>> align_loss;       // present iff training && da_enabled
    std::optional<FusionBundle<T>> fusion;     // present on the apf path
};

// Skip-connection upsampling decoder: 1x1 projections, nearest 2x upsampling,
// additive skips from the RGB encoder pyramid down to the stem and the raw
// input so the classifier sees full-resolution detail.
template <typename T>
struct Decoder {
    Conv2dLayer<T> p_fused, p_s2, p_s1, p_s0, p_stem, p_in;
    Conv2dLayer<T> reduce2, reduce1, classifier;
    int64_t width = 0;

    Decoder() = default;
    Decoder(int64_t fused_ch, int64_t s2_ch, int64_t s1_ch, int64_t s0_ch, int64_t stem_ch,
            int num_classes);
    void register_params(ParamStore<T>& p, const std::string& prefix);
    Tensor<T> forward(const Tensor<T>& fused, const EncoderOutput<T>& rgb,
                      const Tensor<T>& rgb_raw);
};

// Full assembly: dual encoder -> fusion (with the alignment tap) -> decoder.
template <typename T>
class Model {
public:
    explicit Model(const ModelConfig& cfg);
    void init(uint64_t seed) { init_params(params_, seed); }

    // rgb [B,3,H,W] in [0,1]; dsm [B,1,H,W] standardized per tile (undefined
    // tensor allowed in single-modal mode). da_seed drives the alignment
    // noise draw for this step.
    ForwardResult<T> forward(const Tensor<T>& rgb, const Tensor<T>& dsm, bool training,
                             uint64_t da_seed = 0);

    ParamStore<T>& params() { return params_; }
    BufferStore<T>& buffers() { return buffers_; }
    const ModelConfig& config() const { return cfg_; }
    int64_t rgb_channels() const;
    int64_t fusion_width() const { return fusion_width_; }

    DualEncoder<T>& dual() { return *dual_; }
    ApfWeights<T>& apf() { return *apf_; }
    LatentMapper<T>& lm_rgb() { return *lm_rgb_; }
    LatentMapper<T>& lm_dsm() { return *lm_dsm_; }

private:
    ModelConfig cfg_;
    std::optional<Encoder<T>> rgb_only_;
    std::optional<DualEncoder<T>> dual_;
    std::optional<ApfWeights<T>> apf_;
    std::optional<ConcatFuser<T>> concat_;
    std::optional<Conv2dLayer<T>> p_single_;
    std::optional<LatentMapper<T>> lm_rgb_, lm_dsm_;
    Decoder<T> decoder_;
    ParamStore<T> params_;
    BufferStore<T> buffers_;
    int64_t fusion_width_ = 0;
};

// Mean cross entropy over non-ignored pixels (labels 0..K-1 or 255).
template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& logits, const std::vector<int32_t>& labels);

// sup + alpha * align. Negative alpha is a config error.
template <typename T>
Tensor<T> final_loss(const Tensor<T>& sup, const std::optional<Tensor<T>>& align, double alpha);

// ---- checkpoint container ---------------------------------------------------
// Layout (little-endian): magic "AMMN" | format version u32 (1 = f32 payload,
// 2 = f64 payload) | entry count u32 | per entry: name length u16, name bytes,
// rank u8, extents u32 each, values. Round trips are bit-exact.
template <typename T>
struct StateEntry {
    std::string name;
    Shape shape;
    std::vector<T> values;
};

template <typename T> std::vector<uint8_t> state_to_bytes(const std::vector<StateEntry<T>>& entries);
template <typename T> std::vector<StateEntry<T>> state_from_bytes(const std::vector<uint8_t>& bytes);
template <typename T> void write_state_file(const std::string& path, const std::vector<StateEntry<T>>& entries);
template <typename T> std::vector<StateEntry<T>> read_state_file(const std::string& path);

// Save parameters, buffers and the run-config hash; load verifies shapes and
// returns the stored hash for the caller's version check.
template <typename T> void save_checkpoint(const std::string& path, Model<T>& m, uint64_t config_hash);
template <typename T> uint64_t load_checkpoint(const std::string& path, Model<T>& m);

extern template struct Decoder<float>;
extern template struct Decoder<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace ammnet
