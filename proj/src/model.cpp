#include "ammnet/model.hpp"

#include <cstring>
#include <fstream>

namespace ammnet {

void ModelConfig::validate() const {
    if (crop < 32 || crop % 32 != 0)
        throw ConfigError("crop must be a positive multiple of 32, got " + std::to_string(crop));
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (fusion != "apf" && fusion != "concat")
        throw ConfigError("fusion must be apf or concat, got '" + fusion + "'");
    if (da_alpha < 0) throw ConfigError("da_alpha must be >= 0");
    if (da_alpha > 0 && !da_enabled)
        throw ConfigError("da_alpha > 0 conflicts with da_enabled=false");
    if (single_modal && da_enabled)
        throw ConfigError("single_modal conflicts with da_enabled=true");
    if (da_latent_len < 2) throw ConfigError("da_latent_len must be >= 2");
    tier_from_name(rgb_tier);
    tier_from_name(dsm_tier);
}

// ---- Decoder ------------------------------------------------------------------

template <typename T>
Decoder<T>::Decoder(int64_t fused_ch, int64_t s2_ch, int64_t s1_ch, int64_t s0_ch, int64_t stem_ch,
                    int num_classes)
    : p_fused(fused_ch, 64, 1, 1, 0, true),
      p_s2(s2_ch, 64, 1, 1, 0, true),
      p_s1(s1_ch, 64, 1, 1, 0, true),
      p_s0(s0_ch, 64, 1, 1, 0, true),
      p_stem(stem_ch, 32, 1, 1, 0, true),
      p_in(3, 16, 1, 1, 0, true),
      reduce2(64, 32, 1, 1, 0, true),
      reduce1(32, 16, 1, 1, 0, true),
      classifier(16, num_classes, 1, 1, 0, true),
      width(64) {}

template <typename T>
void Decoder<T>::register_params(ParamStore<T>& p, const std::string& prefix) {
    p_fused.register_params(p, prefix + ".p_fused");
    p_s2.register_params(p, prefix + ".p_s2");
    p_s1.register_params(p, prefix + ".p_s1");
    p_s0.register_params(p, prefix + ".p_s0");
    p_stem.register_params(p, prefix + ".p_stem");
    p_in.register_params(p, prefix + ".p_in");
    reduce2.register_params(p, prefix + ".reduce2");
    reduce1.register_params(p, prefix + ".reduce1");
    classifier.register_params(p, prefix + ".classifier");
}

template <typename T>
Tensor<T> Decoder<T>::forward(const Tensor<T>& fused, const EncoderOutput<T>& rgb,
                              const Tensor<T>& rgb_raw) {
    Tensor<T> x = relu(p_fused.forward(fused));                                   // stride 32
    x = relu(add(upsample_nearest2x(x), p_s2.forward(rgb.stages[2])));            // 16
    x = relu(add(upsample_nearest2x(x), p_s1.forward(rgb.stages[1])));            // 8
    x = relu(add(upsample_nearest2x(x), p_s0.forward(rgb.stages[0])));            // 4
    x = relu(add(reduce2.forward(upsample_nearest2x(x)), p_stem.forward(rgb.stem_mid)));  // 2
    x = relu(add(reduce1.forward(upsample_nearest2x(x)), p_in.forward(rgb_raw)));  // 1
    return classifier.forward(x);
}

// ---- Model ---------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const EncoderTier rgb_tier = tier_from_name(cfg_.rgb_tier);
    const EncoderTier dsm_tier = tier_from_name(cfg_.dsm_tier);
    int64_t c1 = 0;
    int64_t stem_w = 0;

    if (cfg_.single_modal) {
        rgb_only_.emplace(3, rgb_tier);
        c1 = rgb_only_->final_channels();
        stem_w = rgb_only_->stem_width();
    } else {
        dual_.emplace(rgb_tier, dsm_tier);
        c1 = dual_->rgb_channels();
        stem_w = dual_->rgb_encoder().stem_width();
    }
    fusion_width_ = c1 / 2;

    if (cfg_.single_modal) {
        p_single_.emplace(c1, fusion_width_, 1, 1, 0, true);
    } else if (cfg_.fusion == "apf") {
        apf_.emplace(c1, fusion_width_);
    } else {
        concat_.emplace(c1, fusion_width_);
    }
    if (cfg_.da_enabled) {
        lm_rgb_.emplace(c1, cfg_.da_latent_len);
        lm_dsm_.emplace(c1, cfg_.da_latent_len);
    }
    decoder_ = Decoder<T>(fusion_width_, c1 / 2, c1 / 4, c1 / 8, stem_w, cfg_.num_classes);

    if (cfg_.single_modal) {
        rgb_only_->register_params(params_, buffers_, "encoder.rgb");
        p_single_->register_params(params_, "fuser.single");
    } else {
        dual_->register_params(params_, buffers_, "encoder");
        if (apf_) apf_->register_params(params_, buffers_, "fuser.apf");
        if (concat_) concat_->register_params(params_, "fuser.concat");
    }
    if (cfg_.da_enabled) {
        lm_rgb_->register_params(params_, "da.lm_rgb", /*frozen=*/true);  // detached target side
        lm_dsm_->register_params(params_, "da.lm_dsm");
    }
    decoder_.register_params(params_, "decoder");
}

template <typename T>
int64_t Model<T>::rgb_channels() const {
    return cfg_.single_modal ? rgb_only_->final_channels() : dual_->rgb_channels();
}

template <typename T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& rgb, const Tensor<T>& dsm, bool training,
                                   uint64_t da_seed) {
    if (rgb.rank() != 4 || rgb.dim(1) != 3)
        throw DimensionError("model: rgb input must be [B,3,H,W], got " + shape_str(rgb.shape()));
    if (rgb.dim(2) % 32 != 0 || rgb.dim(3) % 32 != 0)
        throw DimensionError("model: input extents must be divisible by 32, got " +
                             shape_str(rgb.shape()));

    ForwardResult<T> out;
    if (cfg_.single_modal) {
        EncoderOutput<T> r = rgb_only_->forward(rgb, training);
        Tensor<T> fused = p_single_->forward(r.stages[3]);
        out.logits = decoder_.forward(fused, r, rgb);
        return out;
    }

    if (!dsm.defined())
        throw DimensionError("model: dsm input required unless single_modal");
    auto [r, d] = dual_->forward(rgb, dsm, training);

    Tensor<T> fused;
    if (apf_) {
        const int64_t b = rgb.dim(0);
        const int64_t hf = r.stages[3].dim(2), wf = r.stages[3].dim(3);
        const int64_t n_tokens = hf * wf;
        FusionBundle<T> bundle =
            apf_forward(tokens_from_nchw(r.stages[3]), tokens_from_nchw(d.stages[3]), n_tokens,
                        *apf_, training);
        fused = tokens_to_nchw(bundle.f_fuse, b, fusion_width_, hf, wf);
        out.fusion = std::move(bundle);
    } else {
        fused = concat_->forward(r.stages[3], d.stages[3]);
    }

    if (training && cfg_.da_enabled) {
        DaResult<T> da = da_forward(global_avg_pool(r.stages[3]), global_avg_pool(d.stages[3]),
                                    *lm_rgb_, *lm_dsm_, da_seed);
        out.align_loss = std::move(da.loss);
    }

    out.logits = decoder_.forward(fused, r, rgb);
    return out;
}

// ---- losses ---------------------------------------------------------------------

template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& logits, const std::vector<int32_t>& labels) {
    return cross_entropy_nchw(logits, labels, kIgnoreLabel);
}

template <typename T>
Tensor<T> final_loss(const Tensor<T>& sup, const std::optional<Tensor<T>>& align, double alpha) {
    if (alpha < 0) throw ConfigError("final_loss: alpha must be >= 0");
    if (!align) return sup;
    return add(sup, mul_scalar(*align, static_cast<T>(alpha)));
}

// ---- checkpoint container ----------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'A', 'M', 'M', 'N'};

template <typename T> constexpr uint32_t payload_version();
template <> constexpr uint32_t payload_version<float>() { return 1; }
template <> constexpr uint32_t payload_version<double>() { return 2; }

template <typename V>
void put(std::vector<uint8_t>& out, V v) {
    const size_t n = out.size();
    out.resize(n + sizeof(V));
    std::memcpy(out.data() + n, &v, sizeof(V));
}

template <typename V>
V get(const std::vector<uint8_t>& in, size_t& off) {
    if (off + sizeof(V) > in.size())
        throw FormatError("checkpoint: truncated at byte offset " + std::to_string(off));
    V v;
    std::memcpy(&v, in.data() + off, sizeof(V));
    off += sizeof(V);
    return v;
}

}  // namespace

template <typename T>
std::vector<uint8_t> state_to_bytes(const std::vector<StateEntry<T>>& entries) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kCkptMagic, kCkptMagic + 4);
    put<uint32_t>(out, payload_version<T>());
    put<uint32_t>(out, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        put<uint16_t>(out, static_cast<uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put<uint8_t>(out, static_cast<uint8_t>(e.shape.size()));
        for (int64_t ext : e.shape) put<uint32_t>(out, static_cast<uint32_t>(ext));
        const size_t n = out.size();
        out.resize(n + e.values.size() * sizeof(T));
        std::memcpy(out.data() + n, e.values.data(), e.values.size() * sizeof(T));
    }
    return out;
}

template <typename T>
std::vector<StateEntry<T>> state_from_bytes(const std::vector<uint8_t>& bytes) {
    size_t off = 0;
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic (at byte offset 0)");
    off = 4;
    const uint32_t version = get<uint32_t>(bytes, off);
    if (version != payload_version<T>())
        throw FormatError("checkpoint: format version " + std::to_string(version) +
                          " does not match the requested payload precision");
    const uint32_t count = get<uint32_t>(bytes, off);
    std::vector<StateEntry<T>> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        StateEntry<T> e;
        const uint16_t name_len = get<uint16_t>(bytes, off);
        if (off + name_len > bytes.size())
            throw FormatError("checkpoint: truncated name at byte offset " + std::to_string(off));
        e.name.assign(reinterpret_cast<const char*>(bytes.data() + off), name_len);
        off += name_len;
        const uint8_t rank = get<uint8_t>(bytes, off);
        int64_t numel = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            const uint32_t ext = get<uint32_t>(bytes, off);
            e.shape.push_back(ext);
            numel *= ext;
        }
        if (off + static_cast<size_t>(numel) * sizeof(T) > bytes.size())
            throw FormatError("checkpoint: truncated values for '" + e.name +
                              "' at byte offset " + std::to_string(off));
        e.values.resize(static_cast<size_t>(numel));
        std::memcpy(e.values.data(), bytes.data() + off, static_cast<size_t>(numel) * sizeof(T));
        off += static_cast<size_t>(numel) * sizeof(T);
        entries.push_back(std::move(e));
    }
    if (off != bytes.size())
        throw FormatError("checkpoint: " + std::to_string(bytes.size() - off) +
                          " trailing bytes at offset " + std::to_string(off));
    return entries;
}

template <typename T>
void write_state_file(const std::string& path, const std::vector<StateEntry<T>>& entries) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    auto bytes = state_to_bytes(entries);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

template <typename T>
std::vector<StateEntry<T>> read_state_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("read failed: " + path);
    return state_from_bytes<T>(bytes);
}

namespace {

// The config hash rides inside the container as four u16 chunks (exact in
// either payload precision).
template <typename T>
StateEntry<T> hash_entry(uint64_t hash) {
    StateEntry<T> e;
    e.name = "meta.config_hash";
    e.shape = {4};
    for (int i = 0; i < 4; ++i)
        e.values.push_back(static_cast<T>((hash >> (16 * i)) & 0xffffULL));
    return e;
}

template <typename T>
uint64_t hash_from_values(const std::vector<T>& v) {
    uint64_t h = 0;
    for (int i = 0; i < 4; ++i)
        h |= (static_cast<uint64_t>(v[static_cast<size_t>(i)]) & 0xffffULL) << (16 * i);
    return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& m, uint64_t config_hash) {
    std::vector<StateEntry<T>> entries;
    entries.push_back(hash_entry<T>(config_hash));
    for (const auto& e : m.params().entries())
        entries.push_back(StateEntry<T>{e.name, e.tensor.shape(), e.tensor.data()});
    for (const auto& b : m.buffers().entries())
        entries.push_back(StateEntry<T>{b.name, {static_cast<int64_t>(b.data->size())}, *b.data});
    write_state_file(path, entries);
}

template <typename T>
uint64_t load_checkpoint(const std::string& path, Model<T>& m) {
    auto entries = read_state_file<T>(path);
    uint64_t hash = 0;
    size_t used = 0;
    for (const auto& e : entries) {
        if (e.name == "meta.config_hash") {
            hash = hash_from_values(e.values);
            ++used;
            continue;
        }
        if (m.params().contains(e.name)) {
            Tensor<T>& t = m.params().get(e.name);
            if (t.shape() != e.shape)
                throw FormatError("checkpoint: shape mismatch for '" + e.name + "': file " +
                                  shape_str(e.shape) + " vs model " + shape_str(t.shape()));
            t.data() = e.values;
            ++used;
            continue;
        }
        bool found = false;
        for (const auto& b : m.buffers().entries()) {
            if (b.name == e.name) {
                if (b.data->size() != e.values.size())
                    throw FormatError("checkpoint: length mismatch for buffer '" + e.name + "'");
                *b.data = e.values;
                found = true;
                break;
            }
        }
        if (!found)
            throw FormatError("checkpoint: entry '" + e.name + "' does not exist in this model");
        ++used;
    }
    if (used != m.params().size() + m.buffers().entries().size() + 1)
        throw FormatError("checkpoint: missing entries for this model configuration");
    return hash;
}

template struct Decoder<float>;
template struct Decoder<double>;
template class Model<float>;
template class Model<double>;

#define AMMNET_INSTANTIATE(T)                                                                   \
    template Tensor<T> supervised_loss(const Tensor<T>&, const std::vector<int32_t>&);          \
    template Tensor<T> final_loss(const Tensor<T>&, const std::optional<Tensor<T>>&, double);   \
    template std::vector<uint8_t> state_to_bytes(const std::vector<StateEntry<T>>&);            \
    template std::vector<StateEntry<T>> state_from_bytes(const std::vector<uint8_t>&);          \
    template void write_state_file(const std::string&, const std::vector<StateEntry<T>>&);      \
    template std::vector<StateEntry<T>> read_state_file(const std::string&);                    \
    template void save_checkpoint(const std::string&, Model<T>&, uint64_t);                     \
    template uint64_t load_checkpoint(const std::string&, Model<T>&);

AMMNET_INSTANTIATE(float)
AMMNET_INSTANTIATE(double)
#undef AMMNET_INSTANTIATE

}  // namespace ammnet
