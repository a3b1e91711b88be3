#include "ammnet/cost.hpp"

#include <sstream>

namespace ammnet {

namespace {

constexpr uint64_t kBytesPerScalar = 4;  // reported for the f32 training dtype

uint64_t elems(int64_t c, int64_t h, int64_t w) {
    return static_cast<uint64_t>(c) * static_cast<uint64_t>(h) * static_cast<uint64_t>(w);
}

}  // namespace

uint64_t CostReport::total_params() const {
    uint64_t t = 0;
    for (const auto& l : layers) t += l.params;
    return t;
}

uint64_t CostReport::total_flops() const {
    uint64_t t = 0;
    for (const auto& l : layers) t += l.flops;
    return t;
}

uint64_t CostReport::total_act_bytes() const {
    uint64_t t = 0;
    for (const auto& l : layers) t += l.act_bytes;
    return t;
}

LayerCost conv_cost(const std::string& name, int64_t c_in, int64_t c_out, int k, int64_t h_out,
                    int64_t w_out, bool bias) {
    LayerCost l;
    l.name = name;
    l.params = static_cast<uint64_t>(c_out) * c_in * k * k + (bias ? c_out : 0);
    l.flops = 2ULL * c_out * c_in * k * k * h_out * w_out + (bias ? elems(c_out, h_out, w_out) : 0);
    l.act_bytes = elems(c_out, h_out, w_out) * kBytesPerScalar;
    return l;
}

LayerCost linear_cost(const std::string& name, int64_t in, int64_t out, int64_t rows, bool bias) {
    LayerCost l;
    l.name = name;
    l.params = static_cast<uint64_t>(in) * out + (bias ? out : 0);
    l.flops = 2ULL * in * out * rows + (bias ? static_cast<uint64_t>(out) * rows : 0);
    l.act_bytes = static_cast<uint64_t>(out) * rows * kBytesPerScalar;
    return l;
}

namespace {

// batchnorm + the relu that follows it in every block
LayerCost bn_relu_cost(const std::string& name, int64_t c, int64_t h, int64_t w, bool with_relu) {
    LayerCost l;
    l.name = name;
    l.params = 2ULL * static_cast<uint64_t>(c);
    l.flops = (with_relu ? 3ULL : 2ULL) * elems(c, h, w);
    l.act_bytes = elems(c, h, w) * kBytesPerScalar * (with_relu ? 2 : 1);
    return l;
}

LayerCost add_cost(const std::string& name, int64_t c, int64_t h, int64_t w) {
    LayerCost l;
    l.name = name;
    l.flops = elems(c, h, w);
    l.act_bytes = elems(c, h, w) * kBytesPerScalar;
    return l;
}

struct Walk {
    CostReport& r;
    void block(const std::string& prefix, int64_t c_in, int64_t c_out, int stride, int64_t h_in,
               int64_t w_in) {
        const int64_t h_out = h_in / stride, w_out = w_in / stride;
        r.layers.push_back(bn_relu_cost(prefix + ".bn1", c_in, h_in, w_in, true));
        r.layers.push_back(conv_cost(prefix + ".conv1", c_in, c_out, 3, h_out, w_out, false));
        r.layers.push_back(bn_relu_cost(prefix + ".bn2", c_out, h_out, w_out, true));
        r.layers.push_back(conv_cost(prefix + ".conv2", c_out, c_out, 3, h_out, w_out, false));
        if (stride != 1 || c_in != c_out)
            r.layers.push_back(conv_cost(prefix + ".proj", c_in, c_out, 1, h_out, w_out, false));
        r.layers.push_back(add_cost(prefix + ".add", c_out, h_out, w_out));
    }

    // returns (final_channels, final_h, final_w)
    std::array<int64_t, 3> encoder(const std::string& prefix, int64_t in_ch, const EncoderTier& tier,
                                   int64_t h, int64_t w) {
        int64_t ch = tier.base_width;
        r.layers.push_back(conv_cost(prefix + ".stem1", in_ch, ch, 3, h / 2, w / 2, false));
        r.layers.push_back(bn_relu_cost(prefix + ".sbn1", ch, h / 2, w / 2, true));
        r.layers.push_back(conv_cost(prefix + ".stem2", ch, ch, 3, h / 4, w / 4, false));
        r.layers.push_back(bn_relu_cost(prefix + ".sbn2", ch, h / 4, w / 4, true));
        int64_t cur_h = h / 4, cur_w = w / 4, prev = ch;
        for (int s = 0; s < 4; ++s) {
            const int64_t width = static_cast<int64_t>(tier.base_width) << s;
            for (int d = 0; d < tier.stage_depths[static_cast<size_t>(s)]; ++d) {
                const int stride = (d == 0 && s > 0) ? 2 : 1;
                const std::string name =
                    prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(d);
                block(name, d == 0 ? prev : width, width, stride, cur_h, cur_w);
                cur_h /= stride;
                cur_w /= stride;
            }
            prev = width;
        }
        return {prev, cur_h, cur_w};
    }

    void decoder(int64_t fused_ch, int64_t c1, int64_t stem_ch, int num_classes, int64_t h,
                 int64_t w) {
        const int64_t h32 = h / 32, w32 = w / 32;
        r.layers.push_back(conv_cost("decoder.p_fused", fused_ch, 64, 1, h32, w32, true));
        r.layers.push_back(conv_cost("decoder.p_s2", c1 / 2, 64, 1, h / 16, w / 16, true));
        r.layers.push_back(add_cost("decoder.merge16", 64, h / 16, w / 16));
        r.layers.push_back(conv_cost("decoder.p_s1", c1 / 4, 64, 1, h / 8, w / 8, true));
        r.layers.push_back(add_cost("decoder.merge8", 64, h / 8, w / 8));
        r.layers.push_back(conv_cost("decoder.p_s0", c1 / 8, 64, 1, h / 4, w / 4, true));
        r.layers.push_back(add_cost("decoder.merge4", 64, h / 4, w / 4));
        r.layers.push_back(conv_cost("decoder.reduce2", 64, 32, 1, h / 2, w / 2, true));
        r.layers.push_back(conv_cost("decoder.p_stem", stem_ch, 32, 1, h / 2, w / 2, true));
        r.layers.push_back(add_cost("decoder.merge2", 32, h / 2, w / 2));
        r.layers.push_back(conv_cost("decoder.reduce1", 32, 16, 1, h, w, true));
        r.layers.push_back(conv_cost("decoder.p_in", 3, 16, 1, h, w, true));
        r.layers.push_back(add_cost("decoder.merge1", 16, h, w));
        r.layers.push_back(conv_cost("decoder.classifier", 16, num_classes, 1, h, w, true));
    }
};

}  // namespace

CostReport cost_model(const ModelConfig& cfg, int h, int w) {
    cfg.validate();
    if (h % 32 != 0 || w % 32 != 0)
        throw ConfigError("cost model: input extents must be divisible by 32");
    CostReport r;
    Walk walk{r};

    const EncoderTier rgb_tier = tier_from_name(cfg.rgb_tier);
    auto [c1, hf, wf] = walk.encoder("encoder.rgb", 3, rgb_tier, h, w);
    const int64_t d = c1 / 2;
    const int64_t n_tokens = hf * wf;

    if (!cfg.single_modal) {
        const EncoderTier dsm_tier = tier_from_name(cfg.dsm_tier);
        auto [c2, dh, dw] = walk.encoder("encoder.dsm", 1, dsm_tier, h, w);
        (void)dh;
        (void)dw;
        r.layers.push_back(conv_cost("encoder.cm.proj", c2, c1, 1, hf, wf, false));
        r.layers.push_back(bn_relu_cost("encoder.cm.bn", c1, hf, wf, true));

        if (cfg.fusion == "apf") {
            r.layers.push_back(linear_cost("fuser.apf.rm_rgb", c1, d, n_tokens, true));
            r.layers.push_back(linear_cost("fuser.apf.rm_dsm", c1, d, n_tokens, true));
            r.layers.push_back(linear_cost("fuser.apf.se.linear", c1, d, n_tokens, true));
            {
                LayerCost bn = bn_relu_cost("fuser.apf.se.bn", d, n_tokens, 1, true);
                r.layers.push_back(bn);
            }
            LayerCost prior{"fuser.apf.prior", 0,
                            2ULL * static_cast<uint64_t>(n_tokens) * n_tokens * d        // logits
                                + 4ULL * static_cast<uint64_t>(n_tokens) * n_tokens,     // softmax
                            static_cast<uint64_t>(n_tokens) * n_tokens * kBytesPerScalar * 2};
            r.layers.push_back(prior);
            LayerCost apply{"fuser.apf.fuse", 0,
                            2ULL * static_cast<uint64_t>(n_tokens) * n_tokens * d,
                            static_cast<uint64_t>(n_tokens) * d * kBytesPerScalar};
            r.layers.push_back(apply);
        } else {
            r.layers.push_back(conv_cost("fuser.concat.proj", 2 * c1, d, 1, hf, wf, true));
        }
        if (cfg.da_enabled) {
            // training-only: parameters count toward model size, inference FLOPs stay 0
            for (const char* side : {"da.lm_rgb", "da.lm_dsm"}) {
                LayerCost mu = linear_cost(std::string(side) + ".to_mu", c1, cfg.da_latent_len, 1, true);
                LayerCost lv = linear_cost(std::string(side) + ".to_logvar", c1, cfg.da_latent_len, 1, true);
                mu.flops = lv.flops = 0;
                mu.act_bytes = lv.act_bytes = 0;
                r.layers.push_back(mu);
                r.layers.push_back(lv);
            }
        }
    } else {
        r.layers.push_back(conv_cost("fuser.single", c1, d, 1, hf, wf, true));
    }

    walk.decoder(d, c1, rgb_tier.base_width, cfg.num_classes, h, w);
    return r;
}

std::string cost_table(const CostReport& report, bool per_layer) {
    std::ostringstream os;
    if (per_layer) {
        for (const auto& l : report.layers) {
            os << "  " << l.name;
            for (size_t pad = l.name.size(); pad < 34; ++pad) os << ' ';
            os << "params=" << l.params << " flops=" << l.flops << " act_bytes=" << l.act_bytes
               << "\n";
        }
    }
    os << "total params=" << report.total_params() << " flops=" << report.total_flops()
       << " act_bytes=" << report.total_act_bytes() << "\n";
    return os.str();
}

}  // namespace ammnet
