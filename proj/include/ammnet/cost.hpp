#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ammnet/model.hpp"

namespace ammnet {

// Accounting conventions (documented so comparisons stay internally
// consistent): one multiply-add = 2 FLOPs; batchnorm = 2 ops per element;
// relu = 1; elementwise add = 1; softmax = 4; upsampling = 0. FLOP counts
// cover the inference path of one sample; alignment mappers contribute
// parameters but no inference FLOPs. Activation memory is the sum of forward
// output buffers (everything a training step keeps for the backward pass).
struct LayerCost {
    std::string name;
    uint64_t params = 0;
    uint64_t flops = 0;
    uint64_t act_bytes = 0;
};

struct CostReport {
    std::vector<LayerCost> layers;
    uint64_t total_params() const;
    uint64_t total_flops() const;
    uint64_t total_act_bytes() const;
};

// Single-layer helpers (also the hand-check surface).
LayerCost conv_cost(const std::string& name, int64_t c_in, int64_t c_out, int k, int64_t h_out,
                    int64_t w_out, bool bias);
LayerCost linear_cost(const std::string& name, int64_t in, int64_t out, int64_t rows, bool bias);

// Analytic walk of the architecture for one sample at h x w input.
CostReport cost_model(const ModelConfig& cfg, int h, int w);

std::string cost_table(const CostReport& report, bool per_layer);

}  // namespace ammnet
