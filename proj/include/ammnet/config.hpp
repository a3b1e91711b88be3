#pragma once

#include <cstdint>
#include <string>

#include "ammnet/model.hpp"

namespace ammnet {

// Full run description: model topology plus training knobs. The canonical
// serialization (sorted key=value lines) is what config_hash() digests;
// data_dir / out_dir are environment paths and stay out of it.
struct RunConfig {
    ModelConfig model;
    int epochs = 30;
    int batch = 4;
    double lr = 2e-4;
    double weight_decay = 0.01;
    uint64_t seed = 1;
    bool augment = true;
    bool f64 = false;
    std::string data_dir;
    std::string out_dir;

    void validate() const;
    std::string serialize() const;
    uint64_t config_hash() const;

    // Throws ConfigError on unknown keys or unparsable values.
    void apply_kv(const std::string& key, const std::string& value);
};

RunConfig config_from_file(const std::string& path);
void config_to_file(const RunConfig& cfg, const std::string& path);

// Named profiles: "desk" (the defaults above) and "paper" (crop 256,
// 100 epochs, batch 8).
void apply_profile(RunConfig& cfg, const std::string& profile);

}  // namespace ammnet
