#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ammnet/raster.hpp"

namespace ammnet {

// K x K counts, rows = ground truth, columns = prediction. Ignore-labeled
// pixels are excluded. Shards accumulated independently merge associatively.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    int num_classes() const { return k_; }
    uint64_t at(int gt, int pred) const { return counts_[static_cast<size_t>(gt) * k_ + pred]; }
    uint64_t& at(int gt, int pred) { return counts_[static_cast<size_t>(gt) * k_ + pred]; }
    uint64_t total() const;

    void accumulate(const Raster& pred, const Raster& gt, int ignore_value = 255);
    void accumulate(const uint8_t* pred, const uint8_t* gt, int64_t n, int ignore_value = 255);
    void merge(const ConfusionMatrix& other);

private:
    int k_;
    std::vector<uint64_t> counts_;
};

// Class-averaged metrics, f64. A class enters the mean only when it appears
// in the ground truth (moa) or in ground truth or predictions (mf1 / miou).
// All three raise InvariantError on an empty matrix.
double moa(const ConfusionMatrix& cm);
double mf1(const ConfusionMatrix& cm);
double miou(const ConfusionMatrix& cm);

// Per-class F1; classes outside the included set get NaN.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);

struct MetricSummary {
    double moa = 0, mf1 = 0, miou = 0;
    std::vector<double> per_class_f1;
};
MetricSummary summarize(const ConfusionMatrix& cm);

// JSON-lines evaluation record.
std::string metrics_record(int epoch, const std::string& split, const MetricSummary& m,
                           uint64_t seed, uint64_t config_hash);

}  // namespace ammnet
