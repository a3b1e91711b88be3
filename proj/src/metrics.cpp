#include "ammnet/metrics.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"

namespace ammnet {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : k_(num_classes), counts_(static_cast<size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 2) throw InvariantError("confusion matrix needs at least 2 classes");
}

uint64_t ConfusionMatrix::total() const {
    uint64_t t = 0;
    for (uint64_t c : counts_) t += c;
    return t;
}

void ConfusionMatrix::accumulate(const Raster& pred, const Raster& gt, int ignore_value) {
    if (pred.dtype() != RasterDType::U8 || gt.dtype() != RasterDType::U8)
        throw DataError("confusion matrix: label rasters must be u8");
    if (pred.height() != gt.height() || pred.width() != gt.width() || pred.channels() != 1 ||
        gt.channels() != 1)
        throw DataError("confusion matrix: raster extents disagree");
    accumulate(pred.u8_data().data(), gt.u8_data().data(), pred.pixels(), ignore_value);
}

void ConfusionMatrix::accumulate(const uint8_t* pred, const uint8_t* gt, int64_t n,
                                 int ignore_value) {
    for (int64_t i = 0; i < n; ++i) {
        const int g = gt[i], p = pred[i];
        if (g == ignore_value) continue;
        if (g >= k_)
            throw DataError("confusion matrix: ground-truth class " + std::to_string(g) +
                            " >= K=" + std::to_string(k_) + " at index " + std::to_string(i));
        if (p >= k_)
            throw DataError("confusion matrix: predicted class " + std::to_string(p) +
                            " >= K=" + std::to_string(k_) + " at index " + std::to_string(i));
        ++counts_[static_cast<size_t>(g) * k_ + p];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw InvariantError("confusion matrix merge: class counts disagree");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

namespace {

struct ClassTotals {
    std::vector<double> tp, t, p;  // diagonal, row sums, column sums
};

ClassTotals totals(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw InvariantError("undefined metric: empty confusion matrix");
    const int k = cm.num_classes();
    ClassTotals r{std::vector<double>(k, 0), std::vector<double>(k, 0), std::vector<double>(k, 0)};
    for (int g = 0; g < k; ++g)
        for (int p = 0; p < k; ++p) {
            const double c = static_cast<double>(cm.at(g, p));
            r.t[g] += c;
            r.p[p] += c;
            if (g == p) r.tp[g] = c;
        }
    return r;
}

}  // namespace

double moa(const ConfusionMatrix& cm) {
    auto tt = totals(cm);
    double sum = 0;
    int included = 0;
    for (int k = 0; k < cm.num_classes(); ++k) {
        if (tt.t[k] <= 0) continue;  // class absent from ground truth
        sum += tt.tp[k] / tt.t[k];
        ++included;
    }
    if (included == 0) throw InvariantError("undefined metric: no ground-truth classes");
    return sum / included;
}

double mf1(const ConfusionMatrix& cm) {
    auto tt = totals(cm);
    double sum = 0;
    int included = 0;
    for (int k = 0; k < cm.num_classes(); ++k) {
        if (tt.t[k] + tt.p[k] <= 0) continue;
        sum += 2.0 * tt.tp[k] / (tt.p[k] + tt.t[k]);
        ++included;
    }
    if (included == 0) throw InvariantError("undefined metric: no classes present");
    return sum / included;
}

double miou(const ConfusionMatrix& cm) {
    auto tt = totals(cm);
    double sum = 0;
    int included = 0;
    for (int k = 0; k < cm.num_classes(); ++k) {
        const double uni = tt.t[k] + tt.p[k] - tt.tp[k];
        if (tt.t[k] + tt.p[k] <= 0) continue;
        sum += tt.tp[k] / uni;
        ++included;
    }
    if (included == 0) throw InvariantError("undefined metric: no classes present");
    return sum / included;
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
    auto tt = totals(cm);
    std::vector<double> out(static_cast<size_t>(cm.num_classes()),
                            std::numeric_limits<double>::quiet_NaN());
    for (int k = 0; k < cm.num_classes(); ++k)
        if (tt.t[k] + tt.p[k] > 0) out[static_cast<size_t>(k)] = 2.0 * tt.tp[k] / (tt.p[k] + tt.t[k]);
    return out;
}

MetricSummary summarize(const ConfusionMatrix& cm) {
    return MetricSummary{moa(cm), mf1(cm), miou(cm), per_class_f1(cm)};
}

std::string metrics_record(int epoch, const std::string& split, const MetricSummary& m,
                           uint64_t seed, uint64_t config_hash) {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["split"] = split;
    j["per_class_f1"] = nlohmann::json::array();
    for (double v : m.per_class_f1) {
        if (std::isnan(v))
            j["per_class_f1"].push_back(nullptr);
        else
            j["per_class_f1"].push_back(v);
    }
    j["moa"] = m.moa;
    j["mf1"] = m.mf1;
    j["miou"] = m.miou;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    return j.dump();
}

}  // namespace ammnet
