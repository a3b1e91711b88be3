#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ammnet/config.hpp"
#include "ammnet/metrics.hpp"
#include "ammnet/nn.hpp"

namespace ammnet {

struct Dataset {
    std::vector<Scene> scenes;
    static Dataset load(const std::string& split_dir);
    bool empty() const { return scenes.empty(); }
    size_t size() const { return scenes.size(); }
};

// Labels for loss/metrics: clutter folds into the ignore value.
std::vector<int32_t> label_vector(const Raster& labels);

template <typename T>
struct TrainOutcome {
    std::vector<double> step_losses;    // final-loss value per optimizer step
    std::vector<double> epoch_losses;   // mean per epoch
    std::optional<MetricSummary> final_val;
    std::optional<MetricSummary> final_test;
    double best_val_miou = -1.0;
    int epochs_run = 0;
    std::string last_ckpt, best_ckpt;
};

// One training run: cosine-annealed AdamW over the train split, per-epoch
// validation, checkpointing, JSON-lines logs. Deterministic for a fixed
// config and seed.
template <typename T>
class Trainer {
public:
    Trainer(const RunConfig& cfg, Dataset train, Dataset val, Dataset test);
    ~Trainer();

    void set_resume(const std::string& ckpt_path);  // continue from a saved run
    TrainOutcome<T> run();

    Model<T>& model() { return *model_; }
    // Evaluate the current weights on a dataset (eval mode, no graph).
    std::pair<ConfusionMatrix, MetricSummary> evaluate(const Dataset& data);

private:
    RunConfig cfg_;
    Dataset train_, val_, test_;
    std::unique_ptr<Model<T>> model_;
    AdamW<T> opt_;
    int start_epoch_ = 0;
    double best_val_miou_ = -1.0;
    std::string resume_path_;

    void save_run_state(const std::string& ckpt, int next_epoch);
    void load_run_state(const std::string& ckpt);
};

// Prediction raster and its color rendering (fixed palette, PPM).
template <typename T>
Raster predict_labels(Model<T>& m, const Scene& scene);
void write_color_map(const std::string& path, const Raster& labels);

extern template class Trainer<float>;
extern template class Trainer<double>;

}  // namespace ammnet
