#include "ammnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ammnet/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace ammnet {

Dataset Dataset::load(const std::string& split_dir) {
    Dataset d;
    for (const auto& id : read_manifest(split_dir)) d.scenes.push_back(read_scene(split_dir, id));
    return d;
}

std::vector<int32_t> label_vector(const Raster& labels) {
    std::vector<int32_t> out(labels.u8_data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const uint8_t v = labels.u8_data()[i];
        out[i] = (v == kClutter || v == kIgnoreLabel) ? kIgnoreLabel : v;
    }
    return out;
}

namespace {

// rgb to [0,1], dsm standardized per tile
template <typename T>
void fill_inputs(const Scene& s, T* rgb_out, T* dsm_out) {
    const int64_t hw = s.rgb.pixels();
    for (int64_t i = 0; i < 3 * hw; ++i)
        rgb_out[i] = static_cast<T>(s.rgb.u8_data()[static_cast<size_t>(i)]) / T(255);
    double mean = 0;
    for (float v : s.dsm.f32_data()) mean += v;
    mean /= static_cast<double>(hw);
    double var = 0;
    for (float v : s.dsm.f32_data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(hw);
    const double inv_std = 1.0 / std::max(std::sqrt(var), 1e-6);
    for (int64_t i = 0; i < hw; ++i)
        dsm_out[i] = static_cast<T>((s.dsm.f32_data()[static_cast<size_t>(i)] - mean) * inv_std);
}

template <typename T>
struct Batch {
    Tensor<T> rgb, dsm;
    std::vector<int32_t> labels;
};

template <typename T>
Batch<T> make_batch(const std::vector<const Scene*>& scenes) {
    const int h = scenes[0]->rgb.height(), w = scenes[0]->rgb.width();
    const int64_t b = static_cast<int64_t>(scenes.size());
    Batch<T> out;
    out.rgb = Tensor<T>::zeros({b, 3, h, w});
    out.dsm = Tensor<T>::zeros({b, 1, h, w});
    out.labels.resize(static_cast<size_t>(b) * h * w);
    for (int64_t i = 0; i < b; ++i) {
        fill_inputs(*scenes[i], out.rgb.data().data() + i * 3 * h * w,
                    out.dsm.data().data() + i * h * w);
        auto lv = label_vector(scenes[i]->labels);
        std::copy(lv.begin(), lv.end(), out.labels.begin() + i * h * w);
    }
    return out;
}

Scene prepare_scene(const Scene& s, int crop_size, bool do_augment, uint64_t seed) {
    Scene cur = do_augment ? augment(s, seed) : s;
    const int h = cur.rgb.height(), w = cur.rgb.width();
    if (h < crop_size || w < crop_size)
        throw DataError("scene smaller than crop " + std::to_string(crop_size));
    if (h == crop_size && w == crop_size) return cur;
    Rng rng(Rng::derive(seed, 0xC0));
    const int y0 = static_cast<int>(rng.uniform_int(0, h - crop_size));
    const int x0 = static_cast<int>(rng.uniform_int(0, w - crop_size));
    return crop(cur, y0, x0, crop_size, crop_size);
}

void append_line(const std::string& path, const std::string& line) {
    std::ofstream f(path, std::ios::app);
    if (!f) throw IoError("cannot append to " + path);
    f << line << "\n";
}

}  // namespace

// ---- Trainer -------------------------------------------------------------------

template <typename T>
Trainer<T>::Trainer(const RunConfig& cfg, Dataset train, Dataset val, Dataset test)
    : cfg_(cfg), train_(std::move(train)), val_(std::move(val)), test_(std::move(test)) {
    cfg_.validate();
    if (train_.empty()) throw DataError("trainer: empty training split");
    model_ = std::make_unique<Model<T>>(cfg_.model);
    model_->init(Rng::derive(cfg_.seed, 0x1217));
    opt_ = AdamW<T>(static_cast<T>(cfg_.lr), static_cast<T>(cfg_.weight_decay));
}

template <typename T>
Trainer<T>::~Trainer() = default;

template <typename T>
void Trainer<T>::set_resume(const std::string& ckpt_path) {
    resume_path_ = ckpt_path;
}

template <typename T>
void Trainer<T>::save_run_state(const std::string& ckpt, int next_epoch) {
    save_checkpoint(ckpt, *model_, cfg_.config_hash());
    std::vector<StateEntry<T>> entries;
    entries.push_back({"trainer.next_epoch", {1}, {static_cast<T>(next_epoch)}});
    entries.push_back({"trainer.best_val_miou", {1}, {static_cast<T>(best_val_miou_)}});
    entries.push_back({"adamw.step_count", {1}, {static_cast<T>(opt_.step_count())}});
    for (const auto& e : model_->params().entries()) {
        auto it = opt_.moments().find(e.name);
        if (it == opt_.moments().end()) continue;
        entries.push_back({"adamw.m." + e.name, e.tensor.shape(), it->second.m});
        entries.push_back({"adamw.v." + e.name, e.tensor.shape(), it->second.v});
    }
    write_state_file(ckpt + ".optim", entries);
}

template <typename T>
void Trainer<T>::load_run_state(const std::string& ckpt) {
    const uint64_t stored = load_checkpoint(ckpt, *model_);
    if (stored != cfg_.config_hash())
        throw VersionError("resume: checkpoint config hash mismatch (checkpoint " +
                           std::to_string(stored) + ", run " + std::to_string(cfg_.config_hash()) + ")");
    for (const auto& e : read_state_file<T>(ckpt + ".optim")) {
        if (e.name == "trainer.next_epoch") start_epoch_ = static_cast<int>(e.values[0]);
        else if (e.name == "trainer.best_val_miou") best_val_miou_ = static_cast<double>(e.values[0]);
        else if (e.name == "adamw.step_count") opt_.set_step_count(static_cast<int64_t>(e.values[0]));
        else if (e.name.rfind("adamw.m.", 0) == 0) opt_.moments()[e.name.substr(8)].m = e.values;
        else if (e.name.rfind("adamw.v.", 0) == 0) opt_.moments()[e.name.substr(8)].v = e.values;
        else throw FormatError("optimizer state: unknown entry '" + e.name + "'");
    }
}

template <typename T>
std::pair<ConfusionMatrix, MetricSummary> Trainer<T>::evaluate(const Dataset& data) {
    NoGradGuard no_grad;
    ConfusionMatrix cm(cfg_.model.num_classes);
    const size_t bs = static_cast<size_t>(cfg_.batch);
    for (size_t i = 0; i < data.scenes.size(); i += bs) {
        std::vector<const Scene*> scenes;
        for (size_t j = i; j < std::min(i + bs, data.scenes.size()); ++j)
            scenes.push_back(&data.scenes[j]);
        Batch<T> batch = make_batch<T>(scenes);
        auto result = model_->forward(batch.rgb, batch.dsm, /*training=*/false);
        const auto& logits = result.logits;
        const int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
        for (int64_t ib = 0; ib < b; ++ib) {
            const T* base = logits.data().data() + ib * k * hw;
            for (int64_t q = 0; q < hw; ++q) {
                const int32_t gt = batch.labels[static_cast<size_t>(ib * hw + q)];
                if (gt == kIgnoreLabel) continue;
                int best = 0;
                T best_v = base[q];
                for (int64_t ic = 1; ic < k; ++ic)
                    if (base[ic * hw + q] > best_v) {
                        best_v = base[ic * hw + q];
                        best = static_cast<int>(ic);
                    }
                ++cm.at(gt, best);
            }
        }
    }
    return {cm, summarize(cm)};
}

template <typename T>
TrainOutcome<T> Trainer<T>::run() {
    TrainOutcome<T> out;
    const bool log_files = !cfg_.out_dir.empty();
    std::string metrics_path, train_log_path;
    if (log_files) {
        fs::create_directories(cfg_.out_dir);
        config_to_file(cfg_, cfg_.out_dir + "/run_config.txt");
        metrics_path = cfg_.out_dir + "/metrics.jsonl";
        train_log_path = cfg_.out_dir + "/train_log.jsonl";
    }
    if (!resume_path_.empty()) load_run_state(resume_path_);

    const uint64_t chash = cfg_.config_hash();
    std::vector<size_t> order(train_.size());
    for (int epoch = start_epoch_; epoch < cfg_.epochs; ++epoch) {
        const T lr_scale = static_cast<T>(cosine_factor(epoch, cfg_.epochs));
        // deterministic shuffle per (seed, epoch)
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::derive(cfg_.seed, 0xE0000000ULL + static_cast<uint64_t>(epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        double loss_sum = 0;
        int64_t steps = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg_.batch)) {
            std::vector<Scene> prepared;
            std::vector<const Scene*> scene_ptrs;
            for (size_t j = pos; j < std::min(pos + static_cast<size_t>(cfg_.batch), order.size()); ++j) {
                const uint64_t aug_seed =
                    Rng::derive(cfg_.seed, 0xA0000000ULL + static_cast<uint64_t>(epoch) * 1000003ULL +
                                               order[j]);
                prepared.push_back(
                    prepare_scene(train_.scenes[order[j]], cfg_.model.crop, cfg_.augment, aug_seed));
            }
            for (const auto& s : prepared) scene_ptrs.push_back(&s);
            Batch<T> batch = make_batch<T>(scene_ptrs);

            model_->params().zero_grads();
            const uint64_t da_seed = Rng::derive(
                cfg_.seed, 0xDA000000ULL + static_cast<uint64_t>(epoch) * 100000ULL +
                               static_cast<uint64_t>(steps));
            auto result = model_->forward(batch.rgb, batch.dsm, /*training=*/true, da_seed);
            Tensor<T> sup = supervised_loss(result.logits, batch.labels);
            Tensor<T> fin = final_loss(sup, result.align_loss, cfg_.model.da_alpha);
            fin.backward();
            opt_.step(model_->params(), lr_scale);

            out.step_losses.push_back(static_cast<double>(fin.item()));
            loss_sum += static_cast<double>(fin.item());
            ++steps;
        }
        const double mean_loss = loss_sum / static_cast<double>(std::max<int64_t>(steps, 1));
        out.epoch_losses.push_back(mean_loss);

        if (log_files) {
            nlohmann::json j;
            j["epoch"] = epoch;
            j["split"] = "train";
            j["loss"] = mean_loss;
            j["lr_scale"] = static_cast<double>(lr_scale);
            j["seed"] = cfg_.seed;
            j["config_hash"] = chash;
            append_line(train_log_path, j.dump());
        }

        if (!val_.empty()) {
            auto [cm, summary] = evaluate(val_);
            out.final_val = summary;
            if (log_files) append_line(metrics_path, metrics_record(epoch, "val", summary, cfg_.seed, chash));
            if (summary.miou > best_val_miou_) {
                best_val_miou_ = summary.miou;
                if (log_files) {
                    out.best_ckpt = cfg_.out_dir + "/best.ckpt";
                    save_run_state(out.best_ckpt, epoch + 1);
                }
            }
        }
        if (log_files) {
            out.last_ckpt = cfg_.out_dir + "/last.ckpt";
            save_run_state(out.last_ckpt, epoch + 1);
        }
        out.epochs_run = epoch + 1;
    }
    out.best_val_miou = best_val_miou_;

    if (!test_.empty()) {
        auto [cm, summary] = evaluate(test_);
        out.final_test = summary;
        if (log_files)
            append_line(metrics_path, metrics_record(out.epochs_run, "test", summary, cfg_.seed, chash));
    }
    return out;
}

// ---- prediction rasters ------------------------------------------------------------

template <typename T>
Raster predict_labels(Model<T>& m, const Scene& scene) {
    NoGradGuard no_grad;
    std::vector<const Scene*> one{&scene};
    Batch<T> batch = make_batch<T>(one);
    auto result = m.forward(batch.rgb, batch.dsm, /*training=*/false);
    const auto& logits = result.logits;
    const int64_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    Raster out = Raster::u8(1, static_cast<int>(h), static_cast<int>(w));
    for (int64_t q = 0; q < h * w; ++q) {
        int best = 0;
        T best_v = logits.data()[static_cast<size_t>(q)];
        for (int64_t ic = 1; ic < k; ++ic)
            if (logits.data()[static_cast<size_t>(ic * h * w + q)] > best_v) {
                best_v = logits.data()[static_cast<size_t>(ic * h * w + q)];
                best = static_cast<int>(ic);
            }
        out.u8_data()[static_cast<size_t>(q)] = static_cast<uint8_t>(best);
    }
    return out;
}

void write_color_map(const std::string& path, const Raster& labels) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << "P6\n" << labels.width() << " " << labels.height() << "\n255\n";
    for (int y = 0; y < labels.height(); ++y)
        for (int x = 0; x < labels.width(); ++x) {
            const auto c = class_color(labels.at_u8(0, y, x));
            f.write(reinterpret_cast<const char*>(c.data()), 3);
        }
}

template class Trainer<float>;
template class Trainer<double>;
template Raster predict_labels(Model<float>&, const Scene&);
template Raster predict_labels(Model<double>&, const Scene&);

}  // namespace ammnet
