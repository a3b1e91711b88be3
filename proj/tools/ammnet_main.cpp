// Command-line front door: dataset generation, training, evaluation, the
// ablation recipes, and the cost profiler.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "ammnet/cost.hpp"
#include "ammnet/rng.hpp"
#include "ammnet/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ammnet;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CfgFlags {
    std::string config_file, profile;
    std::string rgb_tier, dsm_tier, fusion;
    int epochs = -1, batch = -1, crop = -1, num_classes = -1, latent = -1;
    double lr = -1, wd = -1, alpha = -1;
    int64_t seed = -1;
    bool da_on = false, da_off = false;
    bool single_modal = false;
    bool no_augment = false;
    bool f64 = false;

    void add_options(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value config file (flags override it)");
        cmd->add_option("--profile", profile, "named defaults: desk | paper");
        cmd->add_option("--rgb-tier", rgb_tier, "tiny|small|base");
        cmd->add_option("--dsm-tier", dsm_tier, "tiny|small|base");
        cmd->add_option("--fusion", fusion, "apf|concat");
        cmd->add_flag("--da", da_on, "enable distribution alignment");
        cmd->add_flag("--no-da", da_off, "disable distribution alignment");
        cmd->add_option("--da-alpha", alpha, "alignment loss weight");
        cmd->add_option("--da-latent-len", latent, "latent vector length");
        cmd->add_flag("--single-modal", single_modal, "RGB-only baseline path");
        cmd->add_option("--epochs", epochs);
        cmd->add_option("--batch", batch);
        cmd->add_option("--crop", crop);
        cmd->add_option("--num-classes", num_classes);
        cmd->add_option("--lr", lr);
        cmd->add_option("--weight-decay", wd);
        cmd->add_option("--seed", seed);
        cmd->add_flag("--no-augment", no_augment, "disable training augmentation");
        cmd->add_flag("--f64", f64, "double-precision mode");
    }

    // precedence: defaults < profile < config file < flags
    RunConfig build() const {
        RunConfig cfg;
        if (!profile.empty()) apply_profile(cfg, profile);
        if (!config_file.empty()) {
            std::ifstream f(config_file);
            if (!f) throw IoError("cannot open config: " + config_file);
            std::string line;
            while (std::getline(f, line)) {
                if (line.empty() || line[0] == '#') continue;
                const size_t eq = line.find('=');
                if (eq == std::string::npos)
                    throw ConfigError("config: line is not key=value: '" + line + "'");
                cfg.apply_kv(line.substr(0, eq), line.substr(eq + 1));
            }
        }
        if (!rgb_tier.empty()) cfg.model.rgb_tier = rgb_tier;
        if (!dsm_tier.empty()) cfg.model.dsm_tier = dsm_tier;
        if (!fusion.empty()) cfg.model.fusion = fusion;
        if (da_on && da_off) throw ConfigError("--da conflicts with --no-da");
        if (da_on) cfg.model.da_enabled = true;
        if (da_off) {
            cfg.model.da_enabled = false;
            cfg.model.da_alpha = 0.0;
        }
        if (alpha >= 0) cfg.model.da_alpha = alpha;
        if (latent > 0) cfg.model.da_latent_len = latent;
        if (single_modal) {
            cfg.model.single_modal = true;
            cfg.model.da_enabled = false;
            cfg.model.da_alpha = 0.0;
        }
        if (epochs > 0) cfg.epochs = epochs;
        if (batch > 0) cfg.batch = batch;
        if (crop > 0) cfg.model.crop = crop;
        if (num_classes > 0) cfg.model.num_classes = num_classes;
        if (lr > 0) cfg.lr = lr;
        if (wd >= 0) cfg.weight_decay = wd;
        if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
        if (no_augment) cfg.augment = false;
        if (f64) cfg.f64 = true;
        cfg.validate();
        return cfg;
    }
};

int cmd_gen_data(const std::string& out, int count, int size, uint64_t seed, double occlusion) {
    GenSpec spec;
    spec.size = size;
    spec.occlusion_rate = occlusion;
    DatasetStats stats = generate_dataset(out, count, spec, seed);
    std::printf("wrote %d scenes to %s (train/val/test)\n", count, out.c_str());
    std::printf("class histogram over %llu pixels:\n",
                static_cast<unsigned long long>(stats.total_pixels));
    for (int c = 0; c < kNumClasses; ++c)
        std::printf("  %-12s %8.4f%%\n", class_name(c),
                    100.0 * static_cast<double>(stats.class_pixels[static_cast<size_t>(c)]) /
                        static_cast<double>(std::max<uint64_t>(stats.total_pixels, 1)));
    return 0;
}

template <typename T>
int run_train(const RunConfig& cfg, const std::string& resume) {
    Dataset train = Dataset::load(cfg.data_dir + "/train");
    Dataset val, test;
    if (fs::exists(cfg.data_dir + "/val/manifest.txt")) val = Dataset::load(cfg.data_dir + "/val");
    if (fs::exists(cfg.data_dir + "/test/manifest.txt")) test = Dataset::load(cfg.data_dir + "/test");
    Trainer<T> trainer(cfg, std::move(train), std::move(val), std::move(test));
    if (!resume.empty()) trainer.set_resume(resume);
    TrainOutcome<T> out = trainer.run();
    for (size_t e = 0; e < out.epoch_losses.size(); ++e)
        std::printf("epoch %zu  loss %.6f\n", e, out.epoch_losses[e]);
    if (out.final_test)
        std::printf("test  mOA %.4f  mF1 %.4f  mIoU %.4f\n", out.final_test->moa,
                    out.final_test->mf1, out.final_test->miou);
    std::printf("checkpoints: %s\n", out.last_ckpt.c_str());
    return 0;
}

template <typename T>
int run_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& split,
             bool save_maps) {
    Dataset data = Dataset::load(cfg.data_dir + "/" + split);
    Trainer<T> trainer(cfg, data, Dataset{}, Dataset{});
    const uint64_t stored = load_checkpoint(ckpt, trainer.model());
    if (stored != cfg.config_hash())
        throw VersionError("eval: checkpoint config hash " + std::to_string(stored) +
                           " does not match run config " + std::to_string(cfg.config_hash()));
    auto [cm, summary] = trainer.evaluate(data);
    const std::string record = metrics_record(0, split, summary, cfg.seed, cfg.config_hash());
    std::printf("%s\n", record.c_str());
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        std::ofstream f(cfg.out_dir + "/eval_" + split + ".jsonl", std::ios::app);
        f << record << "\n";
        if (save_maps) {
            std::ofstream legend(cfg.out_dir + "/legend.txt", std::ios::trunc);
            for (int c = 0; c < kNumClasses; ++c) {
                const auto col = class_color(c);
                legend << c << " " << class_name(c) << " " << int(col[0]) << " " << int(col[1])
                       << " " << int(col[2]) << "\n";
            }
            for (size_t i = 0; i < data.scenes.size(); ++i) {
                Raster pred = predict_labels(trainer.model(), data.scenes[i]);
                const std::string base = cfg.out_dir + "/pred_" + split + "_" + std::to_string(i);
                write_amrd(base + ".lbl.amrd", pred);
                write_color_map(base + ".ppm", pred);
            }
        }
    }
    return 0;
}

// ---- ablation recipes ------------------------------------------------------------

struct AblationRow {
    std::string name;
    RunConfig cfg;
};

std::vector<AblationRow> ablation_grid(const std::string& study, const RunConfig& base) {
    std::vector<AblationRow> rows;
    if (study == "components") {
        // toggle order mirrors the component table: apf, da, ade
        const bool flags[8][3] = {{false, false, false}, {true, false, false}, {false, true, false},
                                  {false, false, true},  {false, true, true},  {true, false, true},
                                  {true, true, false},   {true, true, true}};
        for (const auto& f : flags) {
            RunConfig cfg = base;
            const bool apf = f[0], da = f[1], ade = f[2];
            cfg.model.fusion = apf ? "apf" : "concat";
            cfg.model.da_enabled = da;
            cfg.model.da_alpha = da ? base.model.da_alpha : 0.0;
            cfg.model.rgb_tier = "base";
            cfg.model.dsm_tier = ade ? "small" : "base";  // symmetric pair when off
            std::string name;
            name += apf ? "apf" : "---";
            name += da ? "+da" : "+--";
            name += ade ? "+ade" : "+---";
            rows.push_back({name, cfg});
        }
    } else if (study == "tiers") {
        for (const char* rgb : {"tiny", "small", "base"})
            for (const char* dsm : {"tiny", "small", "base"}) {
                RunConfig cfg = base;
                cfg.model.rgb_tier = rgb;
                cfg.model.dsm_tier = dsm;
                rows.push_back({std::string(rgb) + "/" + dsm, cfg});
            }
    } else if (study == "alpha") {
        for (double a : {1e-3, 75e-5, 5e-4, 25e-5, 1e-4}) {
            RunConfig cfg = base;
            cfg.model.da_enabled = true;
            cfg.model.da_alpha = a;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "alpha=%g", a);
            rows.push_back({buf, cfg});
        }
    } else {
        throw ConfigError("unknown study '" + study + "' (expected components|tiers|alpha)");
    }
    return rows;
}

template <typename T>
int run_ablate(const RunConfig& base, const std::string& study,
               const std::vector<uint64_t>& seeds, bool dry_run, int jobs) {
    auto rows = ablation_grid(study, base);
    if (dry_run) {
        std::printf("%s study: %zu rows\n", study.c_str(), rows.size());
        for (const auto& row : rows) std::printf("  %s\n", row.name.c_str());
        return 0;
    }
    Dataset train = Dataset::load(base.data_dir + "/train");
    Dataset val = fs::exists(base.data_dir + "/val/manifest.txt")
                      ? Dataset::load(base.data_dir + "/val")
                      : Dataset{};
    Dataset test = Dataset::load(base.data_dir + "/test");

    struct AblationResult {
        std::string name;
        std::vector<MetricSummary> per_seed;
        double mean_moa = 0, mean_mf1 = 0, mean_miou = 0;
    };
    struct Job {
        size_t row;
        uint64_t seed;
    };
    std::vector<Job> queue;
    for (size_t r = 0; r < rows.size(); ++r)
        for (uint64_t s : seeds) queue.push_back({r, s});

    std::vector<AblationResult> results(rows.size());
    for (size_t r = 0; r < rows.size(); ++r) {
        results[r].name = rows[r].name;
        results[r].per_seed.resize(seeds.size());
    }

    std::mutex queue_mu;
    size_t next = 0;
    auto worker = [&]() {
        for (;;) {
            size_t idx;
            {
                std::lock_guard<std::mutex> lock(queue_mu);
                if (next >= queue.size()) return;
                idx = next++;
            }
            const Job job = queue[idx];
            RunConfig cfg = rows[job.row].cfg;
            cfg.seed = job.seed;
            cfg.out_dir = base.out_dir.empty()
                              ? ""
                              : base.out_dir + "/" + study + "/" + rows[job.row].name + "/seed" +
                                    std::to_string(job.seed);
            Trainer<T> trainer(cfg, train, val, test);
            TrainOutcome<T> out = trainer.run();
            const size_t seed_idx =
                static_cast<size_t>(std::find(seeds.begin(), seeds.end(), job.seed) - seeds.begin());
            results[job.row].per_seed[seed_idx] = *out.final_test;
            {
                std::lock_guard<std::mutex> lock(queue_mu);
                std::printf("[ablate] %-14s seed %llu: mIoU %.4f\n", rows[job.row].name.c_str(),
                            static_cast<unsigned long long>(job.seed), out.final_test->miou);
                std::fflush(stdout);
            }
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (auto& r : results) {
        for (const auto& m : r.per_seed) {
            r.mean_moa += m.moa / static_cast<double>(seeds.size());
            r.mean_mf1 += m.mf1 / static_cast<double>(seeds.size());
            r.mean_miou += m.miou / static_cast<double>(seeds.size());
        }
    }
    std::vector<size_t> rank(results.size());
    for (size_t i = 0; i < rank.size(); ++i) rank[i] = i;
    std::sort(rank.begin(), rank.end(),
              [&](size_t a, size_t b) { return results[a].mean_miou > results[b].mean_miou; });

    std::printf("\n%s study, mean over %zu seeds (", study.c_str(), seeds.size());
    for (size_t i = 0; i < seeds.size(); ++i)
        std::printf("%s%llu", i ? "," : "", static_cast<unsigned long long>(seeds[i]));
    std::printf("):\n%-16s %8s %8s %8s\n", "config", "mOA", "mF1", "mIoU");
    for (size_t i : rank)
        std::printf("%-16s %8.4f %8.4f %8.4f\n", results[i].name.c_str(), results[i].mean_moa,
                    results[i].mean_mf1, results[i].mean_miou);

    if (!base.out_dir.empty()) {
        fs::create_directories(base.out_dir + "/" + study);
        std::ofstream f(base.out_dir + "/" + study + "/results.jsonl", std::ios::trunc);
        for (size_t i : rank) {
            nlohmann::json j;
            j["config"] = results[i].name;
            j["moa"] = results[i].mean_moa;
            j["mf1"] = results[i].mean_mf1;
            j["miou"] = results[i].mean_miou;
            j["seeds"] = seeds;
            nlohmann::json per = nlohmann::json::array();
            for (const auto& m : results[i].per_seed) per.push_back(m.miou);
            j["per_seed_miou"] = per;
            f << j.dump() << "\n";
        }
    }
    return 0;
}

int run_profile(const RunConfig& cfg, int height, int width, bool per_layer,
                const std::string& compare) {
    const int h = height > 0 ? height : cfg.model.crop;
    const int w = width > 0 ? width : cfg.model.crop;
    CostReport a = cost_model(cfg.model, h, w);
    std::printf("config A (%s/%s, fusion=%s) at %dx%d:\n", cfg.model.rgb_tier.c_str(),
                cfg.model.dsm_tier.c_str(), cfg.model.fusion.c_str(), h, w);
    std::printf("%s", cost_table(a, per_layer).c_str());
    if (!compare.empty()) {
        RunConfig other = cfg;
        std::string rest = compare;
        while (!rest.empty()) {
            const size_t comma = rest.find(',');
            const std::string kv = rest.substr(0, comma);
            const size_t eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--compare expects k=v[,k=v...]");
            other.apply_kv(kv.substr(0, eq), kv.substr(eq + 1));
            rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
        }
        other.validate();
        CostReport b = cost_model(other.model, h, w);
        std::printf("config B (%s/%s, fusion=%s) at %dx%d:\n", other.model.rgb_tier.c_str(),
                    other.model.dsm_tier.c_str(), other.model.fusion.c_str(), h, w);
        std::printf("%s", cost_table(b, per_layer).c_str());
        std::printf("delta (B - A): params %+lld  flops %+lld\n",
                    static_cast<long long>(b.total_params()) - static_cast<long long>(a.total_params()),
                    static_cast<long long>(b.total_flops()) - static_cast<long long>(a.total_flops()));
    }
    return 0;
}

std::vector<uint64_t> parse_seeds(const std::string& s) {
    std::vector<uint64_t> out;
    std::string rest = s;
    while (!rest.empty()) {
        const size_t comma = rest.find(',');
        out.push_back(std::stoull(rest.substr(0, comma)));
        rest = comma == std::string::npos ? "" : rest.substr(comma + 1);
    }
    if (out.empty()) throw ConfigError("--seeds: empty list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"asymmetric multi-modal segmentation lab"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic RGB-DSM-label dataset");
    std::string gen_out = "data";
    int gen_count = 200, gen_size = 64;
    int64_t gen_seed = 1;
    double gen_occlusion = 0.0;
    gen->add_option("--out", gen_out, "output dataset root")->required();
    gen->add_option("--count", gen_count, "total scenes across splits");
    gen->add_option("--size", gen_size, "scene extent (multiple of 32)");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--occlusion", gen_occlusion, "RGB-only occlusion coverage in [0,1]");

    // train
    auto* train = app.add_subcommand("train", "train a model");
    CfgFlags train_flags;
    std::string train_data, train_out, train_resume;
    train->add_option("--data", train_data, "dataset root")->required();
    train->add_option("--out", train_out, "run output directory")->required();
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train_flags.add_options(train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    CfgFlags eval_flags;
    std::string eval_data, eval_out, eval_ckpt, eval_split = "test";
    bool eval_maps = false;
    eval->add_option("--ckpt", eval_ckpt)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--split", eval_split, "train|val|test");
    eval->add_option("--out", eval_out, "directory for records and maps");
    eval->add_flag("--save-maps", eval_maps, "write predicted label rasters and color maps");
    eval_flags.add_options(eval);

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run an ablation study grid");
    CfgFlags ablate_flags;
    std::string ablate_data, ablate_out, ablate_study, ablate_seeds = "1,2,3";
    bool ablate_dry = false;
    int ablate_jobs = 1;
    ablate->add_option("--study", ablate_study, "components|tiers|alpha")->required();
    ablate->add_option("--data", ablate_data)->required();
    ablate->add_option("--out", ablate_out);
    ablate->add_option("--seeds", ablate_seeds, "comma-separated seed list");
    ablate->add_flag("--dry-run", ablate_dry, "print the grid without training");
    ablate->add_option("--jobs", ablate_jobs, "parallel runs (disjoint seeds/out dirs)");
    ablate_flags.add_options(ablate);

    // profile
    auto* profile = app.add_subcommand("profile", "analytic FLOPs/params/memory report");
    CfgFlags profile_flags;
    int prof_h = 0, prof_w = 0;
    bool prof_layers = false;
    std::string prof_compare;
    profile->add_option("--height", prof_h);
    profile->add_option("--width", prof_w);
    profile->add_flag("--per-layer", prof_layers, "print per-layer rows");
    profile->add_option("--compare", prof_compare, "second config as k=v[,k=v...] overrides");
    profile_flags.add_options(profile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_count, gen_size, static_cast<uint64_t>(gen_seed),
                                gen_occlusion);
        if (train->parsed()) {
            RunConfig cfg = train_flags.build();
            cfg.data_dir = train_data;
            cfg.out_dir = train_out;
            return cfg.f64 ? run_train<double>(cfg, train_resume)
                           : run_train<float>(cfg, train_resume);
        }
        if (eval->parsed()) {
            CfgFlags flags = eval_flags;
            if (flags.config_file.empty()) {
                const std::string sidecar = fs::path(eval_ckpt).parent_path() / "run_config.txt";
                if (fs::exists(sidecar)) flags.config_file = sidecar;
            }
            RunConfig cfg = flags.build();
            cfg.data_dir = eval_data;
            cfg.out_dir = eval_out;
            return cfg.f64 ? run_eval<double>(cfg, eval_ckpt, eval_split, eval_maps)
                           : run_eval<float>(cfg, eval_ckpt, eval_split, eval_maps);
        }
        if (ablate->parsed()) {
            RunConfig cfg = ablate_flags.build();
            cfg.data_dir = ablate_data;
            cfg.out_dir = ablate_out;
            const auto seeds = parse_seeds(ablate_seeds);
            return cfg.f64 ? run_ablate<double>(cfg, ablate_study, seeds, ablate_dry, ablate_jobs)
                           : run_ablate<float>(cfg, ablate_study, seeds, ablate_dry, ablate_jobs);
        }
        if (profile->parsed()) {
            RunConfig cfg = profile_flags.build();
            return run_profile(cfg, prof_h, prof_w, prof_layers, prof_compare);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return kExitData;
    } catch (const VersionError& e) {
        std::fprintf(stderr, "version error: %s\n", e.what());
        return kExitData;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitData;
    } catch (const Error& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    }
    return 0;
}
