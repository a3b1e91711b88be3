#include "ammnet/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "ammnet/rng.hpp"

namespace ammnet {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": '" + v + "'");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (lr <= 0) throw ConfigError("lr must be > 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
}

std::string RunConfig::serialize() const {
    std::ostringstream os;  // keys in sorted order
    os << "augment=" << (augment ? "true" : "false") << '\n';
    os << "batch=" << batch << '\n';
    os << "crop=" << model.crop << '\n';
    os << "da_alpha=" << fmt_double(model.da_alpha) << '\n';
    os << "da_enabled=" << (model.da_enabled ? "true" : "false") << '\n';
    os << "da_latent_len=" << model.da_latent_len << '\n';
    os << "dsm_tier=" << model.dsm_tier << '\n';
    os << "epochs=" << epochs << '\n';
    os << "f64=" << (f64 ? "true" : "false") << '\n';
    os << "fusion=" << model.fusion << '\n';
    os << "lr=" << fmt_double(lr) << '\n';
    os << "num_classes=" << model.num_classes << '\n';
    os << "rgb_tier=" << model.rgb_tier << '\n';
    os << "seed=" << seed << '\n';
    os << "single_modal=" << (model.single_modal ? "true" : "false") << '\n';
    os << "weight_decay=" << fmt_double(weight_decay) << '\n';
    return os.str();
}

uint64_t RunConfig::config_hash() const {
    const std::string s = serialize();
    return fnv1a(s.data(), s.size());
}

void RunConfig::apply_kv(const std::string& key, const std::string& value) {
    if (key == "augment") augment = parse_bool(key, value);
    else if (key == "batch") batch = static_cast<int>(parse_int(key, value));
    else if (key == "crop") model.crop = static_cast<int>(parse_int(key, value));
    else if (key == "da_alpha") model.da_alpha = parse_double(key, value);
    else if (key == "da_enabled") model.da_enabled = parse_bool(key, value);
    else if (key == "da_latent_len") model.da_latent_len = static_cast<int>(parse_int(key, value));
    else if (key == "dsm_tier") model.dsm_tier = value;
    else if (key == "epochs") epochs = static_cast<int>(parse_int(key, value));
    else if (key == "f64") f64 = parse_bool(key, value);
    else if (key == "fusion") model.fusion = value;
    else if (key == "lr") lr = parse_double(key, value);
    else if (key == "num_classes") model.num_classes = static_cast<int>(parse_int(key, value));
    else if (key == "rgb_tier") model.rgb_tier = value;
    else if (key == "seed") seed = static_cast<uint64_t>(parse_int(key, value));
    else if (key == "single_modal") model.single_modal = parse_bool(key, value);
    else if (key == "weight_decay") weight_decay = parse_double(key, value);
    else if (key == "data_dir") data_dir = value;
    else if (key == "out_dir") out_dir = value;
    else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig config_from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" +
                              line + "'");
        cfg.apply_kv(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

void config_to_file(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config: " + path);
    f << cfg.serialize();
    if (!cfg.data_dir.empty()) f << "data_dir=" << cfg.data_dir << '\n';
    if (!cfg.out_dir.empty()) f << "out_dir=" << cfg.out_dir << '\n';
}

void apply_profile(RunConfig& cfg, const std::string& profile) {
    if (profile == "desk") {
        cfg.model.crop = 64;
        cfg.batch = 4;
        cfg.epochs = 30;
        cfg.lr = 2e-4;
    } else if (profile == "paper") {
        cfg.model.crop = 256;
        cfg.batch = 8;
        cfg.epochs = 100;
        cfg.lr = 2e-4;
    } else {
        throw ConfigError("unknown profile '" + profile + "' (expected desk|paper)");
    }
}

}  // namespace ammnet
