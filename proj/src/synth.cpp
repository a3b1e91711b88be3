#include "ammnet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ammnet/rng.hpp"

namespace fs = std::filesystem;

namespace ammnet {

const double kDsmNoiseSigma = 0.2;

std::array<double, 2> class_height_band(int cls) {
    switch (cls) {
        case kImpervious: return {-0.5, 0.5};
        case kBuilding: return {8.0, 25.0};
        case kLowVeg: return {0.0, 0.5};
        case kTree: return {3.0, 10.0};
        case kCar: return {1.0, 2.0};
        default: return {-1e9, 1e9};
    }
}

std::array<uint8_t, 3> class_color(int cls) {
    switch (cls) {
        case kImpervious: return {255, 255, 255};
        case kBuilding: return {0, 0, 255};
        case kLowVeg: return {0, 255, 255};
        case kTree: return {0, 255, 0};
        case kCar: return {255, 255, 0};
        default: return {255, 0, 0};
    }
}

const char* class_name(int cls) {
    switch (cls) {
        case kImpervious: return "impervious";
        case kBuilding: return "building";
        case kLowVeg: return "low_veg";
        case kTree: return "tree";
        case kCar: return "car";
        default: return "clutter";
    }
}

void GenSpec::validate() const {
    if (size < 32 || size % 32 != 0)
        throw ConfigError("gen spec: size must be a positive multiple of 32, got " +
                          std::to_string(size));
    const int max_b = max_building_px > 0 ? max_building_px : size / 3;
    if (max_b > size)
        throw DataError("gen spec: building extent " + std::to_string(max_b) +
                        " px does not fit a " + std::to_string(size) + " px scene");
    if (buildings_lo > buildings_hi || trees_lo > trees_hi || cars_lo > cars_hi)
        throw ConfigError("gen spec: empty count range");
    if (occlusion_rate < 0.0 || occlusion_rate > 1.0)
        throw ConfigError("gen spec: occlusion_rate must be in [0,1]");
}

namespace {

uint8_t clamp_u8(double v) { return static_cast<uint8_t>(std::clamp(v, 0.0, 255.0)); }

struct Painter {
    Scene& s;
    int size;
    void pixel(int y, int x, uint8_t cls, double r, double g, double b, double h) {
        if (y < 0 || y >= size || x < 0 || x >= size) return;
        s.labels.at_u8(0, y, x) = cls;
        s.rgb.at_u8(0, y, x) = clamp_u8(r);
        s.rgb.at_u8(1, y, x) = clamp_u8(g);
        s.rgb.at_u8(2, y, x) = clamp_u8(b);
        s.dsm.at_f32(0, y, x) = static_cast<float>(h);
    }
};

}  // namespace

Scene generate(const GenSpec& spec) {
    spec.validate();
    const int n = spec.size;
    Scene s{Raster::u8(3, n, n), Raster::f32(1, n, n), Raster::u8(1, n, n)};
    Painter paint{s, n};

    Rng layout(Rng::derive(spec.seed, 1));
    Rng texture(Rng::derive(spec.seed, 2));
    Rng noise(Rng::derive(spec.seed, 3));
    Rng occl(Rng::derive(spec.seed, 4));

    // impervious background, height ~ 0
    const double bg = texture.uniform(105, 135);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            paint.pixel(y, x, kImpervious, bg + texture.uniform(-8, 8), bg + texture.uniform(-8, 8),
                        bg + texture.uniform(-8, 8), 0.0);

    // trees and low vegetation share this green; texture amplitude and height
    // are the separating cues
    const double gj = texture.uniform(-8, 8);
    const double veg_r = 62 + gj, veg_g = 112 + gj, veg_b = 58 + gj;

    const int n_lowveg = static_cast<int>(layout.uniform_int(2, 5));
    for (int i = 0; i < n_lowveg; ++i) {
        const int cy = static_cast<int>(layout.uniform_int(0, n - 1));
        const int cx = static_cast<int>(layout.uniform_int(0, n - 1));
        const double ry = layout.uniform(n / 10.0, n / 5.0);
        const double rx = layout.uniform(n / 10.0, n / 5.0);
        const double h = layout.uniform(0.05, 0.45);
        for (int y = std::max(0, cy - static_cast<int>(ry)); y <= std::min(n - 1, cy + static_cast<int>(ry)); ++y)
            for (int x = std::max(0, cx - static_cast<int>(rx)); x <= std::min(n - 1, cx + static_cast<int>(rx)); ++x) {
                const double dy = (y - cy) / ry, dx = (x - cx) / rx;
                if (dy * dy + dx * dx > 1.0) continue;
                const double t = texture.uniform(-5, 5);
                paint.pixel(y, x, kLowVeg, veg_r + t, veg_g + t, veg_b + t, h);
            }
    }

    const int n_trees = static_cast<int>(layout.uniform_int(spec.trees_lo, spec.trees_hi));
    for (int i = 0; i < n_trees; ++i) {
        const int cy = static_cast<int>(layout.uniform_int(0, n - 1));
        const int cx = static_cast<int>(layout.uniform_int(0, n - 1));
        const double hb = layout.uniform(4.0, 9.0);
        const int discs = static_cast<int>(layout.uniform_int(3, 6));
        for (int d = 0; d < discs; ++d) {
            const double r = layout.uniform(n / 20.0, n / 10.0);
            const int oy = cy + static_cast<int>(layout.uniform(-r, r));
            const int ox = cx + static_cast<int>(layout.uniform(-r, r));
            for (int y = std::max(0, oy - static_cast<int>(r)); y <= std::min(n - 1, oy + static_cast<int>(r)); ++y)
                for (int x = std::max(0, ox - static_cast<int>(r)); x <= std::min(n - 1, ox + static_cast<int>(r)); ++x) {
                    const double dy = y - oy, dx = x - ox;
                    if (dy * dy + dx * dx > r * r) continue;
                    const double t = texture.uniform(-20, 20);
                    const double h = std::clamp(hb + texture.uniform(-1.0, 1.0), 3.2, 9.8);
                    paint.pixel(y, x, kTree, veg_r + t, veg_g + t, veg_b + t, h);
                }
        }
    }

    const int max_b = spec.max_building_px > 0 ? spec.max_building_px : n / 3;
    const int min_b = std::max(4, n / 8);
    const int n_buildings = static_cast<int>(layout.uniform_int(spec.buildings_lo, spec.buildings_hi));
    for (int i = 0; i < n_buildings; ++i) {
        const int bw = static_cast<int>(layout.uniform_int(min_b, max_b));
        const int bh = static_cast<int>(layout.uniform_int(min_b, max_b));
        const int y0 = static_cast<int>(layout.uniform_int(0, std::max(0, n - bh)));
        const int x0 = static_cast<int>(layout.uniform_int(0, std::max(0, n - bw)));
        const double h = layout.uniform(8.5, 24.5);  // flat rooftop
        const bool gray = layout.coin();
        const double br = gray ? 122 : 152, bgc = gray ? 122 : 82, bb = gray ? 126 : 70;
        for (int y = y0; y < std::min(n, y0 + bh); ++y)
            for (int x = x0; x < std::min(n, x0 + bw); ++x) {
                const double t = texture.uniform(-6, 6);
                paint.pixel(y, x, kBuilding, br + t, bgc + t, bb + t, h);
            }
    }

    const int n_cars = static_cast<int>(layout.uniform_int(spec.cars_lo, spec.cars_hi));
    for (int i = 0; i < n_cars; ++i) {
        int cw = static_cast<int>(layout.uniform_int(3, 5));
        int ch = static_cast<int>(layout.uniform_int(6, 10));
        if (layout.coin()) std::swap(cw, ch);
        const int y0 = static_cast<int>(layout.uniform_int(0, std::max(0, n - ch)));
        const int x0 = static_cast<int>(layout.uniform_int(0, std::max(0, n - cw)));
        const double h = layout.uniform(1.1, 1.9);
        const int palette = static_cast<int>(layout.uniform_int(0, 2));
        const double cr = palette == 0 ? 235 : (palette == 1 ? 205 : 45);
        const double cg = palette == 0 ? 235 : (palette == 1 ? 45 : 65);
        const double cb = palette == 0 ? 235 : (palette == 1 ? 45 : 205);
        for (int y = y0; y < std::min(n, y0 + ch); ++y)
            for (int x = x0; x < std::min(n, x0 + cw); ++x) {
                const double t = texture.uniform(-5, 5);
                paint.pixel(y, x, kCar, cr + t, cg + t, cb + t, h);
            }
    }

    // DSM sensor noise
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            s.dsm.at_f32(0, y, x) += static_cast<float>(noise.normal() * kDsmNoiseSigma);

    // RGB-only occlusion: fog/darkening patches, DSM and labels untouched
    if (spec.occlusion_rate > 0.0) {
        std::vector<uint8_t> mask(static_cast<size_t>(n) * n, 0);
        int64_t covered = 0;
        const int64_t want = static_cast<int64_t>(spec.occlusion_rate * n * n);
        for (int attempt = 0; attempt < 1000 && covered < want; ++attempt) {
            const int cy = static_cast<int>(occl.uniform_int(0, n - 1));
            const int cx = static_cast<int>(occl.uniform_int(0, n - 1));
            const double ry = occl.uniform(n / 6.0, n / 3.0);
            const double rx = occl.uniform(n / 6.0, n / 3.0);
            for (int y = std::max(0, cy - static_cast<int>(ry)); y <= std::min(n - 1, cy + static_cast<int>(ry)); ++y)
                for (int x = std::max(0, cx - static_cast<int>(rx)); x <= std::min(n - 1, cx + static_cast<int>(rx)); ++x) {
                    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
                    if (dy * dy + dx * dx > 1.0) continue;
                    if (mask[static_cast<size_t>(y) * n + x]) continue;
                    mask[static_cast<size_t>(y) * n + x] = 1;
                    ++covered;
                    for (int c = 0; c < 3; ++c) {
                        const double v = s.rgb.at_u8(c, y, x);
                        s.rgb.at_u8(c, y, x) = clamp_u8(v * 0.30 + 30.0 + occl.uniform(-5, 5));
                    }
                }
        }
    }
    return s;
}

// ---- geometric transforms -----------------------------------------------------

namespace {

template <typename MapFn>
Scene remap(const Scene& s, int out_h, int out_w, MapFn map) {
    Scene r{Raster::u8(3, out_h, out_w), Raster::f32(1, out_h, out_w), Raster::u8(1, out_h, out_w)};
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            auto [sy, sx] = map(y, x);
            for (int c = 0; c < 3; ++c) r.rgb.at_u8(c, y, x) = s.rgb.at_u8(c, sy, sx);
            r.dsm.at_f32(0, y, x) = s.dsm.at_f32(0, sy, sx);
            r.labels.at_u8(0, y, x) = s.labels.at_u8(0, sy, sx);
        }
    return r;
}

}  // namespace

Scene flip_horizontal(const Scene& s) {
    const int h = s.rgb.height(), w = s.rgb.width();
    return remap(s, h, w, [w](int y, int x) { return std::pair{y, w - 1 - x}; });
}

Scene flip_vertical(const Scene& s) {
    const int h = s.rgb.height(), w = s.rgb.width();
    return remap(s, h, w, [h](int y, int x) { return std::pair{h - 1 - y, x}; });
}

Scene rotate90(const Scene& s, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    const int h = s.rgb.height(), w = s.rgb.width();
    switch (k) {
        case 1:  // 90 ccw: out(y,x) = in(x, W-1-y) with out HxW swapped
            return remap(s, w, h, [h, w](int y, int x) { return std::pair{x, w - 1 - y}; });
        case 2:
            return remap(s, h, w, [h, w](int y, int x) { return std::pair{h - 1 - y, w - 1 - x}; });
        case 3:
            return remap(s, w, h, [h](int y, int x) { return std::pair{h - 1 - x, y}; });
        default:
            return remap(s, h, w, [](int y, int x) { return std::pair{y, x}; });
    }
}

Scene resize_nearest(const Scene& s, int new_h, int new_w) {
    const int h = s.rgb.height(), w = s.rgb.width();
    return remap(s, new_h, new_w, [=](int y, int x) {
        int sy = std::min(h - 1, static_cast<int>(static_cast<int64_t>(y) * h / new_h));
        int sx = std::min(w - 1, static_cast<int>(static_cast<int64_t>(x) * w / new_w));
        return std::pair{sy, sx};
    });
}

Scene crop(const Scene& s, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > s.rgb.height() || x0 + w > s.rgb.width())
        throw DimensionError("crop window out of bounds");
    return remap(s, h, w, [=](int y, int x) { return std::pair{y0 + y, x0 + x}; });
}

Scene augment(const Scene& s, uint64_t seed) {
    Rng rng(seed);
    const int size_h = s.rgb.height(), size_w = s.rgb.width();
    Scene out = s;
    // random upscale then crop back to the original extents
    const double scale = 1.0 + rng.uniform() * 0.3;
    if (scale > 1.001) {
        const int nh = std::max(size_h + 1, static_cast<int>(std::lround(size_h * scale)));
        const int nw = std::max(size_w + 1, static_cast<int>(std::lround(size_w * scale)));
        out = resize_nearest(out, nh, nw);
        const int y0 = static_cast<int>(rng.uniform_int(0, nh - size_h));
        const int x0 = static_cast<int>(rng.uniform_int(0, nw - size_w));
        out = crop(out, y0, x0, size_h, size_w);
    }
    if (rng.coin()) out = flip_horizontal(out);
    if (rng.coin()) out = flip_vertical(out);
    const int k = static_cast<int>(rng.uniform_int(0, 3));
    if (k) out = rotate90(out, k);
    return out;
}

// ---- dataset I/O ----------------------------------------------------------------

void write_scene(const std::string& dir, const std::string& id, const Scene& s) {
    fs::create_directories(dir);
    write_amrd(dir + "/" + id + ".rgb.amrd", s.rgb);
    write_amrd(dir + "/" + id + ".dsm.amrd", s.dsm);
    write_amrd(dir + "/" + id + ".lbl.amrd", s.labels);
}

Scene read_scene(const std::string& dir, const std::string& id) {
    Scene s;
    s.rgb = read_amrd(dir + "/" + id + ".rgb.amrd");
    s.dsm = read_amrd(dir + "/" + id + ".dsm.amrd");
    s.labels = read_amrd(dir + "/" + id + ".lbl.amrd");
    if (s.rgb.height() != s.dsm.height() || s.rgb.height() != s.labels.height() ||
        s.rgb.width() != s.dsm.width() || s.rgb.width() != s.labels.width())
        throw DataError("scene " + id + ": raster extents disagree");
    return s;
}

void write_manifest(const std::string& dir, const std::vector<std::string>& ids) {
    fs::create_directories(dir);
    std::ofstream f(dir + "/manifest.txt", std::ios::trunc);
    if (!f) throw IoError("cannot write manifest in " + dir);
    for (const auto& id : ids) f << id << "\n";
}

std::vector<std::string> read_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.txt");
    if (!f) throw IoError("missing manifest: " + dir + "/manifest.txt");
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) ids.push_back(line);
    return ids;
}

DatasetStats generate_dataset(const std::string& root, int count, GenSpec base, uint64_t seed) {
    if (count < 3) throw ConfigError("dataset needs at least 3 scenes for train/val/test splits");
    const int n_test = std::max(1, count * 20 / 100);
    const int n_val = std::max(1, count * 10 / 100);
    const int n_train = count - n_test - n_val;
    if (n_train < 1) throw ConfigError("dataset too small for a train split");

    DatasetStats stats;
    struct Split {
        const char* name;
        int count;
    };
    const Split splits[3] = {{"train", n_train}, {"val", n_val}, {"test", n_test}};
    int global = 0;
    for (const auto& sp : splits) {
        std::vector<std::string> ids;
        const std::string dir = root + "/" + sp.name;
        for (int i = 0; i < sp.count; ++i, ++global) {
            GenSpec g = base;
            g.seed = Rng::derive(seed, static_cast<uint64_t>(global) + 100);
            Scene scene = generate(g);
            std::ostringstream id;
            id << "scene_" << global;
            write_scene(dir, id.str(), scene);
            ids.push_back(id.str());
            for (int64_t p = 0; p < scene.labels.pixels(); ++p) {
                ++stats.class_pixels[scene.labels.u8_data()[static_cast<size_t>(p)]];
                ++stats.total_pixels;
            }
        }
        write_manifest(dir, ids);
    }
    return stats;
}

}  // namespace ammnet
