#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ammnet/raster.hpp"

namespace ammnet {

// Class ids used across the whole repo.
enum SceneClass : uint8_t {
    kImpervious = 0,
    kBuilding = 1,
    kLowVeg = 2,
    kTree = 3,
    kCar = 4,
    kClutter = 5,  // reserved; the generator never emits it, eval treats it as ignore
};
constexpr int kNumClasses = 6;
constexpr int32_t kIgnoreLabel = 255;

// Pre-noise height band per class, meters. The generator keeps every labeled
// pixel inside its band; DSM noise (sigma 0.2) is added on top.
std::array<double, 2> class_height_band(int cls);
extern const double kDsmNoiseSigma;

// Fixed label -> color table for prediction map emission.
std::array<uint8_t, 3> class_color(int cls);
const char* class_name(int cls);

struct Scene {
    Raster rgb;     // u8 x3
    Raster dsm;     // f32 x1
    Raster labels;  // u8 x1
};

struct GenSpec {
    int size = 64;
    int buildings_lo = 2, buildings_hi = 4;
    int trees_lo = 3, trees_hi = 7;
    int cars_lo = 2, cars_hi = 5;
    double occlusion_rate = 0.0;
    uint64_t seed = 0;
    int max_building_px = 0;  // 0 -> size / 3

    void validate() const;
};

// Procedural scene. Height disambiguates what RGB cannot: trees and low
// vegetation share green statistics, gray buildings match the impervious
// background. Occlusion patches darken RGB only; DSM and labels are produced
// from streams independent of the occlusion stream, so they are bit-identical
// across occlusion rates at a fixed seed.
Scene generate(const GenSpec& spec);

// Geometric transform helpers (nearest-neighbor, all three rasters together).
Scene flip_horizontal(const Scene& s);
Scene flip_vertical(const Scene& s);
Scene rotate90(const Scene& s, int quarter_turns);
Scene resize_nearest(const Scene& s, int new_h, int new_w);
Scene crop(const Scene& s, int y0, int x0, int h, int w);

// Random resize (upscale), crop back to size, flips, quarter rotations.
Scene augment(const Scene& s, uint64_t seed);

// ---- dataset directory layout ---------------------------------------------
// {split}/{id}.rgb.amrd  {id}.dsm.amrd  {id}.lbl.amrd  + manifest.txt
void write_scene(const std::string& dir, const std::string& id, const Scene& s);
Scene read_scene(const std::string& dir, const std::string& id);
void write_manifest(const std::string& dir, const std::vector<std::string>& ids);
std::vector<std::string> read_manifest(const std::string& dir);

struct DatasetStats {
    std::array<uint64_t, kNumClasses> class_pixels{};
    uint64_t total_pixels = 0;
};

// Generates count scenes split train/val/test (70/10/20) under root.
DatasetStats generate_dataset(const std::string& root, int count, GenSpec base, uint64_t seed);

}  // namespace ammnet
