#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ammnet/error.hpp"

namespace ammnet {

enum class RasterDType : uint8_t { U8 = 0, F32 = 1 };

// Typed 2-D image plane. Payload is row-major, channel-first.
class Raster {
public:
    Raster() = default;
    static Raster u8(int channels, int height, int width);
    static Raster f32(int channels, int height, int width);

    RasterDType dtype() const { return dtype_; }
    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    int64_t pixels() const { return static_cast<int64_t>(height_) * width_; }

    uint8_t& at_u8(int c, int y, int x) { return u8_[idx(c, y, x)]; }
    uint8_t at_u8(int c, int y, int x) const { return u8_[idx(c, y, x)]; }
    float& at_f32(int c, int y, int x) { return f32_[idx(c, y, x)]; }
    float at_f32(int c, int y, int x) const { return f32_[idx(c, y, x)]; }

    std::vector<uint8_t>& u8_data() { return u8_; }
    const std::vector<uint8_t>& u8_data() const { return u8_; }
    std::vector<float>& f32_data() { return f32_; }
    const std::vector<float>& f32_data() const { return f32_; }

    bool operator==(const Raster& o) const {
        return dtype_ == o.dtype_ && channels_ == o.channels_ && height_ == o.height_ &&
               width_ == o.width_ && u8_ == o.u8_ && f32_ == o.f32_;
    }

private:
    size_t idx(int c, int y, int x) const {
        return (static_cast<size_t>(c) * height_ + y) * width_ + x;
    }
    RasterDType dtype_ = RasterDType::U8;
    int channels_ = 0, height_ = 0, width_ = 0;
    std::vector<uint8_t> u8_;
    std::vector<float> f32_;
};

// Container layout (little-endian), 15-byte header then payload:
//   magic "AMRD" | version u8 (=1) | dtype u8 {0:u8, 1:f32} | channels u8 |
//   height u32 | width u32 | payload row-major channel-first
// Round trips are bit-exact. Malformed input raises FormatError naming the
// byte offset.
std::vector<uint8_t> raster_to_bytes(const Raster& r);
Raster raster_from_bytes(const std::vector<uint8_t>& bytes);
void write_amrd(const std::string& path, const Raster& r);
Raster read_amrd(const std::string& path);

}  // namespace ammnet
