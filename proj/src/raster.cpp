#include "ammnet/raster.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little, "amrd I/O assumes a little-endian host");

namespace ammnet {

Raster Raster::u8(int channels, int height, int width) {
    Raster r;
    r.dtype_ = RasterDType::U8;
    r.channels_ = channels;
    r.height_ = height;
    r.width_ = width;
    r.u8_.assign(static_cast<size_t>(channels) * height * width, 0);
    return r;
}

Raster Raster::f32(int channels, int height, int width) {
    Raster r;
    r.dtype_ = RasterDType::F32;
    r.channels_ = channels;
    r.height_ = height;
    r.width_ = width;
    r.f32_.assign(static_cast<size_t>(channels) * height * width, 0.0f);
    return r;
}

namespace {

constexpr char kMagic[4] = {'A', 'M', 'R', 'D'};
constexpr size_t kHeaderBytes = 15;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    const size_t n = out.size();
    out.resize(n + 4);
    std::memcpy(out.data() + n, &v, 4);
}

uint32_t get_u32(const std::vector<uint8_t>& in, size_t off) {
    uint32_t v;
    std::memcpy(&v, in.data() + off, 4);
    return v;
}

}  // namespace

std::vector<uint8_t> raster_to_bytes(const Raster& r) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(1);  // version
    out.push_back(static_cast<uint8_t>(r.dtype()));
    out.push_back(static_cast<uint8_t>(r.channels()));
    put_u32(out, static_cast<uint32_t>(r.height()));
    put_u32(out, static_cast<uint32_t>(r.width()));
    if (r.dtype() == RasterDType::U8) {
        out.insert(out.end(), r.u8_data().begin(), r.u8_data().end());
    } else {
        const size_t n = out.size();
        out.resize(n + r.f32_data().size() * 4);
        std::memcpy(out.data() + n, r.f32_data().data(), r.f32_data().size() * 4);
    }
    return out;
}

Raster raster_from_bytes(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < kHeaderBytes)
        throw FormatError("amrd: truncated header, " + std::to_string(bytes.size()) +
                          " bytes < " + std::to_string(kHeaderBytes) + " (at byte offset 0)");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("amrd: bad magic (at byte offset 0)");
    if (bytes[4] != 1)
        throw FormatError("amrd: unsupported version " + std::to_string(bytes[4]) +
                          " (at byte offset 4)");
    const uint8_t dt = bytes[5];
    if (dt > 1) throw FormatError("amrd: unknown dtype " + std::to_string(dt) + " (at byte offset 5)");
    const int channels = bytes[6];
    const uint32_t h = get_u32(bytes, 7);
    const uint32_t w = get_u32(bytes, 11);
    const size_t count = static_cast<size_t>(channels) * h * w;
    const size_t elem = dt == 0 ? 1 : 4;
    const size_t expected = kHeaderBytes + count * elem;
    if (bytes.size() != expected)
        throw FormatError("amrd: payload length mismatch, expected " + std::to_string(expected) +
                          " bytes total, got " + std::to_string(bytes.size()) +
                          " (at byte offset " + std::to_string(kHeaderBytes) + ")");
    if (dt == 0) {
        Raster r = Raster::u8(channels, static_cast<int>(h), static_cast<int>(w));
        std::memcpy(r.u8_data().data(), bytes.data() + kHeaderBytes, count);
        return r;
    }
    Raster r = Raster::f32(channels, static_cast<int>(h), static_cast<int>(w));
    std::memcpy(r.f32_data().data(), bytes.data() + kHeaderBytes, count * 4);
    return r;
}

void write_amrd(const std::string& path, const Raster& r) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    auto bytes = raster_to_bytes(r);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

Raster read_amrd(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open: " + path);
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw IoError("read failed: " + path);
    try {
        return raster_from_bytes(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path + ": " + e.what());
    }
}

}  // namespace ammnet
