#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace endosynth {

/// Interleaved RGB raster (HWC), values nominally in [-1,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    float at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }

    friend bool operator==(const Image&, const Image&) = default;
};

/// 8-bit RGB raster, used for control masks and PNG round-trips.
struct Raster8 {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Raster8() = default;
    Raster8(int h, int w, std::uint8_t fill = 0) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    std::uint8_t& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
    std::uint8_t at(int r, int c, int ch) const { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }

    friend bool operator==(const Raster8&, const Raster8&) = default;
};

Raster8 to_raster8(const Image& img);
Image from_raster8(const Raster8& r);

void write_png(const std::filesystem::path& path, const Raster8& r);
void write_png(const std::filesystem::path& path, const Image& img);
Raster8 read_png8(const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// PSNR in dB with both images mapped from [-1,1] to [0,1].
double psnr(const Image& a, const Image& b);

} // namespace endosynth
