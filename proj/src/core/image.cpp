#include "endosynth/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "endosynth/error.hpp"

namespace endosynth {

Raster8 to_raster8(const Image& img) {
    Raster8 out(img.height, img.width);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const float v = std::clamp((img.data[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
        out.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

Image from_raster8(const Raster8& r) {
    Image out(r.height, r.width);
    for (std::size_t i = 0; i < r.data.size(); ++i) out.data[i] = r.data[i] / 127.5f - 1.0f;
    return out;
}

void write_png(const std::filesystem::path& path, const Raster8& r) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    cv::Mat bgr(r.height, r.width, CV_8UC3);
    for (int y = 0; y < r.height; ++y) {
        auto* row = bgr.ptr<std::uint8_t>(y);
        for (int x = 0; x < r.width; ++x) {
            for (int ch = 0; ch < 3; ++ch) row[x * 3 + ch] = r.at(y, x, 2 - ch);
        }
    }
    // Fixed compression keeps files byte-stable across runs.
    if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
        throw Error("failed to write PNG: " + path.string());
    }
}

void write_png(const std::filesystem::path& path, const Image& img) { write_png(path, to_raster8(img)); }

Raster8 read_png8(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("failed to read image: " + path.string());
    Raster8 out(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<std::uint8_t>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = row[x * 3 + 2 - ch];
        }
    }
    return out;
}

Image read_png(const std::filesystem::path& path) { return from_raster8(read_png8(path)); }

double psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width) throw Error("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = 0.5 * (static_cast<double>(a.data[i]) - b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

} // namespace endosynth
