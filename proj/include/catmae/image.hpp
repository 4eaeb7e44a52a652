#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "catmae/error.hpp"

namespace catmae {

// Interleaved row-major RGB image, values in [0,1].
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t channels = 3;
    std::vector<float> pixels;

    Image() = default;
    Image(std::int64_t h, std::int64_t w, std::int64_t c = 3)
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h * w * c), 0.0f) {}

    float& at(std::int64_t y, std::int64_t x, std::int64_t c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    float at(std::int64_t y, std::int64_t x, std::int64_t c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    bool same_size(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

inline Image crop(const Image& img, std::int64_t top, std::int64_t left,
                  std::int64_t h, std::int64_t w) {
    if (top < 0 || left < 0 || top + h > img.height || left + w > img.width || h < 1 || w < 1)
        throw DataError(DataError::Kind::layout,
                        "crop: rect " + std::to_string(top) + "," + std::to_string(left) +
                            " " + std::to_string(h) + "x" + std::to_string(w) +
                            " outside image " + std::to_string(img.height) + "x" +
                            std::to_string(img.width));
    Image out(h, w, img.channels);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            for (std::int64_t c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(top + y, left + x, c);
    return out;
}

inline Image hflip(const Image& img) {
    Image out(img.height, img.width, img.channels);
    for (std::int64_t y = 0; y < img.height; ++y)
        for (std::int64_t x = 0; x < img.width; ++x)
            for (std::int64_t c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

// Bilinear resize, half-pixel-center convention. Exact copy when the size is
// unchanged.
inline Image bilinear_resize(const Image& img, std::int64_t oh, std::int64_t ow) {
    if (oh == img.height && ow == img.width) return img;
    Image out(oh, ow, img.channels);
    const double sy = static_cast<double>(img.height) / static_cast<double>(oh);
    const double sx = static_cast<double>(img.width) / static_cast<double>(ow);
    for (std::int64_t y = 0; y < oh; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const auto y0 = static_cast<std::int64_t>(std::floor(fy));
        const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::int64_t x = 0; x < ow; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const auto x0 = static_cast<std::int64_t>(std::floor(fx));
            const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::int64_t c = 0; c < img.channels; ++c) {
                const double v00 = img.at(y0, x0, c), v01 = img.at(y0, x1, c);
                const double v10 = img.at(y1, x0, c), v11 = img.at(y1, x1, c);
                const double top = v00 + (v01 - v00) * wx;
                const double bot = v10 + (v11 - v10) * wx;
                out.at(y, x, c) = static_cast<float>(top + (bot - top) * wy);
            }
        }
    }
    return out;
}

}  // namespace catmae
