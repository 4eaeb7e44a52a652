#pragma once

#include <png.h>

#include <array>
#include <cstdio>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/image.hpp"

namespace catmae {

// Per-pixel label grid (class ids, 0 = background).
struct LabelImage {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> ids;

    LabelImage() = default;
    LabelImage(std::int64_t h, std::int64_t w)
        : height(h), width(w), ids(static_cast<std::size_t>(h * w), 0) {}

    std::uint8_t& at(std::int64_t y, std::int64_t x) {
        return ids[static_cast<std::size_t>(y * width + x)];
    }
    std::uint8_t at(std::int64_t y, std::int64_t x) const {
        return ids[static_cast<std::size_t>(y * width + x)];
    }
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// PASCAL-VOC style colormap so label PNGs are viewable directly.
inline std::array<std::uint8_t, 3> label_color(int id) {
    std::array<std::uint8_t, 3> rgb{0, 0, 0};
    int c = id;
    for (int shift = 7; shift >= 0 && c; --shift) {
        rgb[0] |= static_cast<std::uint8_t>(((c >> 0) & 1) << shift);
        rgb[1] |= static_cast<std::uint8_t>(((c >> 1) & 1) << shift);
        rgb[2] |= static_cast<std::uint8_t>(((c >> 2) & 1) << shift);
        c >>= 3;
    }
    return rgb;
}

}  // namespace detail

// Decode an 8-bit PNG to RGB in [0,1]. Grayscale/palette/alpha variants are
// expanded; 16-bit depth is stripped to 8.
inline Image read_png_rgb(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError(DataError::Kind::missing, "cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(DataError::Kind::undecodable, "libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(DataError::Kind::undecodable, "undecodable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_packing(png);
    const int color_type = png_get_color_type(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const auto h = static_cast<std::int64_t>(png_get_image_height(png, info));
    const auto w = static_cast<std::int64_t>(png_get_image_width(png, info));
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h * w * 3));
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = raw.data() + y * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(h, w, 3);
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

// Encode an RGB image ([0,1], clamped) as an 8-bit PNG.
inline void write_png_rgb(const std::string& path, const Image& img) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError(DataError::Kind::missing, "cannot write " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        throw DataError(DataError::Kind::undecodable, "libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError(DataError::Kind::undecodable, "PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.height * img.width * 3));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        float v = img.pixels[i];
        v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
        raw[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (std::int64_t y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] = raw.data() + y * img.width * 3;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Read a label mask: palette PNGs yield raw palette indices, 8-bit grayscale
// yields the gray values. RGB label files are rejected.
inline LabelImage read_png_labels(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError(DataError::Kind::missing, "cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(DataError::Kind::undecodable, "libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(DataError::Kind::undecodable, "undecodable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const int color_type = png_get_color_type(png, info);
    if (color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(DataError::Kind::undecodable,
                        "label mask must be paletted or grayscale: " + path);
    }
    png_set_strip_16(png);
    png_set_packing(png);  // 1/2/4-bit palette -> one byte per pixel
    png_read_update_info(png, info);

    const auto h = static_cast<std::int64_t>(png_get_image_height(png, info));
    const auto w = static_cast<std::int64_t>(png_get_image_width(png, info));
    LabelImage out(h, w);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (std::int64_t y = 0; y < h; ++y)
        rows[static_cast<std::size_t>(y)] = out.ids.data() + y * w;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

// Write a label mask as an 8-bit paletted PNG (id 0 = background/black).
inline void write_png_labels(const std::string& path, const LabelImage& labels) {
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError(DataError::Kind::missing, "cannot write " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        throw DataError(DataError::Kind::undecodable, "libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError(DataError::Kind::undecodable, "PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(labels.width),
                 static_cast<png_uint_32>(labels.height), 8, PNG_COLOR_TYPE_PALETTE,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::array<png_color, 256> palette{};
    for (int i = 0; i < 256; ++i) {
        auto rgb = detail::label_color(i);
        palette[static_cast<std::size_t>(i)] = {rgb[0], rgb[1], rgb[2]};
    }
    png_set_PLTE(png, info, palette.data(), 256);
    png_write_info(png, info);

    std::vector<png_bytep> rows(static_cast<std::size_t>(labels.height));
    for (std::int64_t y = 0; y < labels.height; ++y)
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(labels.ids.data() + y * labels.width);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Grayscale heatmap, values scaled so the max maps to 255.
inline void write_png_gray(const std::string& path, std::int64_t h, std::int64_t w,
                           const std::vector<double>& values) {
    if (static_cast<std::int64_t>(values.size()) != h * w)
        throw ShapeError("write_png_gray: " + std::to_string(values.size()) +
                         " values for " + std::to_string(h) + "x" + std::to_string(w));
    double mx = 0.0;
    for (auto v : values) mx = std::max(mx, v);
    Image img(h, w, 3);
    for (std::int64_t i = 0; i < h * w; ++i) {
        const auto g = static_cast<float>(mx > 0 ? values[static_cast<std::size_t>(i)] / mx : 0.0);
        img.pixels[static_cast<std::size_t>(i * 3 + 0)] = g;
        img.pixels[static_cast<std::size_t>(i * 3 + 1)] = g;
        img.pixels[static_cast<std::size_t>(i * 3 + 2)] = g;
    }
    write_png_rgb(path, img);
}

}  // namespace catmae
