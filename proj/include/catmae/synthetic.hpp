#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "catmae/dataio.hpp"
#include "catmae/error.hpp"
#include "catmae/image.hpp"
#include "catmae/png_io.hpp"
#include "catmae/rng.hpp"

namespace catmae {

enum class ShapeKind { square, circle };

struct ShapeSpec {
    ShapeKind kind = ShapeKind::square;
    double size = 8.0;  // full extent in pixels (circle diameter / square side)
    std::array<float, 3> color{1.0f, 0.0f, 0.0f};
    double x = 0.0, y = 0.0;  // center, pixel-center coordinates
    double vx = 0.0, vy = 0.0;  // pixels per frame
};

struct SyntheticConfig {
    std::int64_t height = 64, width = 64;
    std::int64_t n_frames = 16;
    std::array<float, 3> background{0.15f, 0.15f, 0.2f};
    std::vector<ShapeSpec> shapes;

    void validate() const {
        if (height < 1 || width < 1 || n_frames < 1)
            throw ConfigError("SyntheticConfig: bad canvas or frame count");
        if (shapes.empty() || shapes.size() > 4)
            throw ConfigError("SyntheticConfig: need 1-4 shapes, got " +
                              std::to_string(shapes.size()));
        for (const auto& s : shapes) {
            if (s.size <= 0.0) throw ConfigError("SyntheticConfig: non-positive shape size");
            if (s.size > static_cast<double>(std::min(height, width)))
                throw DataError(DataError::Kind::layout,
                                "shape of size " + std::to_string(s.size) +
                                    " exceeds canvas " + std::to_string(height) + "x" +
                                    std::to_string(width));
        }
    }
};

namespace detail {

// Reflect a 1-D position into [lo, hi], flipping velocity on each bounce.
inline void reflect_step(double& p, double& v, double lo, double hi) {
    if (hi - lo < 1e-9) {
        p = lo;
        return;
    }
    for (;;) {
        if (p < lo) {
            p = 2.0 * lo - p;
            v = -v;
        } else if (p > hi) {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
}

inline bool shape_covers(const ShapeSpec& s, double cx, double cy, std::int64_t px,
                         std::int64_t py) {
    const double dx = static_cast<double>(px) - cx;
    const double dy = static_cast<double>(py) - cy;
    const double half = s.size / 2.0;
    if (s.kind == ShapeKind::square) return std::abs(dx) <= half && std::abs(dy) <= half;
    return dx * dx + dy * dy <= half * half;
}

}  // namespace detail

struct SyntheticClip {
    VideoClip clip;
    std::vector<LabelImage> labels;  // per frame, id 0 = background, i+1 = shapes[i]
};

// Rigid shapes translating at constant velocity, reflecting off the canvas
// walls so they never leave the frame. Later shapes overdraw earlier ones.
inline SyntheticClip gen_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    SyntheticClip out;
    out.clip.frames.reserve(static_cast<std::size_t>(cfg.n_frames));
    out.labels.reserve(static_cast<std::size_t>(cfg.n_frames));

    struct State {
        double x, y, vx, vy;
    };
    std::vector<State> st;
    st.reserve(cfg.shapes.size());
    for (const auto& s : cfg.shapes) {
        State state{s.x, s.y, s.vx, s.vy};
        const double half = s.size / 2.0;
        detail::reflect_step(state.x, state.vx, half, static_cast<double>(cfg.width - 1) - half);
        detail::reflect_step(state.y, state.vy, half, static_cast<double>(cfg.height - 1) - half);
        st.push_back(state);
    }

    for (std::int64_t t = 0; t < cfg.n_frames; ++t) {
        Image frame(cfg.height, cfg.width, 3);
        LabelImage label;
        label.height = cfg.height;
        label.width = cfg.width;
        label.ids.assign(static_cast<std::size_t>(cfg.height * cfg.width), 0);
        for (std::int64_t y = 0; y < cfg.height; ++y)
            for (std::int64_t x = 0; x < cfg.width; ++x)
                for (std::int64_t c = 0; c < 3; ++c)
                    frame.at(y, x, c) = cfg.background[static_cast<std::size_t>(c)];

        for (std::size_t i = 0; i < cfg.shapes.size(); ++i) {
            const auto& s = cfg.shapes[i];
            const auto& state = st[i];
            const double half = s.size / 2.0;
            const auto y0 = static_cast<std::int64_t>(std::floor(state.y - half));
            const auto y1 = static_cast<std::int64_t>(std::ceil(state.y + half));
            const auto x0 = static_cast<std::int64_t>(std::floor(state.x - half));
            const auto x1 = static_cast<std::int64_t>(std::ceil(state.x + half));
            for (std::int64_t y = std::max<std::int64_t>(0, y0);
                 y <= std::min(cfg.height - 1, y1); ++y)
                for (std::int64_t x = std::max<std::int64_t>(0, x0);
                     x <= std::min(cfg.width - 1, x1); ++x)
                    if (detail::shape_covers(s, state.x, state.y, x, y)) {
                        for (std::int64_t c = 0; c < 3; ++c)
                            frame.at(y, x, c) = s.color[static_cast<std::size_t>(c)];
                        label.ids[static_cast<std::size_t>(y * cfg.width + x)] =
                            static_cast<std::uint8_t>(i + 1);
                    }
        }
        out.clip.frames.push_back(std::move(frame));
        out.labels.push_back(std::move(label));

        for (std::size_t i = 0; i < cfg.shapes.size(); ++i) {
            const double half = cfg.shapes[i].size / 2.0;
            st[i].x += st[i].vx;
            st[i].y += st[i].vy;
            detail::reflect_step(st[i].x, st[i].vx, half,
                                 static_cast<double>(cfg.width - 1) - half);
            detail::reflect_step(st[i].y, st[i].vy, half,
                                 static_cast<double>(cfg.height - 1) - half);
        }
    }
    return out;
}

// Sample a config with 1-4 shapes: random kind, size, saturated color, integer
// start position, and a velocity of 1-3 px/frame per axis.
inline SyntheticConfig random_synthetic_config(std::int64_t height, std::int64_t width,
                                               std::int64_t n_frames, Rng& rng) {
    SyntheticConfig cfg;
    cfg.height = height;
    cfg.width = width;
    cfg.n_frames = n_frames;
    cfg.background = {static_cast<float>(rng.uniform(0.05, 0.25)),
                      static_cast<float>(rng.uniform(0.05, 0.25)),
                      static_cast<float>(rng.uniform(0.05, 0.25))};
    const std::int64_t n_shapes = rng.uniform_int(1, 4);
    const double min_side = static_cast<double>(std::min(height, width));
    for (std::int64_t i = 0; i < n_shapes; ++i) {
        ShapeSpec s;
        s.kind = rng.bernoulli(0.5) ? ShapeKind::square : ShapeKind::circle;
        s.size = rng.uniform(min_side * 0.18, min_side * 0.38);
        s.color = {static_cast<float>(rng.uniform(0.4, 1.0)),
                   static_cast<float>(rng.uniform(0.4, 1.0)),
                   static_cast<float>(rng.uniform(0.4, 1.0))};
        s.color[static_cast<std::size_t>(rng.uniform_int(0, 2))] =
            static_cast<float>(rng.uniform(0.0, 0.2));
        const double half = s.size / 2.0;
        s.x = static_cast<double>(rng.uniform_int(
            static_cast<std::int64_t>(std::ceil(half)),
            width - 1 - static_cast<std::int64_t>(std::ceil(half))));
        s.y = static_cast<double>(rng.uniform_int(
            static_cast<std::int64_t>(std::ceil(half)),
            height - 1 - static_cast<std::int64_t>(std::ceil(half))));
        s.vx = static_cast<double>(rng.uniform_int(1, 3)) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        s.vy = static_cast<double>(rng.uniform_int(1, 3)) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        cfg.shapes.push_back(s);
    }
    return cfg;
}

// Materialize n_clips synthetic clips under root in the standard dataset
// layout and write the manifest.
inline std::vector<std::string> write_synthetic_dataset(const std::string& root,
                                                        std::int64_t n_clips,
                                                        std::int64_t height, std::int64_t width,
                                                        std::int64_t n_frames,
                                                        std::uint64_t seed) {
    fs::create_directories(root);
    Rng rng(seed, /*stream=*/0x5e7);
    std::vector<std::string> ids;
    ids.reserve(static_cast<std::size_t>(n_clips));
    for (std::int64_t c = 0; c < n_clips; ++c) {
        Rng clip_rng = rng.child(static_cast<std::uint64_t>(c));
        auto cfg = random_synthetic_config(height, width, n_frames, clip_rng);
        auto made = gen_synthetic(cfg);
        char name[32];
        std::snprintf(name, sizeof(name), "clip%04lld", static_cast<long long>(c));
        const std::string clip_dir = root + "/" + name;
        fs::create_directories(clip_dir + "/labels");
        for (std::int64_t t = 0; t < n_frames; ++t) {
            write_png_rgb(clip_dir + "/" + frame_name(t),
                          made.clip.frames[static_cast<std::size_t>(t)]);
            write_png_labels(clip_dir + "/labels/" + frame_name(t),
                             made.labels[static_cast<std::size_t>(t)]);
        }
        ids.push_back(name);
    }
    write_manifest(root, ids);
    return ids;
}

}  // namespace catmae
