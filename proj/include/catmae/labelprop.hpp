#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/model.hpp"
#include "catmae/png_io.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

// [h, w, d] unit-norm feature vectors on the patch grid.
struct FeatureGrid {
    std::int64_t h = 0, w = 0, d = 0;
    std::vector<float> data;

    const float* at(std::int64_t y, std::int64_t x) const {
        return data.data() + (y * w + x) * d;
    }
    float* at(std::int64_t y, std::int64_t x) { return data.data() + (y * w + x) * d; }
};

// [h, w, C] per-cell probability distribution; class 0 = background.
struct LabelMap {
    std::int64_t h = 0, w = 0, classes = 0;
    std::vector<double> data;

    LabelMap() = default;
    LabelMap(std::int64_t h_, std::int64_t w_, std::int64_t c_)
        : h(h_), w(w_), classes(c_), data(static_cast<std::size_t>(h_ * w_ * c_), 0.0) {}

    const double* at(std::int64_t y, std::int64_t x) const {
        return data.data() + (y * w + x) * classes;
    }
    double* at(std::int64_t y, std::int64_t x) { return data.data() + (y * w + x) * classes; }
};

struct PropagationConfig {
    std::int64_t k = 7;
    double tau = 0.1;
    std::int64_t m = 7;   // recent predicted frames kept, plus frame 0 always
    std::int64_t r = 20;  // Chebyshev radius in grid cells
    std::int64_t feature_layer = -1;  // encoder block count; -1 = final layer

    void validate() const {
        if (k < 1) throw ConfigError("PropagationConfig: k must be >= 1");
        if (!(tau > 0.0)) throw ConfigError("PropagationConfig: temperature must be > 0");
        if (m < 0) throw ConfigError("PropagationConfig: context length must be >= 0");
        if (r < 1) throw ConfigError("PropagationConfig: radius must be >= 1");
    }
};

// Encoder features for one fully visible frame: final-layer (or earlier, per
// `layers`) patch tokens with the CLS row dropped, L2-normalized per cell.
template <typename T>
FeatureGrid extract_features(const Image& frame, const ModelParams<T>& params,
                             std::int64_t layers = -1) {
    NoGradGuard ng;
    const auto& cfg = params.cfg;
    auto tokens = embed_frame(frame, params);
    auto latents = encode_frame(tokens, params, layers);
    auto patches = slice_rows(latents, 1, latents.dim(0));

    FeatureGrid grid;
    grid.h = cfg.grid();
    grid.w = cfg.grid();
    grid.d = cfg.enc_dim;
    grid.data.resize(static_cast<std::size_t>(grid.h * grid.w * grid.d));
    const auto& vals = patches.values();
    for (std::int64_t i = 0; i < grid.h * grid.w; ++i) {
        double norm2 = 0.0;
        for (std::int64_t j = 0; j < grid.d; ++j) {
            const double v = static_cast<double>(vals[static_cast<std::size_t>(i * grid.d + j)]);
            norm2 += v * v;
        }
        const double inv = 1.0 / std::max(std::sqrt(norm2), 1e-12);
        for (std::int64_t j = 0; j < grid.d; ++j)
            grid.data[static_cast<std::size_t>(i * grid.d + j)] = static_cast<float>(
                static_cast<double>(vals[static_cast<std::size_t>(i * grid.d + j)]) * inv);
    }
    return grid;
}

// Grid cells within Chebyshev radius r of (y, x), clamped to the grid, in
// row-major order.
inline std::vector<std::pair<std::int64_t, std::int64_t>> candidate_cells(
    std::int64_t h, std::int64_t w, std::int64_t y, std::int64_t x, std::int64_t r) {
    std::vector<std::pair<std::int64_t, std::int64_t>> cells;
    const std::int64_t y0 = std::max<std::int64_t>(0, y - r);
    const std::int64_t y1 = std::min(h - 1, y + r);
    const std::int64_t x0 = std::max<std::int64_t>(0, x - r);
    const std::int64_t x1 = std::min(w - 1, x + r);
    cells.reserve(static_cast<std::size_t>((y1 - y0 + 1) * (x1 - x0 + 1)));
    for (std::int64_t yy = y0; yy <= y1; ++yy)
        for (std::int64_t xx = x0; xx <= x1; ++xx) cells.emplace_back(yy, xx);
    return cells;
}

struct Candidate {
    double affinity = 0.0;
    std::int64_t frame = 0, y = 0, x = 0;
};

// Context frames for target frame f: frame 0, then the up-to-m most recent.
inline std::vector<std::int64_t> context_frames(std::int64_t f, std::int64_t m) {
    std::vector<std::int64_t> ctx{0};
    for (std::int64_t c = std::max<std::int64_t>(1, f - m); c < f; ++c) ctx.push_back(c);
    return ctx;
}

// The k best-matching context cells for target cell (y, x) of frame f, ranked
// by affinity; ties prefer the earlier-enumerated candidate (context frames in
// ascending index, cells row-major).
inline std::vector<Candidate> top_k_candidates(const std::vector<FeatureGrid>& features,
                                               std::int64_t f, std::int64_t y, std::int64_t x,
                                               const PropagationConfig& cfg) {
    const auto& target = features[static_cast<std::size_t>(f)];
    const float* q = target.at(y, x);
    std::vector<Candidate> cands;
    const auto window = candidate_cells(target.h, target.w, y, x, cfg.r);
    for (std::int64_t c : context_frames(f, cfg.m)) {
        const auto& fg = features[static_cast<std::size_t>(c)];
        for (const auto& [yy, xx] : window) {
            const float* kf = fg.at(yy, xx);
            double dot = 0.0;
            for (std::int64_t j = 0; j < target.d; ++j)
                dot += static_cast<double>(q[j]) * static_cast<double>(kf[j]);
            cands.push_back({dot, c, yy, xx});
        }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.affinity > b.affinity; });
    if (cands.size() > static_cast<std::size_t>(cfg.k))
        cands.resize(static_cast<std::size_t>(cfg.k));
    return cands;
}

// Soft k-NN label propagation. For target frame f the context is frame 0 plus
// the up-to-m most recent predictions; candidates are context cells within
// Chebyshev radius r of the target cell; affinity is the feature dot product;
// the top-k (ties broken toward the earlier-enumerated candidate) are
// softmax(affinity/tau) weighted and their label distributions blended.
inline std::vector<LabelMap> propagate(const std::vector<FeatureGrid>& features,
                                       const LabelMap& first, const PropagationConfig& cfg) {
    cfg.validate();
    if (features.empty()) throw ConfigError("propagate: empty frame sequence");
    const std::int64_t h = features[0].h, w = features[0].w, d = features[0].d;
    for (const auto& f : features)
        if (f.h != h || f.w != w || f.d != d)
            throw ShapeError("propagate: inconsistent feature grid shapes");
    if (first.h != h || first.w != w)
        throw ShapeError("propagate: label grid does not match feature grid");

    std::vector<LabelMap> out;
    out.reserve(features.size());
    out.push_back(first);

    for (std::int64_t f = 1; f < static_cast<std::int64_t>(features.size()); ++f) {
        LabelMap pred(h, w, first.classes);
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                const auto kept = top_k_candidates(features, f, y, x, cfg);
                const double mx = kept[0].affinity;
                double z = 0.0;
                for (const auto& c : kept) z += std::exp((c.affinity - mx) / cfg.tau);
                double* dst = pred.at(y, x);
                for (const auto& c : kept) {
                    const double wgt = std::exp((c.affinity - mx) / cfg.tau) / z;
                    const double* lab = out[static_cast<std::size_t>(c.frame)].at(c.y, c.x);
                    for (std::int64_t cc = 0; cc < first.classes; ++cc) dst[cc] += wgt * lab[cc];
                }
            }
        }
        out.push_back(std::move(pred));
    }
    return out;
}

// Per-cell argmax; ties resolve to the lowest class id.
inline LabelImage hard_labels(const LabelMap& map) {
    LabelImage out(map.h, map.w);
    for (std::int64_t y = 0; y < map.h; ++y)
        for (std::int64_t x = 0; x < map.w; ++x) {
            const double* p = map.at(y, x);
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < map.classes; ++c)
                if (p[c] > p[best]) best = c;
            out.at(y, x) = static_cast<std::uint8_t>(best);
        }
    return out;
}

inline LabelMap one_hot_labels(const LabelImage& ids, std::int64_t classes) {
    LabelMap map(ids.height, ids.width, classes);
    for (std::int64_t y = 0; y < ids.height; ++y)
        for (std::int64_t x = 0; x < ids.width; ++x) {
            const std::int64_t c = ids.at(y, x);
            if (c >= classes)
                throw ConfigError("one_hot_labels: id " + std::to_string(c) +
                                  " exceeds class count " + std::to_string(classes));
            map.at(y, x)[c] = 1.0;
        }
    return map;
}

// Average-pool a pixel-level label map onto the patch grid.
inline LabelMap downsample_labels(const LabelMap& pixels, std::int64_t h, std::int64_t w) {
    if (pixels.h % h != 0 || pixels.w % w != 0)
        throw ShapeError("downsample_labels: size must be a multiple of the grid");
    const std::int64_t by = pixels.h / h, bx = pixels.w / w;
    LabelMap grid(h, w, pixels.classes);
    const double inv = 1.0 / static_cast<double>(by * bx);
    for (std::int64_t y = 0; y < pixels.h; ++y)
        for (std::int64_t x = 0; x < pixels.w; ++x) {
            const double* src = pixels.at(y, x);
            double* dst = grid.at(y / by, x / bx);
            for (std::int64_t c = 0; c < pixels.classes; ++c) dst[c] += src[c] * inv;
        }
    return grid;
}

// Nearest-neighbor (block) upsampling of cell distributions.
inline LabelMap upsample_labels(const LabelMap& grid, std::int64_t H, std::int64_t W) {
    if (H % grid.h != 0 || W % grid.w != 0)
        throw ShapeError("upsample_labels: target size must be a multiple of the grid");
    const std::int64_t by = H / grid.h, bx = W / grid.w;
    LabelMap pixels(H, W, grid.classes);
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
            const double* src = grid.at(y / by, x / bx);
            double* dst = pixels.at(y, x);
            for (std::int64_t c = 0; c < grid.classes; ++c) dst[c] = src[c];
        }
    return pixels;
}

// ---------------------------------------------------------------------------
// J (region IoU) and F (boundary F-measure)

struct FrameScore {
    std::int64_t object_id = 0;
    std::int64_t frame = 0;
    double j = 0.0;
    double f = 0.0;
};

struct SegmentationScore {
    double j_mean = 0.0;
    double f_mean = 0.0;
    double jf_mean = 0.0;
    std::vector<FrameScore> rows;
};

namespace detail {

inline std::vector<std::uint8_t> binary_mask(const LabelImage& img, std::int64_t id) {
    std::vector<std::uint8_t> m(img.ids.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.ids[i] == id ? 1 : 0;
    return m;
}

// 1-pixel contour: mask pixels with a 4-neighbor outside the mask (image
// border counts as outside).
inline std::vector<std::uint8_t> contour(const std::vector<std::uint8_t>& mask, std::int64_t h,
                                         std::int64_t w) {
    std::vector<std::uint8_t> b(mask.size(), 0);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            if (!mask[static_cast<std::size_t>(y * w + x)]) continue;
            const bool edge =
                y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
                !mask[static_cast<std::size_t>((y - 1) * w + x)] ||
                !mask[static_cast<std::size_t>((y + 1) * w + x)] ||
                !mask[static_cast<std::size_t>(y * w + x - 1)] ||
                !mask[static_cast<std::size_t>(y * w + x + 1)];
            if (edge) b[static_cast<std::size_t>(y * w + x)] = 1;
        }
    return b;
}

// Chebyshev dilation by `radius` (square structuring element).
inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mask, std::int64_t h,
                                        std::int64_t w, std::int64_t radius) {
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            if (!mask[static_cast<std::size_t>(y * w + x)]) continue;
            const std::int64_t y0 = std::max<std::int64_t>(0, y - radius);
            const std::int64_t y1 = std::min(h - 1, y + radius);
            const std::int64_t x0 = std::max<std::int64_t>(0, x - radius);
            const std::int64_t x1 = std::min(w - 1, x + radius);
            for (std::int64_t yy = y0; yy <= y1; ++yy)
                for (std::int64_t xx = x0; xx <= x1; ++xx)
                    out[static_cast<std::size_t>(yy * w + xx)] = 1;
        }
    return out;
}

inline double region_j(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& gt) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] & gt[i];
        uni += pred[i] | gt[i];
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double boundary_f(const std::vector<std::uint8_t>& pred,
                         const std::vector<std::uint8_t>& gt, std::int64_t h, std::int64_t w,
                         std::int64_t tol) {
    const auto pb = contour(pred, h, w);
    const auto gb = contour(gt, h, w);
    std::int64_t np = 0, ng = 0;
    for (auto v : pb) np += v;
    for (auto v : gb) ng += v;
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const auto pd = dilate(pb, h, w, tol);
    const auto gd = dilate(gb, h, w, tol);
    std::int64_t p_hit = 0, g_hit = 0;
    for (std::size_t i = 0; i < pb.size(); ++i) {
        p_hit += pb[i] & gd[i];
        g_hit += gb[i] & pd[i];
    }
    const double prec = static_cast<double>(p_hit) / static_cast<double>(np);
    const double rec = static_cast<double>(g_hit) / static_cast<double>(ng);
    return prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
}

}  // namespace detail

// Scores `pred` against `gt` per object (nonzero gt ids) per frame.
// tolerance < 0 selects the default ceil(0.8% of the image diagonal).
inline SegmentationScore jf_metrics(const std::vector<LabelImage>& pred,
                                    const std::vector<LabelImage>& gt,
                                    std::int64_t tolerance = -1) {
    if (pred.size() != gt.size())
        throw ShapeError("jf_metrics: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(gt.size()) + " ground-truth frames");
    if (gt.empty()) throw ShapeError("jf_metrics: no frames");
    const std::int64_t h = gt[0].height, w = gt[0].width;
    for (std::size_t i = 0; i < gt.size(); ++i)
        if (pred[i].height != h || pred[i].width != w || gt[i].height != h || gt[i].width != w)
            throw ShapeError("jf_metrics: frame " + std::to_string(i) + " size mismatch");

    if (tolerance < 0)
        tolerance = static_cast<std::int64_t>(
            std::ceil(0.008 * std::sqrt(static_cast<double>(h * h + w * w))));

    std::set<std::int64_t> ids;
    for (const auto& g : gt)
        for (auto v : g.ids)
            if (v != 0) ids.insert(v);

    SegmentationScore score;
    double jsum = 0.0, fsum = 0.0;
    for (std::int64_t id : ids) {
        for (std::size_t fi = 0; fi < gt.size(); ++fi) {
            const auto pm = detail::binary_mask(pred[fi], id);
            const auto gm = detail::binary_mask(gt[fi], id);
            FrameScore row;
            row.object_id = id;
            row.frame = static_cast<std::int64_t>(fi);
            row.j = detail::region_j(pm, gm);
            row.f = detail::boundary_f(pm, gm, h, w, tolerance);
            jsum += row.j;
            fsum += row.f;
            score.rows.push_back(row);
        }
    }
    if (!score.rows.empty()) {
        score.j_mean = jsum / static_cast<double>(score.rows.size());
        score.f_mean = fsum / static_cast<double>(score.rows.size());
        score.jf_mean = 0.5 * (score.j_mean + score.f_mean);
    }
    return score;
}

inline void write_scores_header(std::ostream& out) { out << "video,object,frame,J,F\n"; }

inline void write_scores_csv(std::ostream& out, const std::string& video_id,
                             const SegmentationScore& score) {
    for (const auto& row : score.rows) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), ",%lld,%lld,%.6f,%.6f\n",
                      static_cast<long long>(row.object_id), static_cast<long long>(row.frame),
                      row.j, row.f);
        out << video_id << buf;
    }
}

}  // namespace catmae
