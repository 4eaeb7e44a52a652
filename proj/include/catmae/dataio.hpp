#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/image.hpp"
#include "catmae/png_io.hpp"
#include "catmae/rng.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

namespace fs = std::filesystem;

struct VideoClip {
    std::string id;
    std::vector<Image> frames;  // chronological order

    std::int64_t length() const { return static_cast<std::int64_t>(frames.size()); }
};

struct GapRange {
    std::int64_t lo = 1;
    std::int64_t hi = 1;
};

// How to sample and augment one training sequence.
struct ClipSpec {
    std::int64_t n_frames = 3;
    std::vector<GapRange> gap_ranges;  // n_frames - 1 entries
    std::int64_t crop_size = 224;
    double crop_scale_min = 0.5;
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double vire_prob = 0.5;

    void validate() const {
        if (n_frames < 2) throw ConfigError("ClipSpec: n_frames must be >= 2");
        if (static_cast<std::int64_t>(gap_ranges.size()) != n_frames - 1)
            throw ConfigError("ClipSpec: " + std::to_string(gap_ranges.size()) +
                              " gap ranges for " + std::to_string(n_frames) + " frames");
        for (const auto& g : gap_ranges)
            if (!(1 <= g.lo && g.lo <= g.hi))
                throw ConfigError("ClipSpec: bad gap range [" + std::to_string(g.lo) + "," +
                                  std::to_string(g.hi) + "]");
        if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
            throw ConfigError("ClipSpec: bad crop scale range");
        if (crop_size < 1) throw ConfigError("ClipSpec: crop_size must be positive");
    }

    std::int64_t min_span() const {
        std::int64_t s = 1;
        for (const auto& g : gap_ranges) s += g.lo;
        return s;
    }
};

struct AugmentRecord {
    std::int64_t top = 0, left = 0, side = 0;
    bool flipped = false;
};

struct FrameSequence {
    std::string clip_id;
    std::vector<Image> frames;
    std::vector<std::int64_t> source_indices;
    bool reversed = false;
    bool augmented = false;
    AugmentRecord aug;

    std::int64_t n_frames() const { return static_cast<std::int64_t>(frames.size()); }
};

// ---------------------------------------------------------------------------
// dataset layout: <root>/<clip_id>/%06d.png (+ labels/%06d.png), clips.txt

inline std::string frame_name(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld.png", static_cast<long long>(index));
    return buf;
}

inline std::vector<std::string> list_frame_files(const std::string& clip_dir) {
    if (!fs::is_directory(clip_dir))
        throw DataError(DataError::Kind::missing, "clip directory missing: " + clip_dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(clip_dir)) {
        if (!e.is_regular_file()) continue;
        auto name = e.path().filename().string();
        if (name.size() >= 4 && name.substr(name.size() - 4) == ".png") names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    return names;
}

inline std::int64_t clip_frame_count(const std::string& clip_dir) {
    return static_cast<std::int64_t>(list_frame_files(clip_dir).size());
}

// Decode only the requested frame indices of a clip (ascending file order).
inline std::vector<Image> load_clip_frames(const std::string& clip_dir,
                                           const std::vector<std::int64_t>& indices) {
    auto names = list_frame_files(clip_dir);
    std::vector<Image> out;
    out.reserve(indices.size());
    for (auto idx : indices) {
        if (idx < 0 || idx >= static_cast<std::int64_t>(names.size()))
            throw DataError(DataError::Kind::too_short,
                            "frame index " + std::to_string(idx) + " out of range for " +
                                clip_dir + " (" + std::to_string(names.size()) + " frames)");
        out.push_back(read_png_rgb(clip_dir + "/" + names[static_cast<std::size_t>(idx)]));
    }
    for (std::size_t i = 1; i < out.size(); ++i)
        if (!out[i].same_size(out[0]))
            throw DataError(DataError::Kind::dim_mismatch,
                            "inconsistent frame dimensions in " + clip_dir);
    return out;
}

// Decode a whole clip directory to [0,1] RGB frames in ascending file order.
inline VideoClip load_clip(const std::string& clip_dir) {
    auto names = list_frame_files(clip_dir);
    if (names.empty())
        throw DataError(DataError::Kind::empty, "clip has no frames: " + clip_dir);
    VideoClip clip;
    clip.id = fs::path(clip_dir).filename().string();
    clip.frames.reserve(names.size());
    for (const auto& n : names) clip.frames.push_back(read_png_rgb(clip_dir + "/" + n));
    for (std::size_t i = 1; i < clip.frames.size(); ++i)
        if (!clip.frames[i].same_size(clip.frames[0]))
            throw DataError(DataError::Kind::dim_mismatch,
                            "inconsistent frame dimensions in " + clip_dir + " (frame " +
                                names[i] + ")");
    return clip;
}

inline std::vector<std::string> read_manifest(const std::string& root) {
    const std::string path = root + "/clips.txt";
    std::ifstream in(path);
    if (!in) throw DataError(DataError::Kind::missing, "manifest missing: " + path);
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) ids.push_back(line);
    }
    if (ids.empty()) throw DataError(DataError::Kind::empty, "manifest empty: " + path);
    return ids;
}

inline void write_manifest(const std::string& root, const std::vector<std::string>& ids) {
    std::ofstream out(root + "/clips.txt");
    for (const auto& id : ids) out << id << "\n";
}

// ---------------------------------------------------------------------------
// sampling and augmentation

// Draw per-adjacency gaps uniformly from their ranges and a uniform start.
// Gap sets that do not fit the clip are rejected and redrawn, so whenever all
// maximal gaps fit, every gap is exactly uniform on its range.
inline std::vector<std::int64_t> sample_frame_indices(std::int64_t clip_len,
                                                      const ClipSpec& spec, Rng& rng) {
    spec.validate();
    const std::int64_t need = spec.min_span();
    if (clip_len < need)
        throw DataError(DataError::Kind::too_short,
                        "clip too short: " + std::to_string(clip_len) +
                            " frames, sampling needs at least " + std::to_string(need));
    std::vector<std::int64_t> gaps(spec.gap_ranges.size());
    for (;;) {
        std::int64_t total = 0;
        for (std::size_t i = 0; i < gaps.size(); ++i) {
            gaps[i] = rng.uniform_int(spec.gap_ranges[i].lo, spec.gap_ranges[i].hi);
            total += gaps[i];
        }
        if (total + 1 <= clip_len) {
            const std::int64_t start = rng.uniform_int(0, clip_len - 1 - total);
            std::vector<std::int64_t> idx(static_cast<std::size_t>(spec.n_frames));
            idx[0] = start;
            for (std::size_t i = 0; i < gaps.size(); ++i) idx[i + 1] = idx[i] + gaps[i];
            return idx;
        }
    }
}

inline FrameSequence sample_sequence(const VideoClip& clip, const ClipSpec& spec, Rng& rng) {
    auto idx = sample_frame_indices(clip.length(), spec, rng);
    FrameSequence seq;
    seq.clip_id = clip.id;
    seq.source_indices = idx;
    seq.frames.reserve(idx.size());
    for (auto i : idx) seq.frames.push_back(clip.frames[static_cast<std::size_t>(i)]);
    return seq;
}

// One crop rectangle and one flip decision for the whole sequence, so the
// cross-frame correspondence survives augmentation. Square crops, area scale
// drawn uniformly, bilinear resize to spec.crop_size.
inline FrameSequence augment(const FrameSequence& seq, const ClipSpec& spec, Rng& rng) {
    if (seq.frames.empty()) throw DataError(DataError::Kind::empty, "augment: empty sequence");
    const std::int64_t h = seq.frames[0].height, w = seq.frames[0].width;
    const double area_scale = rng.uniform(spec.crop_scale_min, spec.crop_scale_max);
    auto side = static_cast<std::int64_t>(
        std::lround(std::sqrt(area_scale * static_cast<double>(h) * static_cast<double>(w))));
    if (side < 1)
        throw DataError(DataError::Kind::layout, "augment: degenerate crop (side < 1 px)");
    side = std::min(side, std::min(h, w));
    const std::int64_t top = rng.uniform_int(0, h - side);
    const std::int64_t left = rng.uniform_int(0, w - side);
    const bool flipped = rng.bernoulli(spec.flip_prob);

    FrameSequence out;
    out.clip_id = seq.clip_id;
    out.source_indices = seq.source_indices;
    out.reversed = seq.reversed;
    out.augmented = true;
    out.aug = {top, left, side, flipped};
    out.frames.reserve(seq.frames.size());
    for (const auto& f : seq.frames) {
        if (!f.same_size(seq.frames[0]))
            throw DataError(DataError::Kind::dim_mismatch, "augment: frames differ in size");
        Image g = bilinear_resize(crop(f, top, left, side, side), spec.crop_size, spec.crop_size);
        if (flipped) g = hflip(g);
        out.frames.push_back(std::move(g));
    }
    return out;
}

// Video-Reverse: with probability p the sampled sequence is flipped in time,
// so reconstruction runs backward through the information channel.
inline FrameSequence vire_reverse(const FrameSequence& seq, double p, Rng& rng) {
    if (!rng.bernoulli(p)) return seq;
    FrameSequence out = seq;
    std::reverse(out.frames.begin(), out.frames.end());
    std::reverse(out.source_indices.begin(), out.source_indices.end());
    out.reversed = !out.reversed;
    return out;
}

// ---------------------------------------------------------------------------
// patchification

// Non-overlapping PxP patches in row-major grid order; inside a patch the
// flattening order is (row, column, channel). Checkpoint portability depends
// on this order, so it never changes.
template <typename T>
Tensor<T> patchify(const Image& img, std::int64_t patch) {
    if (img.height % patch != 0 || img.width % patch != 0)
        throw ShapeError("patchify: image " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " not divisible by patch " +
                         std::to_string(patch));
    const std::int64_t gh = img.height / patch, gw = img.width / patch;
    const std::int64_t L = gh * gw, D = patch * patch * img.channels;
    std::vector<T> out(static_cast<std::size_t>(L * D));
    std::size_t k = 0;
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx)
            for (std::int64_t py = 0; py < patch; ++py)
                for (std::int64_t px = 0; px < patch; ++px)
                    for (std::int64_t c = 0; c < img.channels; ++c)
                        out[k++] = static_cast<T>(img.at(gy * patch + py, gx * patch + px, c));
    return Tensor<T>::from_data({L, D}, std::move(out));
}

template <typename T>
Image unpatchify(const Tensor<T>& patches, std::int64_t height, std::int64_t width,
                 std::int64_t patch) {
    const std::int64_t gh = height / patch, gw = width / patch;
    if (patches.rank() != 2 || patches.dim(0) != gh * gw ||
        patches.dim(1) != patch * patch * 3 || height % patch != 0 || width % patch != 0)
        throw ShapeError("unpatchify: " + shape_str(patches.shape()) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width) + " with patch " +
                         std::to_string(patch));
    Image img(height, width, 3);
    const T* p = patches.data();
    std::size_t k = 0;
    for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx)
            for (std::int64_t py = 0; py < patch; ++py)
                for (std::int64_t px = 0; px < patch; ++px)
                    for (std::int64_t c = 0; c < 3; ++c)
                        img.at(gy * patch + py, gx * patch + px, c) = static_cast<float>(p[k++]);
    return img;
}

// Standardize each row to mean 0 / unit variance (population statistics); the
// reconstruction target transform.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, double eps = 1e-6) {
    if (x.rank() != 2) throw ShapeError("normalize_rows: expected rank 2");
    const std::int64_t n = x.dim(0), d = x.dim(1);
    std::vector<T> out(x.values().size());
    const T* xp = x.data();
    for (std::int64_t r = 0; r < n; ++r) {
        const T* row = xp + r * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (std::int64_t j = 0; j < d; ++j)
            out[static_cast<std::size_t>(r * d + j)] = (row[j] - mean) * inv;
    }
    return Tensor<T>::from_data({n, d}, std::move(out));
}

}  // namespace catmae
