#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/rng.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

// Mask ratios for frames 2..N; frame 1 is always fully visible.
struct MaskSpec {
    std::vector<double> ratios;

    std::int64_t n_frames() const { return static_cast<std::int64_t>(ratios.size()) + 1; }

    void validate() const {
        for (double r : ratios)
            if (!(r >= 0.0 && r < 1.0))
                throw ConfigError("MaskSpec: ratio " + std::to_string(r) + " not in [0,1)");
    }
};

struct MaskPlan {
    // visible[t] and masked[t] partition 0..L-1 per frame, both sorted ascending.
    std::vector<std::vector<std::int64_t>> visible;
    std::vector<std::vector<std::int64_t>> masked;

    std::int64_t n_frames() const { return static_cast<std::int64_t>(visible.size()); }
};

inline std::int64_t visible_count(std::int64_t L, double ratio) {
    return std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::floor(static_cast<double>(L) * (1.0 - ratio))));
}

// Frame 1 fully visible; each later frame keeps a uniform random subset of
// max(1, floor(L*(1-rho))) patch indices, drawn via an independent per-frame
// permutation.
inline MaskPlan make_mask_plan(std::int64_t L, const MaskSpec& spec, Rng& rng) {
    if (L < 1) throw ConfigError("make_mask_plan: L must be >= 1");
    spec.validate();
    MaskPlan plan;
    plan.visible.resize(static_cast<std::size_t>(spec.n_frames()));
    plan.masked.resize(static_cast<std::size_t>(spec.n_frames()));
    plan.visible[0].resize(static_cast<std::size_t>(L));
    std::iota(plan.visible[0].begin(), plan.visible[0].end(), 0);
    for (std::size_t t = 1; t < plan.visible.size(); ++t) {
        const std::int64_t keep = visible_count(L, spec.ratios[t - 1]);
        auto perm = rng.permutation(L);
        auto& vis = plan.visible[t];
        auto& msk = plan.masked[t];
        vis.assign(perm.begin(), perm.begin() + keep);
        msk.assign(perm.begin() + keep, perm.end());
        std::sort(vis.begin(), vis.end());
        std::sort(msk.begin(), msk.end());
    }
    return plan;
}

template <typename T>
Tensor<T> gather_visible(const Tensor<T>& tokens, const MaskPlan& plan, std::int64_t t) {
    if (t < 0 || t >= plan.n_frames())
        throw ShapeError("gather_visible: frame " + std::to_string(t) + " outside plan of " +
                         std::to_string(plan.n_frames()) + " frames");
    return gather_rows(tokens, plan.visible[static_cast<std::size_t>(t)]);
}

// Rows at V_t are the visible tokens in order; every other row is the shared
// mask token. Gradients flow to both inputs.
template <typename T>
Tensor<T> scatter_with_mask_tokens(const Tensor<T>& visible, const Tensor<T>& mask_token,
                                   const MaskPlan& plan, std::int64_t t, std::int64_t L) {
    if (t < 0 || t >= plan.n_frames())
        throw ShapeError("scatter_with_mask_tokens: frame " + std::to_string(t) +
                         " outside plan of " + std::to_string(plan.n_frames()) + " frames");
    const auto& vis = plan.visible[static_cast<std::size_t>(t)];
    if (visible.dim(0) != static_cast<std::int64_t>(vis.size()))
        throw ShapeError("scatter_with_mask_tokens: " + std::to_string(visible.dim(0)) +
                         " rows for " + std::to_string(vis.size()) + " visible indices");
    return scatter_rows_with_fill(visible, mask_token, vis, L);
}

}  // namespace catmae
