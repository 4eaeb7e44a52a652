#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "catmae/dataio.hpp"
#include "catmae/error.hpp"
#include "catmae/masking.hpp"
#include "catmae/rng.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

struct ModelConfig {
    std::int64_t image_size = 224;
    std::int64_t patch = 16;
    std::int64_t n_frames = 3;
    std::int64_t enc_dim = 384, enc_depth = 12, enc_heads = 6;
    std::int64_t dec_dim = 192, dec_depth = 2;
    std::int64_t dec_heads = 0;  // 0 resolves to max(1, dec_dim / 64)
    double mlp_ratio = 4.0;
    MaskSpec mask{{0.95, 0.95}};
    // When true, a frame's own visible tokens also enter its cross-attention
    // context; by default context is previous frames only.
    bool context_includes_current = false;

    std::int64_t grid() const { return image_size / patch; }
    std::int64_t seq_len() const { return grid() * grid(); }
    std::int64_t patch_dim() const { return patch * patch * 3; }
    std::int64_t resolved_dec_heads() const {
        return dec_heads > 0 ? dec_heads : std::max<std::int64_t>(1, dec_dim / 64);
    }

    void validate() const {
        if (image_size < 1 || patch < 1 || image_size % patch != 0)
            throw ConfigError("ModelConfig: image size " + std::to_string(image_size) +
                              " not divisible by patch " + std::to_string(patch));
        if (n_frames < 2) throw ConfigError("ModelConfig: n_frames must be >= 2");
        if (static_cast<std::int64_t>(mask.ratios.size()) != n_frames - 1)
            throw ConfigError("ModelConfig: " + std::to_string(mask.ratios.size()) +
                              " mask ratios for " + std::to_string(n_frames) + " frames");
        mask.validate();
        if (enc_depth < 1 || dec_depth < 0)
            throw ConfigError("ModelConfig: bad depth");
        if (enc_dim < 4 || enc_dim % enc_heads != 0)
            throw ConfigError("ModelConfig: enc_dim " + std::to_string(enc_dim) +
                              " not divisible by " + std::to_string(enc_heads) + " heads");
        if (dec_dim < 4 || dec_dim % resolved_dec_heads() != 0)
            throw ConfigError("ModelConfig: dec_dim " + std::to_string(dec_dim) +
                              " not divisible by " + std::to_string(resolved_dec_heads()) +
                              " heads");
        if (enc_dim % 4 != 0 || dec_dim % 4 != 0)
            throw ConfigError("ModelConfig: dims must be divisible by 4 for 2-D sin-cos");
        if (mlp_ratio <= 0.0) throw ConfigError("ModelConfig: mlp_ratio must be positive");
    }
};

// ---------------------------------------------------------------------------
// fixed 2-D sin-cos position tables

namespace detail {

// [n, dim] 1-D table: row p = [sin(p*w_0..), cos(p*w_0..)], w_i = 10000^{-i/(dim/2)}.
inline std::vector<double> sincos_1d(std::int64_t dim, std::int64_t n) {
    const std::int64_t half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(n * dim));
    for (std::int64_t p = 0; p < n; ++p)
        for (std::int64_t i = 0; i < half; ++i) {
            const double omega =
                std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
            const double v = static_cast<double>(p) * omega;
            out[static_cast<std::size_t>(p * dim + i)] = std::sin(v);
            out[static_cast<std::size_t>(p * dim + half + i)] = std::cos(v);
        }
    return out;
}

}  // namespace detail

// [L, dim] over a grid_h x grid_w patch grid in row-major order; the first
// dim/2 columns encode the row coordinate, the rest the column coordinate.
template <typename T>
Tensor<T> sincos_pos_table_2d(std::int64_t grid_h, std::int64_t grid_w, std::int64_t dim) {
    if (dim % 4 != 0) throw ConfigError("sincos table needs dim divisible by 4");
    const std::int64_t half = dim / 2;
    auto ytab = detail::sincos_1d(half, grid_h);
    auto xtab = detail::sincos_1d(half, grid_w);
    std::vector<T> out(static_cast<std::size_t>(grid_h * grid_w * dim));
    std::size_t k = 0;
    for (std::int64_t y = 0; y < grid_h; ++y)
        for (std::int64_t x = 0; x < grid_w; ++x) {
            for (std::int64_t j = 0; j < half; ++j)
                out[k++] = static_cast<T>(ytab[static_cast<std::size_t>(y * half + j)]);
            for (std::int64_t j = 0; j < half; ++j)
                out[k++] = static_cast<T>(xtab[static_cast<std::size_t>(x * half + j)]);
        }
    return Tensor<T>::from_data({grid_h * grid_w, dim}, std::move(out));
}

// Same table with a zero row prepended for the [CLS] slot.
template <typename T>
Tensor<T> sincos_pos_table_2d_with_cls(std::int64_t grid_h, std::int64_t grid_w,
                                       std::int64_t dim) {
    auto base = sincos_pos_table_2d<T>(grid_h, grid_w, dim);
    std::vector<T> out(static_cast<std::size_t>((grid_h * grid_w + 1) * dim), T(0));
    std::copy(base.data(), base.data() + base.numel(),
              out.begin() + static_cast<std::ptrdiff_t>(dim));
    return Tensor<T>::from_data({grid_h * grid_w + 1, dim}, std::move(out));
}

// ---------------------------------------------------------------------------
// parameters

template <typename T>
struct LnParams {
    Tensor<T> g, b;
};

template <typename T>
struct AttnParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MlpParams {
    Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncBlock {
    LnParams<T> ln1;
    AttnParams<T> attn;
    LnParams<T> ln2;
    MlpParams<T> mlp;
};

template <typename T>
struct DecBlock {
    LnParams<T> ln1;
    AttnParams<T> cross;
    LnParams<T> ln2;
    AttnParams<T> self_attn;
    LnParams<T> ln3;
    MlpParams<T> mlp;
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;

    Tensor<T> patch_proj_w, patch_proj_b;
    Tensor<T> cls_token;  // [1, d_e]
    Tensor<T> enc_pos;    // [L+1, d_e], fixed, not trained
    std::vector<EncBlock<T>> enc;
    LnParams<T> enc_norm;
    Tensor<T> enc2dec_w, enc2dec_b;
    Tensor<T> mask_token;  // [d_d]
    Tensor<T> dec_pos;     // [L, d_d], fixed, not trained
    std::vector<DecBlock<T>> dec;
    LnParams<T> dec_norm;
    Tensor<T> head_w, head_b;

    struct Entry {
        std::string name;
        Tensor<T> tensor;  // shared handle onto the structured field
        bool decay;
    };
    std::vector<Entry> entries;

    Tensor<T>& find(const std::string& name) {
        for (auto& e : entries)
            if (e.name == name) return e.tensor;
        throw ConfigError("unknown parameter: " + name);
    }
    const Tensor<T>& find(const std::string& name) const {
        return const_cast<ModelParams*>(this)->find(name);
    }

    std::int64_t numel() const {
        std::int64_t n = 0;
        for (const auto& e : entries) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries) e.tensor.zero_grad();
    }

    bool all_finite() const {
        for (const auto& e : entries)
            if (!catmae::all_finite(e.tensor)) return false;
        return true;
    }

    static ModelParams init(const ModelConfig& cfg, Rng& rng);
};

namespace detail {

template <typename T>
Tensor<T> init_weight(Shape shape, Rng& rng, const std::string& name) {
    Rng r = rng.child(name);
    auto t = trunc_normal<T>(std::move(shape), r, 0.02);
    t.set_requires_grad(true);
    return t;
}

template <typename T>
Tensor<T> init_zeros(Shape shape) {
    auto t = Tensor<T>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

template <typename T>
Tensor<T> init_ones(Shape shape) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)), T(1));
    auto t = Tensor<T>::from_data(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::int64_t L = cfg.seq_len(), de = cfg.enc_dim, dd = cfg.dec_dim;
    const std::int64_t pd = cfg.patch_dim();
    ModelParams<T> p;
    p.cfg = cfg;

    auto reg = [&p](const std::string& name, Tensor<T>& t, bool decay) {
        p.entries.push_back({name, t, decay});
    };
    auto reg_ln = [&](const std::string& prefix, LnParams<T>& ln, std::int64_t dim) {
        ln.g = detail::init_ones<T>({dim});
        ln.b = detail::init_zeros<T>({dim});
        reg(prefix + ".g", ln.g, false);
        reg(prefix + ".b", ln.b, false);
    };
    auto reg_attn = [&](const std::string& prefix, AttnParams<T>& a, std::int64_t dim) {
        const std::array<std::tuple<const char*, Tensor<T>*, Tensor<T>*>, 4> parts{
            {{"q", &a.wq, &a.bq},
             {"k", &a.wk, &a.bk},
             {"v", &a.wv, &a.bv},
             {"o", &a.wo, &a.bo}}};
        for (auto [suffix, w, b] : parts) {
            *w = detail::init_weight<T>({dim, dim}, rng, prefix + ".w" + suffix);
            *b = detail::init_zeros<T>({dim});
            reg(prefix + ".w" + suffix, *w, true);
            reg(prefix + ".b" + suffix, *b, false);
        }
    };
    auto reg_mlp = [&](const std::string& prefix, MlpParams<T>& m, std::int64_t dim) {
        const auto hidden = static_cast<std::int64_t>(
            std::llround(static_cast<double>(dim) * cfg.mlp_ratio));
        m.w1 = detail::init_weight<T>({dim, hidden}, rng, prefix + ".w1");
        m.b1 = detail::init_zeros<T>({hidden});
        m.w2 = detail::init_weight<T>({hidden, dim}, rng, prefix + ".w2");
        m.b2 = detail::init_zeros<T>({dim});
        reg(prefix + ".w1", m.w1, true);
        reg(prefix + ".b1", m.b1, false);
        reg(prefix + ".w2", m.w2, true);
        reg(prefix + ".b2", m.b2, false);
    };

    p.patch_proj_w = detail::init_weight<T>({pd, de}, rng, "patch_proj.w");
    p.patch_proj_b = detail::init_zeros<T>({de});
    reg("patch_proj.w", p.patch_proj_w, true);
    reg("patch_proj.b", p.patch_proj_b, false);
    p.cls_token = detail::init_weight<T>({1, de}, rng, "cls_token");
    reg("cls_token", p.cls_token, false);
    p.enc_pos = sincos_pos_table_2d_with_cls<T>(cfg.grid(), cfg.grid(), de);

    p.enc.resize(static_cast<std::size_t>(cfg.enc_depth));
    for (std::int64_t i = 0; i < cfg.enc_depth; ++i) {
        auto& blk = p.enc[static_cast<std::size_t>(i)];
        const std::string pre = "enc." + std::to_string(i);
        reg_ln(pre + ".ln1", blk.ln1, de);
        reg_attn(pre + ".attn", blk.attn, de);
        reg_ln(pre + ".ln2", blk.ln2, de);
        reg_mlp(pre + ".mlp", blk.mlp, de);
    }
    reg_ln("enc_norm", p.enc_norm, de);

    p.enc2dec_w = detail::init_weight<T>({de, dd}, rng, "enc2dec.w");
    p.enc2dec_b = detail::init_zeros<T>({dd});
    reg("enc2dec.w", p.enc2dec_w, true);
    reg("enc2dec.b", p.enc2dec_b, false);
    {
        Rng r = rng.child("mask_token");
        p.mask_token = trunc_normal<T>({dd}, r, 0.02);
        p.mask_token.set_requires_grad(true);
        reg("mask_token", p.mask_token, false);
    }
    p.dec_pos = sincos_pos_table_2d<T>(cfg.grid(), cfg.grid(), dd);

    p.dec.resize(static_cast<std::size_t>(cfg.dec_depth));
    for (std::int64_t i = 0; i < cfg.dec_depth; ++i) {
        auto& blk = p.dec[static_cast<std::size_t>(i)];
        const std::string pre = "dec." + std::to_string(i);
        reg_ln(pre + ".ln1", blk.ln1, dd);
        reg_attn(pre + ".cross", blk.cross, dd);
        reg_ln(pre + ".ln2", blk.ln2, dd);
        reg_attn(pre + ".self", blk.self_attn, dd);
        reg_ln(pre + ".ln3", blk.ln3, dd);
        reg_mlp(pre + ".mlp", blk.mlp, dd);
    }
    reg_ln("dec_norm", p.dec_norm, dd);

    p.head_w = detail::init_weight<T>({dd, pd}, rng, "head.w");
    p.head_b = detail::init_zeros<T>({pd});
    reg("head.w", p.head_w, true);
    reg("head.b", p.head_b, false);
    return p;
}

// ---------------------------------------------------------------------------
// network pieces

inline constexpr double kLnEps = 1e-6;

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const AttnParams<T>& p, std::int64_t heads,
                               Tensor<T>* probs_out = nullptr) {
    auto q = split_heads(linear(q_in, p.wq, p.bq), heads);
    auto k = split_heads(linear(kv_in, p.wk, p.bk), heads);
    auto v = split_heads(linear(kv_in, p.wv, p.bv), heads);
    const std::int64_t dh = q.dim(2);
    auto scores = scale(matmul(q, transpose_last2(k)),
                        1.0 / std::sqrt(static_cast<double>(dh)));
    auto probs = softmax(scores, -1);
    if (probs_out) *probs_out = probs;
    return linear(merge_heads(matmul(probs, v)), p.wo, p.bo);
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& m) {
    return linear(gelu(linear(x, m.w1, m.b1)), m.w2, m.b2);
}

// Patch-embed one frame: linear projection of patches, [CLS] prepended, fixed
// spatial position table added. No temporal information enters here.
template <typename T>
Tensor<T> embed_frame(const Image& frame, const ModelParams<T>& params) {
    const auto& cfg = params.cfg;
    if (frame.height != cfg.image_size || frame.width != cfg.image_size)
        throw ShapeError("embed_frame: frame " + std::to_string(frame.height) + "x" +
                         std::to_string(frame.width) + " but model expects " +
                         std::to_string(cfg.image_size));
    auto patches = patchify<T>(frame, cfg.patch);
    auto tokens = linear(patches, params.patch_proj_w, params.patch_proj_b);
    auto with_cls = concat_rows<T>({params.cls_token, tokens});
    return add(with_cls, params.enc_pos);
}

// Pre-norm ViT on whatever token set it is given; identical parameters for
// every frame. `layers` = -1 runs every block plus the final norm; a value in
// [0, depth) stops after that many blocks and skips the final norm.
template <typename T>
Tensor<T> encode_frame(const Tensor<T>& tokens, const ModelParams<T>& params,
                       std::int64_t layers = -1) {
    const auto depth = static_cast<std::int64_t>(params.enc.size());
    if (layers < -1 || layers > depth)
        throw ConfigError("encode_frame: layer index " + std::to_string(layers) +
                          " out of range for depth " + std::to_string(depth));
    const std::int64_t run = layers == -1 ? depth : layers;
    auto x = tokens;
    for (std::int64_t i = 0; i < run; ++i) {
        const auto& blk = params.enc[static_cast<std::size_t>(i)];
        auto y = layer_norm(x, blk.ln1.g, blk.ln1.b, kLnEps);
        x = add(x, multi_head_attention(y, y, blk.attn, params.cfg.enc_heads));
        x = add(x, mlp_forward(layer_norm(x, blk.ln2.g, blk.ln2.b, kLnEps), blk.mlp));
    }
    if (layers == -1 || layers == depth)
        x = layer_norm(x, params.enc_norm.g, params.enc_norm.b, kLnEps);
    return x;
}

template <typename T>
struct AttnCapture {
    std::int64_t frame = -1;  // reconstructed frame index to record (0-based)
    Tensor<T> probs;          // last decoder block cross-attention [H, L, C]
    std::vector<std::int64_t> context_sizes;  // context tokens contributed per frame
};

// Decode frame t (0-based, t >= 1). own_latents: encoder output for frame t
// including the CLS row; context_latents: concatenated encoder patch latents
// of frames 0..t-1 with context_positions giving each row's patch index.
template <typename T>
Tensor<T> decode_frame(std::int64_t t, const Tensor<T>& own_latents,
                       const Tensor<T>& context_latents,
                       const std::vector<std::int64_t>& context_positions, const MaskPlan& plan,
                       const ModelParams<T>& params, AttnCapture<T>* capture = nullptr) {
    const auto& cfg = params.cfg;
    if (t < 1)
        throw ConfigError("decode_frame: frame " + std::to_string(t) +
                          " is never reconstructed");
    if (context_latents.dim(0) != static_cast<std::int64_t>(context_positions.size()))
        throw ShapeError("decode_frame: context rows and positions disagree");
    const std::int64_t L = cfg.seq_len();
    const auto& vis = plan.visible[static_cast<std::size_t>(t)];
    const auto& msk = plan.masked[static_cast<std::size_t>(t)];

    // Own visible patch latents (CLS dropped), projected to decoder width,
    // mask tokens filled in, spatial positions added.
    auto own_patches = slice_rows(own_latents, 1, own_latents.dim(0));
    auto projected = linear(own_patches, params.enc2dec_w, params.enc2dec_b);
    auto full = scatter_rows_with_fill(projected, params.mask_token, vis, L);
    full = add(full, params.dec_pos);

    // Context keys/values: same projection, plus the decoder position table
    // rows for each context token's patch index.
    auto ctx = linear(context_latents, params.enc2dec_w, params.enc2dec_b);
    ctx = add(ctx, gather_rows(params.dec_pos, context_positions));

    const std::int64_t heads = cfg.resolved_dec_heads();
    auto x = full;
    for (std::size_t i = 0; i < params.dec.size(); ++i) {
        const auto& blk = params.dec[i];
        Tensor<T> probs;
        const bool record = capture && i + 1 == params.dec.size();
        x = add(x, multi_head_attention(layer_norm(x, blk.ln1.g, blk.ln1.b, kLnEps), ctx,
                                        blk.cross, heads, record ? &probs : nullptr));
        if (record) capture->probs = probs;
        auto y = layer_norm(x, blk.ln2.g, blk.ln2.b, kLnEps);
        x = add(x, multi_head_attention(y, y, blk.self_attn, heads));
        x = add(x, mlp_forward(layer_norm(x, blk.ln3.g, blk.ln3.b, kLnEps), blk.mlp));
    }
    x = layer_norm(x, params.dec_norm.g, params.dec_norm.b, kLnEps);
    if (msk.empty()) return Tensor<T>::from_data({0, cfg.patch_dim()}, {});
    return linear(gather_rows(x, msk), params.head_w, params.head_b);
}

template <typename T>
struct ReconstructionBatch {
    std::vector<Tensor<T>> predictions;   // per frame 1..N-1: [|M_t|, P*P*3]
    std::vector<Tensor<T>> targets;       // same shapes, constants
    std::vector<Tensor<T>> frame_losses;  // scalars, 0 when the mask set is empty
    AttnCapture<T> attn;
};

// Full pass: embed all frames, encode visible tokens per frame, decode frames
// 1..N-1 against accumulated context, build per-patch normalized targets.
// target_seq, when given, supplies the reconstruction targets in place of the
// input frames (same geometry required).
template <typename T>
ReconstructionBatch<T> forward(const FrameSequence& seq, const MaskPlan& plan,
                               const ModelParams<T>& params,
                               const FrameSequence* target_seq = nullptr,
                               std::int64_t capture_frame = -1) {
    const auto& cfg = params.cfg;
    if (seq.n_frames() != cfg.n_frames)
        throw ShapeError("forward: sequence has " + std::to_string(seq.n_frames()) +
                         " frames, model expects " + std::to_string(cfg.n_frames));
    if (plan.n_frames() != cfg.n_frames)
        throw ShapeError("forward: mask plan covers " + std::to_string(plan.n_frames()) +
                         " frames, model expects " + std::to_string(cfg.n_frames));
    if (target_seq && target_seq->n_frames() != seq.n_frames())
        throw ShapeError("forward: target sequence length mismatch");

    const std::int64_t N = cfg.n_frames;
    std::vector<Tensor<T>> patch_latents(static_cast<std::size_t>(N));
    std::vector<Tensor<T>> frame_latents(static_cast<std::size_t>(N));
    for (std::int64_t t = 0; t < N; ++t) {
        auto tokens = embed_frame(seq.frames[static_cast<std::size_t>(t)], params);
        std::vector<std::int64_t> keep{0};
        for (auto v : plan.visible[static_cast<std::size_t>(t)]) keep.push_back(v + 1);
        auto latents = encode_frame(gather_rows(tokens, keep), params);
        frame_latents[static_cast<std::size_t>(t)] = latents;
        patch_latents[static_cast<std::size_t>(t)] = slice_rows(latents, 1, latents.dim(0));
    }

    ReconstructionBatch<T> out;
    out.attn.frame = capture_frame;
    for (std::int64_t t = 1; t < N; ++t) {
        std::vector<Tensor<T>> ctx_parts;
        std::vector<std::int64_t> ctx_pos;
        for (std::int64_t s = 0; s < t; ++s) {
            ctx_parts.push_back(patch_latents[static_cast<std::size_t>(s)]);
            for (auto v : plan.visible[static_cast<std::size_t>(s)]) ctx_pos.push_back(v);
        }
        if (cfg.context_includes_current) {
            ctx_parts.push_back(patch_latents[static_cast<std::size_t>(t)]);
            for (auto v : plan.visible[static_cast<std::size_t>(t)]) ctx_pos.push_back(v);
        }
        auto ctx = concat_rows(ctx_parts);
        AttnCapture<T>* cap = (capture_frame == t) ? &out.attn : nullptr;
        auto pred = decode_frame(t, frame_latents[static_cast<std::size_t>(t)], ctx, ctx_pos,
                                 plan, params, cap);
        if (cap) {
            cap->context_sizes.clear();
            for (std::int64_t s = 0; s < t; ++s)
                cap->context_sizes.push_back(static_cast<std::int64_t>(
                    plan.visible[static_cast<std::size_t>(s)].size()));
            if (cfg.context_includes_current)
                cap->context_sizes.push_back(static_cast<std::int64_t>(
                    plan.visible[static_cast<std::size_t>(t)].size()));
        }

        const Image& tgt_frame =
            (target_seq ? *target_seq : seq).frames[static_cast<std::size_t>(t)];
        Tensor<T> target;
        {
            NoGradGuard ng;
            auto tgt_patches = patchify<T>(tgt_frame, cfg.patch);
            auto masked_rows = gather_rows(tgt_patches, plan.masked[static_cast<std::size_t>(t)]);
            target = normalize_rows(masked_rows);
        }
        out.predictions.push_back(pred);
        out.targets.push_back(target);
        if (plan.masked[static_cast<std::size_t>(t)].empty())
            out.frame_losses.push_back(Tensor<T>::scalar(T(0)));
        else
            out.frame_losses.push_back(mse(pred, target));
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention inspection

template <typename T>
struct CrossAttentionMaps {
    // One map per context frame, each over the full patch grid; positions a
    // context frame did not contribute stay 0.
    std::vector<std::vector<T>> per_frame;
    std::vector<T> frame_share;  // total attention mass per context frame
};

// Head-averaged last-decoder-layer cross-attention row for one masked query
// patch of reconstructed frame t, split per context frame.
template <typename T>
CrossAttentionMaps<T> extract_cross_attention(const FrameSequence& seq, const MaskPlan& plan,
                                              const ModelParams<T>& params,
                                              std::int64_t query_index, std::int64_t t) {
    const auto& cfg = params.cfg;
    if (cfg.dec_depth < 1)
        throw ConfigError("extract_cross_attention: decoder has no blocks");
    if (t < 1 || t >= cfg.n_frames)
        throw ConfigError("extract_cross_attention: bad frame " + std::to_string(t));
    const auto& msk = plan.masked[static_cast<std::size_t>(t)];
    if (!std::binary_search(msk.begin(), msk.end(), query_index))
        throw ConfigError("extract_cross_attention: query patch " +
                          std::to_string(query_index) + " is visible in frame " +
                          std::to_string(t));

    NoGradGuard ng;
    auto batch = forward(seq, plan, params, nullptr, t);
    const auto& probs = batch.attn.probs;  // [H, L, C]
    const std::int64_t H = probs.dim(0), C = probs.dim(2);
    const T* pd = probs.data();

    std::vector<T> row(static_cast<std::size_t>(C), T(0));
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t c = 0; c < C; ++c)
            row[static_cast<std::size_t>(c)] +=
                pd[(h * probs.dim(1) + query_index) * C + c] / static_cast<T>(H);

    CrossAttentionMaps<T> maps;
    std::int64_t offset = 0;
    for (std::size_t s = 0; s < batch.attn.context_sizes.size(); ++s) {
        const auto n = batch.attn.context_sizes[s];
        // Entry s covers context frame s except that an appended own-frame
        // entry (context_includes_current) reuses frame t's visible list.
        const std::size_t frame_idx = (s < static_cast<std::size_t>(t))
                                          ? s
                                          : static_cast<std::size_t>(t);
        const auto& vis = plan.visible[frame_idx];
        std::vector<T> grid(static_cast<std::size_t>(cfg.seq_len()), T(0));
        T share = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            const T w = row[static_cast<std::size_t>(offset + j)];
            grid[static_cast<std::size_t>(vis[static_cast<std::size_t>(j)])] = w;
            share += w;
        }
        maps.per_frame.push_back(std::move(grid));
        maps.frame_share.push_back(share);
        offset += n;
    }
    return maps;
}

}  // namespace catmae
