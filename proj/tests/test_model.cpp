#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "catmae/gradcheck.hpp"
#include "catmae/model.hpp"
#include "catmae/synthetic.hpp"

using namespace catmae;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch = 4;
    cfg.n_frames = 3;
    cfg.enc_dim = 16;
    cfg.enc_depth = 2;
    cfg.enc_heads = 2;
    cfg.dec_dim = 8;
    cfg.dec_depth = 1;
    cfg.mask = MaskSpec{{0.5, 0.5}};
    return cfg;
}

Image noise_frame(std::int64_t size, Rng& rng) {
    Image img(size, size, 3);
    for (auto& v : img.pixels) v = float(rng.uniform());
    return img;
}

FrameSequence noise_sequence(std::int64_t n, std::int64_t size, Rng& rng) {
    FrameSequence seq;
    for (std::int64_t i = 0; i < n; ++i) seq.frames.push_back(noise_frame(size, rng));
    seq.source_indices.resize(std::size_t(n));
    return seq;
}

// Randomize the bias-like parameters so oracle comparisons exercise them.
template <typename T>
void jitter_all(ModelParams<T>& params, Rng& rng) {
    for (auto& e : params.entries) {
        Rng r = rng.child(e.name);
        for (auto& v : e.tensor.values()) v += T(r.uniform(-0.05, 0.05));
    }
}

}  // namespace

TEST(PosTable, MatchesClosedFormOracle) {
    const std::int64_t gh = 4, gw = 4, dim = 16;
    auto tab = sincos_pos_table_2d<double>(gh, gw, dim);
    ASSERT_EQ(tab.dim(0), 16);
    ASSERT_EQ(tab.dim(1), dim);
    const std::int64_t half = dim / 2, quarter = dim / 4;
    for (std::int64_t y = 0; y < gh; ++y)
        for (std::int64_t x = 0; x < gw; ++x) {
            const double* row = tab.data() + (y * gw + x) * dim;
            for (std::int64_t j = 0; j < quarter; ++j) {
                const double omega = std::pow(10000.0, -double(j) / double(quarter));
                EXPECT_DOUBLE_EQ(row[j], std::sin(double(y) * omega));
                EXPECT_DOUBLE_EQ(row[quarter + j], std::cos(double(y) * omega));
                EXPECT_DOUBLE_EQ(row[half + j], std::sin(double(x) * omega));
                EXPECT_DOUBLE_EQ(row[half + quarter + j], std::cos(double(x) * omega));
            }
        }
}

TEST(PosTable, ClsRowIsZero) {
    auto tab = sincos_pos_table_2d_with_cls<double>(4, 4, 16);
    ASSERT_EQ(tab.dim(0), 17);
    for (std::int64_t j = 0; j < 16; ++j) EXPECT_EQ(tab.data()[j], 0.0);
    auto base = sincos_pos_table_2d<double>(4, 4, 16);
    for (std::int64_t i = 0; i < base.numel(); ++i)
        EXPECT_EQ(tab.data()[16 + i], base.data()[i]);
}

TEST(EmbedFrame, ZeroFrameYieldsPositionEmbeddings) {
    auto cfg = micro_config();
    Rng rng(1, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Image zero(16, 16, 3);
    auto tokens = embed_frame(zero, params);
    ASSERT_EQ(tokens.dim(0), 17);
    ASSERT_EQ(tokens.dim(1), 16);
    // Patch rows: 0 * W + 0 bias + pos = pos.
    for (std::int64_t i = 1; i < 17; ++i)
        for (std::int64_t j = 0; j < 16; ++j)
            EXPECT_EQ(tokens.data()[i * 16 + j], params.enc_pos.data()[i * 16 + j]);
    // CLS row: cls token + zero pos row.
    for (std::int64_t j = 0; j < 16; ++j)
        EXPECT_EQ(tokens.data()[j], params.cls_token.data()[j]);
}

TEST(EmbedFrame, DeterministicForIdenticalFrames) {
    auto cfg = micro_config();
    Rng rng(2, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(3, 0);
    auto img = noise_frame(16, irng);
    auto a = embed_frame(img, params);
    auto b = embed_frame(img, params);
    EXPECT_EQ(a.values(), b.values());
}

TEST(EmbedFrame, SizeMismatchThrows) {
    auto cfg = micro_config();
    Rng rng(2, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Image small(8, 8, 3);
    EXPECT_THROW(embed_frame(small, params), ShapeError);
}

TEST(EncodeFrame, PermutationEquivariantOverPatchTokens) {
    auto cfg = micro_config();
    Rng rng(5, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    jitter_all(params, rng);
    Rng irng(7, 0);
    auto img = noise_frame(16, irng);
    NoGradGuard ng;
    auto tokens = embed_frame(img, params);

    std::vector<std::int64_t> keep = {0, 3, 7, 11, 14};
    auto lat = encode_frame(gather_rows(tokens, keep), params);
    std::vector<std::int64_t> permuted = {0, 11, 3, 14, 7};
    auto lat_p = encode_frame(gather_rows(tokens, permuted), params);

    // Row for patch 3 sits at row 1 originally and row 2 after permutation.
    // Reordered softmax reductions shift the last bits, hence the tolerance.
    auto expect_rows_near = [&](std::int64_t a, std::int64_t b) {
        for (std::int64_t j = 0; j < 16; ++j)
            EXPECT_NEAR(lat.data()[a * 16 + j], lat_p.data()[b * 16 + j], 1e-12)
                << "rows " << a << "/" << b << " col " << j;
    };
    expect_rows_near(1, 2);
    expect_rows_near(2, 4);
    expect_rows_near(3, 1);
    expect_rows_near(4, 3);
    expect_rows_near(0, 0);
}

TEST(EncodeFrame, BitIdenticalAcrossCalls) {
    auto cfg = micro_config();
    Rng rng(6, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(8, 0);
    auto img = noise_frame(16, irng);
    NoGradGuard ng;
    auto tokens = embed_frame(img, params);
    auto a = encode_frame(tokens, params);
    auto b = encode_frame(tokens, params);
    EXPECT_EQ(a.values(), b.values());
}

TEST(EncodeFrame, MatchesHandRolledAttentionOracle) {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 4;
    cfg.n_frames = 2;
    cfg.enc_dim = 4;
    cfg.enc_depth = 1;
    cfg.enc_heads = 1;
    cfg.dec_dim = 4;
    cfg.dec_depth = 1;
    cfg.mask = MaskSpec{{0.5}};
    Rng rng(11, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    jitter_all(params, rng);

    const std::int64_t n = 3, d = 4, hidden = 16;
    Rng irng(13, 0);
    std::vector<double> xv(std::size_t(n * d));
    for (auto& v : xv) v = irng.uniform(-1.0, 1.0);
    auto x = Tensor<double>::from_data({n, d}, xv);
    NoGradGuard ng;
    auto got = encode_frame(x, params);

    // Independent reimplementation with plain loops.
    const auto& blk = params.enc[0];
    auto ln = [&](const std::vector<double>& in, const Tensor<double>& g,
                  const Tensor<double>& b) {
        std::vector<double> out(in.size());
        for (std::int64_t i = 0; i < n; ++i) {
            double mu = 0, var = 0;
            for (std::int64_t j = 0; j < d; ++j) mu += in[std::size_t(i * d + j)];
            mu /= double(d);
            for (std::int64_t j = 0; j < d; ++j) {
                const double c = in[std::size_t(i * d + j)] - mu;
                var += c * c;
            }
            var /= double(d);
            const double inv = 1.0 / std::sqrt(var + 1e-6);
            for (std::int64_t j = 0; j < d; ++j)
                out[std::size_t(i * d + j)] =
                    g.data()[j] * (in[std::size_t(i * d + j)] - mu) * inv + b.data()[j];
        }
        return out;
    };
    auto matvec = [](const std::vector<double>& a, const Tensor<double>& w,
                     const Tensor<double>& b, std::int64_t rows, std::int64_t din,
                     std::int64_t dout) {
        std::vector<double> out(std::size_t(rows * dout));
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < dout; ++j) {
                double s = b.data()[j];
                for (std::int64_t k = 0; k < din; ++k)
                    s += a[std::size_t(i * din + k)] * w.data()[k * dout + j];
                out[std::size_t(i * dout + j)] = s;
            }
        return out;
    };

    auto y = ln(xv, blk.ln1.g, blk.ln1.b);
    auto q = matvec(y, blk.attn.wq, blk.attn.bq, n, d, d);
    auto k = matvec(y, blk.attn.wk, blk.attn.bk, n, d, d);
    auto v = matvec(y, blk.attn.wv, blk.attn.bv, n, d, d);
    std::vector<double> attn_out(std::size_t(n * d), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> scores(static_cast<std::size_t>(n));
        double mx = -1e300;
        for (std::int64_t j = 0; j < n; ++j) {
            double s = 0;
            for (std::int64_t c = 0; c < d; ++c)
                s += q[std::size_t(i * d + c)] * k[std::size_t(j * d + c)];
            scores[std::size_t(j)] = s / std::sqrt(double(d));
            mx = std::max(mx, scores[std::size_t(j)]);
        }
        double z = 0;
        for (auto& s : scores) {
            s = std::exp(s - mx);
            z += s;
        }
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t c = 0; c < d; ++c)
                attn_out[std::size_t(i * d + c)] +=
                    (scores[std::size_t(j)] / z) * v[std::size_t(j * d + c)];
    }
    auto proj = matvec(attn_out, blk.attn.wo, blk.attn.bo, n, d, d);
    std::vector<double> x1(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) x1[i] = xv[i] + proj[i];

    auto y2 = ln(x1, blk.ln2.g, blk.ln2.b);
    auto h = matvec(y2, blk.mlp.w1, blk.mlp.b1, n, d, hidden);
    for (auto& u : h) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    auto m = matvec(h, blk.mlp.w2, blk.mlp.b2, n, hidden, d);
    std::vector<double> x2(x1.size());
    for (std::size_t i = 0; i < x1.size(); ++i) x2[i] = x1[i] + m[i];
    auto want = ln(x2, params.enc_norm.g, params.enc_norm.b);

    for (std::size_t i = 0; i < want.size(); ++i)
        EXPECT_NEAR(got.data()[i], want[i], 1e-12) << "element " << i;
}

TEST(DecodeFrame, FirstFrameRejected) {
    auto cfg = micro_config();
    Rng rng(15, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    auto dummy = Tensor<double>::zeros({3, 16});
    MaskPlan plan;
    Rng mrng(1, 0);
    plan = make_mask_plan(16, cfg.mask, mrng);
    EXPECT_THROW(decode_frame(0, dummy, dummy, {0, 1, 2}, plan, params), ConfigError);
}

TEST(DecodeFrame, TemporalCausality) {
    auto cfg = micro_config();
    Rng rng(17, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(19, 0);
    auto seq = noise_sequence(3, 16, irng);
    auto seq2 = seq;
    for (auto& v : seq2.frames[2].pixels) v = 1.0f - v;  // perturb only frame 3

    Rng mrng(21, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    NoGradGuard ng;
    auto a = forward(seq, plan, params);
    auto b = forward(seq2, plan, params);
    // Frame-2 reconstruction (index 1) never sees frame 3.
    EXPECT_EQ(a.predictions[0].values(), b.predictions[0].values());
    // Frame-3 reconstruction does change.
    EXPECT_NE(a.predictions[1].values(), b.predictions[1].values());
}

TEST(DecodeFrame, TwoFrameSpecialCaseContextIsFrameOneOnly) {
    ModelConfig cfg = micro_config();
    cfg.n_frames = 2;
    cfg.mask = MaskSpec{{0.5}};
    Rng rng(23, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(25, 0);
    auto seq = noise_sequence(2, 16, irng);
    Rng mrng(27, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    NoGradGuard ng;
    auto batch = forward(seq, plan, params, nullptr, 1);
    ASSERT_EQ(batch.attn.context_sizes.size(), 1u);
    EXPECT_EQ(batch.attn.context_sizes[0], 16);
    EXPECT_EQ(batch.attn.probs.dim(2), 16);
}

TEST(DecodeFrame, DepthZeroWithoutPosGivesIdenticalMaskedPredictions) {
    ModelConfig cfg = micro_config();
    cfg.dec_depth = 0;
    Rng rng(29, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    // Degenerate path: direct head on the mask tokens themselves.
    params.dec_pos = Tensor<double>::zeros({16, 8});
    Rng irng(31, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(33, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    NoGradGuard ng;
    auto batch = forward(seq, plan, params);
    for (const auto& pred : batch.predictions) {
        const std::int64_t rows = pred.dim(0), d = pred.dim(1);
        for (std::int64_t r = 1; r < rows; ++r)
            for (std::int64_t j = 0; j < d; ++j)
                ASSERT_EQ(pred.data()[r * d + j], pred.data()[j]);
    }
}

TEST(Forward, EmptyMaskSetsGiveZeroLoss) {
    ModelConfig cfg = micro_config();
    cfg.mask = MaskSpec{{0.0, 0.0}};
    Rng rng(35, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(37, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(39, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    NoGradGuard ng;
    auto batch = forward(seq, plan, params);
    for (const auto& l : batch.frame_losses) EXPECT_EQ(l.item(), 0.0);
    for (const auto& p : batch.predictions) EXPECT_EQ(p.dim(0), 0);
}

TEST(Forward, PredictionAndTargetShapesMatch) {
    auto cfg = micro_config();
    Rng rng(41, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(43, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(45, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    NoGradGuard ng;
    auto batch = forward(seq, plan, params);
    ASSERT_EQ(batch.predictions.size(), 2u);
    for (std::size_t t = 0; t < 2; ++t) {
        EXPECT_EQ(batch.predictions[t].shape(), batch.targets[t].shape());
        EXPECT_EQ(batch.predictions[t].dim(0),
                  std::int64_t(plan.masked[t + 1].size()));
        EXPECT_EQ(batch.predictions[t].dim(1), 48);
    }
}

TEST(Forward, WeightSharingSingleStorage) {
    auto cfg = micro_config();
    Rng rng(47, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    EXPECT_EQ(params.find("enc.0.attn.wq").node().get(), params.enc[0].attn.wq.node().get());
    EXPECT_EQ(params.find("mask_token").node().get(), params.mask_token.node().get());
    EXPECT_EQ(params.find("head.w").node().get(), params.head_w.node().get());
    // 16 entries per encoder block x2, 26 per decoder block x1, plus
    // patch_proj(2) cls(1) enc_norm(2) enc2dec(2) mask(1) dec_norm(2) head(2).
    EXPECT_EQ(params.entries.size(), 2u * 16u + 26u + 12u);
}

TEST(Forward, TableGridShapeAudit) {
    // Ablation grid: decoder width, decoder depth, and frame count each varied
    // from the (192, 2, N=3) default.
    struct Cell {
        std::int64_t dd, depth, n;
    };
    std::vector<Cell> grid;
    for (std::int64_t dd : {192, 256, 512, 1024}) grid.push_back({dd, 2, 3});
    for (std::int64_t depth : {1, 2, 4, 8}) grid.push_back({192, depth, 3});
    for (std::int64_t n : {2, 3, 4, 5}) grid.push_back({192, 2, n});

    for (const auto& cell : grid) {
        ModelConfig cfg;
        cfg.image_size = 32;
        cfg.patch = 8;
        cfg.n_frames = cell.n;
        cfg.enc_dim = 32;
        cfg.enc_depth = 1;
        cfg.enc_heads = 2;
        cfg.dec_dim = cell.dd;
        cfg.dec_depth = cell.depth;
        cfg.mask = MaskSpec{std::vector<double>(std::size_t(cell.n - 1), 0.9)};
        Rng rng(std::uint64_t(cell.dd * 100 + cell.depth * 10 + cell.n), 0);
        auto params = ModelParams<float>::init(cfg, rng);
        Rng irng(3, 0);
        auto seq = noise_sequence(cell.n, 32, irng);
        Rng mrng(5, 0);
        auto plan = make_mask_plan(16, cfg.mask, mrng);
        NoGradGuard ng;
        auto batch = forward(seq, plan, params);
        ASSERT_EQ(batch.predictions.size(), std::size_t(cell.n - 1));
        for (std::size_t t = 0; t + 1 < std::size_t(cell.n); ++t) {
            ASSERT_EQ(batch.predictions[t].dim(0), std::int64_t(plan.masked[t + 1].size()));
            ASSERT_EQ(batch.predictions[t].dim(1), 192);
            ASSERT_EQ(batch.predictions[t].shape(), batch.targets[t].shape());
            ASSERT_TRUE(all_finite(batch.predictions[t]));
        }
    }
}

TEST(Forward, GradCheckMicroModel) {
    auto cfg = micro_config();
    Rng rng(51, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    jitter_all(params, rng);
    Rng irng(53, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(55, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);

    Rng rng_hp(51, 0);
    auto params_hp = ModelParams<long double>::init(cfg, rng_hp);

    std::vector<std::pair<std::string, Tensor<double>>> named;
    for (auto& e : params.entries) named.emplace_back(e.name, e.tensor);
    std::vector<std::pair<std::string, Tensor<long double>>> named_hp;
    for (auto& e : params_hp.entries) named_hp.emplace_back(e.name, e.tensor);

    auto f = [&]() {
        auto batch = forward(seq, plan, params);
        auto total = add(scale(batch.frame_losses[0], 0.8), batch.frame_losses[1]);
        return total;
    };
    auto f_hp = [&]() {
        auto batch = forward(seq, plan, params_hp);
        auto total = add(scale(batch.frame_losses[0], 0.8L), batch.frame_losses[1]);
        return total;
    };
    auto result = grad_check_refined(f, named, f_hp, named_hp);
    EXPECT_LT(result.max_rel_err, 1e-5)
        << "worst " << result.worst_param << "[" << result.worst_index
        << "] analytic=" << result.worst_analytic << " numeric=" << result.worst_numeric;
}

TEST(Forward, LossLocalityForTargetPixels) {
    auto cfg = micro_config();
    Rng rng(57, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(59, 0);
    auto seq = noise_sequence(3, 16, irng);
    auto target_seq = seq;
    Rng mrng(61, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);

    NoGradGuard ng;
    auto loss_of = [&]() {
        auto batch = forward(seq, plan, params, &target_seq);
        return 0.8 * batch.frame_losses[0].item() + batch.frame_losses[1].item();
    };
    const double base = loss_of();

    // A pixel inside a visible patch of frame 2: zero target sensitivity.
    const std::int64_t vis_patch = plan.visible[1][0];
    const std::int64_t gy = vis_patch / 4, gx = vis_patch % 4;
    float& vp = target_seq.frames[1].at(gy * 4, gx * 4, 0);
    const float saved = vp;
    vp = saved + 0.25f;
    EXPECT_EQ(loss_of(), base);
    vp = saved;

    // A pixel inside a masked patch of frame 2: nonzero sensitivity.
    const std::int64_t msk_patch = plan.masked[1][0];
    const std::int64_t my = msk_patch / 4, mx = msk_patch % 4;
    float& mp = target_seq.frames[1].at(my * 4, mx * 4, 0);
    mp += 0.25f;
    EXPECT_NE(loss_of(), base);
}

TEST(Attention, RowSumsToOneAndSplitsAcrossContextFrames) {
    auto cfg = micro_config();
    Rng rng(63, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    jitter_all(params, rng);
    Rng irng(65, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(67, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);

    const std::int64_t query = plan.masked[2][0];
    auto maps = extract_cross_attention(seq, plan, params, query, 2);
    ASSERT_EQ(maps.per_frame.size(), 2u);
    double total = 0;
    for (auto s : maps.frame_share) total += s;
    EXPECT_NEAR(total, 1.0, 1e-6);
    // Frame 0 contributes all 16 grid cells; frame 1 only its visible ones.
    double frame0_sum = 0;
    for (auto v : maps.per_frame[0]) frame0_sum += v;
    EXPECT_NEAR(frame0_sum, maps.frame_share[0], 1e-12);
    std::int64_t nonzero1 = 0;
    for (auto v : maps.per_frame[1])
        if (v != 0.0) ++nonzero1;
    EXPECT_LE(nonzero1, std::int64_t(plan.visible[1].size()));
}

TEST(Attention, VisibleQueryRejected) {
    auto cfg = micro_config();
    Rng rng(69, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    Rng irng(71, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(73, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);
    EXPECT_THROW(extract_cross_attention(seq, plan, params, plan.visible[2][0], 2),
                 ConfigError);
}

TEST(ModelConfig, ValidationErrors) {
    ModelConfig cfg = micro_config();
    cfg.image_size = 17;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = micro_config();
    cfg.enc_heads = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = micro_config();
    cfg.mask = MaskSpec{{0.5}};
    EXPECT_THROW(cfg.validate(), ConfigError);
    EXPECT_NO_THROW(micro_config().validate());
}

TEST(ModelConfig, DefaultsMatchPublishedShape) {
    ModelConfig cfg;
    EXPECT_EQ(cfg.image_size, 224);
    EXPECT_EQ(cfg.patch, 16);
    EXPECT_EQ(cfg.seq_len(), 196);
    EXPECT_EQ(cfg.enc_dim, 384);
    EXPECT_EQ(cfg.enc_depth, 12);
    EXPECT_EQ(cfg.dec_dim, 192);
    EXPECT_EQ(cfg.dec_depth, 2);
    EXPECT_EQ(cfg.resolved_dec_heads(), 3);
    ASSERT_EQ(cfg.mask.ratios.size(), 2u);
    EXPECT_EQ(cfg.mask.ratios[0], 0.95);
    EXPECT_EQ(cfg.mask.ratios[1], 0.95);
}
