#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "catmae/checkpoint.hpp"
#include "catmae/config.hpp"
#include "catmae/gradcheck.hpp"
#include "catmae/labelprop.hpp"
#include "catmae/masking.hpp"
#include "catmae/model.hpp"
#include "catmae/png_io.hpp"
#include "catmae/synthetic.hpp"
#include "catmae/training.hpp"

namespace catmae {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

// CATMAE_THREADS pins the internal thread count. All computation is currently
// single-threaded; the variable is validated so scripts relying on it fail
// loudly rather than silently.
inline std::int64_t env_thread_count() {
    const char* v = std::getenv("CATMAE_THREADS");
    if (!v || !*v) return 1;
    const std::int64_t n = detail::parse_int("CATMAE_THREADS", v);
    if (n < 1) throw ConfigError("CATMAE_THREADS: must be >= 1, got " + std::string(v));
    return n;
}

// Run a command body, mapping library errors to the documented exit codes.
template <typename F>
int run_command(F&& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ShapeError& e) {
        err << "shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
    std::string out_dir;
    std::int64_t clips = 8;
    std::int64_t frames = 64;
    std::int64_t size = 64;
    std::uint64_t seed = 0;
    bool force = false;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out, std::ostream&) {
    if (a.out_dir.empty()) throw ConfigError("gen-data: --out is required");
    if (a.clips < 1 || a.frames < 1 || a.size < 1)
        throw ConfigError("gen-data: --clips, --frames, and --size must be >= 1");
    if (fs::exists(a.out_dir) && !fs::is_empty(a.out_dir) && !a.force)
        throw DataError(DataError::Kind::layout,
                        "output directory " + a.out_dir +
                            " is not empty; pass --force to write into it anyway");
    const auto ids = write_synthetic_dataset(a.out_dir, a.clips, a.size, a.size, a.frames, a.seed);
    out << "wrote " << ids.size() << " clips of " << a.frames << " frames at " << a.size << "x"
        << a.size << " to " << a.out_dir << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
    RunConfig cfg;
    std::string resume;
};

inline int cmd_pretrain(PretrainArgs a, std::ostream& out, std::ostream& err) {
    a.cfg.resolve();
    const auto errors = a.cfg.validate_all();
    if (!errors.empty()) {
        err << "config errors:\n";
        for (const auto& e : errors) err << "  - " << e << "\n";
        return kExitConfig;
    }

    // Pin the derived schedule so the echoed config names concrete steps.
    const std::int64_t clips =
        static_cast<std::int64_t>(read_manifest(a.cfg.data_root).size());
    if (clips == 0)
        throw DataError(DataError::Kind::empty, "dataset " + a.cfg.data_root + " has no clips");
    const std::int64_t per_epoch =
        (a.cfg.repetition * clips + a.cfg.batch_size - 1) / a.cfg.batch_size;
    if (a.cfg.total_steps == 0) a.cfg.total_steps = a.cfg.epochs * per_epoch;
    if (a.cfg.warmup_steps == 0)
        a.cfg.warmup_steps = std::max<std::int64_t>(1, a.cfg.total_steps / 10);

    fs::create_directories(a.cfg.run_dir);
    write_resolved_config(a.cfg.run_dir + "/config.resolved", a.cfg);

    auto tcfg = a.cfg.to_train_config();
    tcfg.resume = a.resume;
    tcfg.log = &out;
    const auto result = train(a.cfg.data_root, a.cfg.to_model_config(), tcfg);
    out << "pretrain done: " << result.steps << " steps, first loss " << result.first_loss
        << ", final loss " << result.final_loss << "\n";
    out << "final checkpoint: " << result.final_checkpoint << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval-seg

struct EvalSegArgs {
    RunConfig cfg;
    std::string checkpoint;
    std::string data_root;
    std::string out_dir;
    bool static_copy = false;
    bool random_init = false;
};

namespace detail {

inline std::int64_t label_classes(const LabelImage& ids) {
    std::uint8_t mx = 0;
    for (auto v : ids.ids) mx = std::max(mx, v);
    return static_cast<std::int64_t>(mx) + 1;
}

struct ObjectAgg {
    double j_sum = 0.0, f_sum = 0.0;
    std::int64_t n = 0;
};

}  // namespace detail

inline int cmd_eval_seg(EvalSegArgs a, std::ostream& out, std::ostream& err) {
    const int sources = (a.checkpoint.empty() ? 0 : 1) + (a.static_copy ? 1 : 0) +
                        (a.random_init ? 1 : 0);
    if (sources != 1)
        throw ConfigError(
            "eval-seg: pass exactly one of --checkpoint, --static-copy, --random-init");
    if (a.data_root.empty()) throw ConfigError("eval-seg: --data is required");
    if (a.out_dir.empty()) throw ConfigError("eval-seg: --out is required");
    a.cfg.resolve();
    const auto prop = a.cfg.to_propagation_config();
    prop.validate();

    std::optional<ModelParams<float>> params;
    if (!a.checkpoint.empty()) {
        auto ckpt = load_checkpoint(a.checkpoint);
        Rng init_rng(0, 0x1217);
        params.emplace(ModelParams<float>::init(ckpt.model_cfg, init_rng));
        ckpt.apply_model(*params);
    } else if (a.random_init) {
        auto mcfg = a.cfg.to_model_config();
        mcfg.validate();
        Rng init_rng(a.cfg.seed, 0x1217);
        params.emplace(ModelParams<float>::init(mcfg, init_rng));
    }

    const auto ids = read_manifest(a.data_root);
    fs::create_directories(a.out_dir + "/pred");
    std::ofstream scores(a.out_dir + "/scores.csv", std::ios::binary | std::ios::trunc);
    if (!scores)
        throw DataError(DataError::Kind::missing, "cannot write " + a.out_dir + "/scores.csv");
    write_scores_header(scores);

    std::map<std::pair<std::string, std::int64_t>, detail::ObjectAgg> objects;
    std::int64_t evaluated = 0, skipped = 0;
    for (const auto& id : ids) {
        const std::string dir = a.data_root + "/" + id;
        VideoClip clip;
        std::vector<LabelImage> gt;
        try {
            clip = load_clip(dir);
            const auto n = static_cast<std::int64_t>(clip.frames.size());
            if (n < 2)
                throw DataError(DataError::Kind::too_short,
                                "clip has " + std::to_string(n) + " frame(s), need at least 2");
            gt.reserve(static_cast<std::size_t>(n));
            for (std::int64_t t = 0; t < n; ++t) {
                gt.push_back(read_png_labels(dir + "/labels/" + frame_name(t)));
                if (gt.back().height != clip.frames[0].height ||
                    gt.back().width != clip.frames[0].width)
                    throw DataError(DataError::Kind::dim_mismatch,
                                    "label size differs from frame size at frame " +
                                        std::to_string(t));
            }
        } catch (const DataError& e) {
            err << "warning: skipping " << id << ": " << e.what() << "\n";
            ++skipped;
            continue;
        }

        const auto n = static_cast<std::int64_t>(clip.frames.size());
        std::vector<LabelImage> pred;
        pred.push_back(gt[0]);
        if (a.static_copy) {
            for (std::int64_t t = 1; t < n; ++t) pred.push_back(gt[0]);
        } else {
            const auto& mcfg = params->cfg;
            const std::int64_t g = mcfg.grid();
            const std::int64_t classes = std::max<std::int64_t>(2, detail::label_classes(gt[0]));
            std::vector<FeatureGrid> feats;
            feats.reserve(static_cast<std::size_t>(n));
            for (std::int64_t t = 0; t < n; ++t)
                feats.push_back(
                    extract_features(clip.frames[static_cast<std::size_t>(t)], *params,
                                     a.cfg.feature_layer));
            const auto first = downsample_labels(one_hot_labels(gt[0], classes), g, g);
            const auto soft = propagate(feats, first, prop);
            for (std::int64_t t = 1; t < n; ++t)
                pred.push_back(hard_labels(upsample_labels(soft[static_cast<std::size_t>(t)],
                                                           clip.frames[0].height,
                                                           clip.frames[0].width)));
        }

        fs::create_directories(a.out_dir + "/pred/" + id);
        for (std::int64_t t = 0; t < n; ++t)
            write_png_labels(a.out_dir + "/pred/" + id + "/" + frame_name(t),
                             pred[static_cast<std::size_t>(t)]);

        // Frame 0 carries the given labels, so score frames 1..n-1 only.
        std::vector<LabelImage> p1(pred.begin() + 1, pred.end());
        std::vector<LabelImage> g1(gt.begin() + 1, gt.end());
        auto score = jf_metrics(p1, g1);
        for (auto& row : score.rows) row.frame += 1;
        write_scores_csv(scores, id, score);
        if (score.rows.empty()) {
            out << id << ": no objects\n";
        } else {
            out << id << ": J=" << score.j_mean << " F=" << score.f_mean
                << " J&F=" << score.jf_mean << "\n";
            for (const auto& row : score.rows) {
                auto& agg = objects[{id, row.object_id}];
                agg.j_sum += row.j;
                agg.f_sum += row.f;
                ++agg.n;
            }
        }
        ++evaluated;
    }

    if (evaluated == 0) {
        err << "error: all " << skipped << " video(s) were skipped\n";
        return kExitData;
    }
    double j_total = 0.0, f_total = 0.0;
    for (const auto& [key, agg] : objects) {
        j_total += agg.j_sum / static_cast<double>(agg.n);
        f_total += agg.f_sum / static_cast<double>(agg.n);
    }
    const double n_obj = std::max<double>(1.0, static_cast<double>(objects.size()));
    const double j_mean = j_total / n_obj;
    const double f_mean = f_total / n_obj;
    out << "mean over " << objects.size() << " object(s) in " << evaluated
        << " video(s): J=" << j_mean << " F=" << f_mean << " J&F=" << (0.5 * (j_mean + f_mean))
        << "\n";
    if (skipped > 0) out << "skipped " << skipped << " video(s)\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// viz-attn

struct VizAttnArgs {
    RunConfig cfg;
    std::string checkpoint;
    std::string clip_dir;
    std::string out_dir;
    std::string query = "auto";
    std::int64_t frame = -1;  // reconstructed frame to inspect; -1 = last
    std::uint64_t seed = 0;
};

inline int cmd_viz_attention(VizAttnArgs a, std::ostream& out, std::ostream&) {
    if (a.checkpoint.empty()) throw ConfigError("viz-attn: --checkpoint is required");
    if (a.clip_dir.empty()) throw ConfigError("viz-attn: --clip is required");
    if (a.out_dir.empty()) throw ConfigError("viz-attn: --out is required");

    auto ckpt = load_checkpoint(a.checkpoint);
    const ModelConfig mcfg = ckpt.model_cfg;
    Rng init_rng(0, 0x1217);
    auto params = ModelParams<float>::init(mcfg, init_rng);
    ckpt.apply_model(params);

    const std::int64_t N = mcfg.n_frames;
    const std::int64_t t = a.frame < 0 ? N - 1 : a.frame;
    if (t < 1 || t >= N)
        throw ConfigError("viz-attn: --frame must be in [1, " + std::to_string(N - 1) +
                          "], got " + std::to_string(t));

    // Chronological unaugmented frames; the clip must already match the
    // model's input size.
    a.cfg.n_frames = N;
    a.cfg.image_size = mcfg.image_size;
    a.cfg.resolve();
    auto spec = a.cfg.to_clip_spec();
    spec.validate();
    auto clip = load_clip(a.clip_dir);
    Rng root(a.seed, 0x41a7);
    Rng srng = root.child("sample");
    auto seq = sample_sequence(clip, spec, srng);

    const std::int64_t L = mcfg.seq_len();
    Rng mrng = root.child("mask");
    const auto plan = make_mask_plan(L, mcfg.mask, mrng);
    const auto& masked = plan.masked[static_cast<std::size_t>(t)];

    std::int64_t q = -1;
    if (a.query == "auto") {
        if (masked.empty())
            throw ConfigError("viz-attn: frame " + std::to_string(t) +
                              " has no masked patches under this plan");
        q = masked.front();
    } else {
        q = detail::parse_int("--query", a.query);
        if (q < 0 || q >= L)
            throw ConfigError("viz-attn: --query must be in [0, " + std::to_string(L - 1) +
                              "], got " + std::to_string(q));
        if (!std::binary_search(masked.begin(), masked.end(), q))
            throw ConfigError("viz-attn: query patch " + std::to_string(q) +
                              " is visible (not reconstructed) in frame " + std::to_string(t) +
                              " under the sampled mask plan; pass --query auto to pick a "
                              "masked patch");
    }

    NoGradGuard ng;
    auto batch = forward(seq, plan, params, nullptr, t);
    const auto& probs = batch.attn.probs;  // [heads, L, C]
    const std::int64_t heads = probs.dim(0);
    const std::int64_t C = probs.dim(2);
    const auto& pv = probs.values();
    std::vector<double> row(static_cast<std::size_t>(C), 0.0);
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t c = 0; c < C; ++c)
            row[static_cast<std::size_t>(c)] +=
                static_cast<double>(pv[static_cast<std::size_t>((h * L + q) * C + c)]) /
                static_cast<double>(heads);

    fs::create_directories(a.out_dir);
    const std::int64_t g = mcfg.grid();
    out << "clip " << clip.id << ", frames";
    for (auto s : seq.source_indices) out << " " << s;
    out << ", reconstructed frame " << t << ", query patch " << q << " (row " << q / g
        << ", col " << q % g << ")\n";

    double total = 0.0;
    std::size_t offset = 0;
    const auto& sizes = batch.attn.context_sizes;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        const std::int64_t ctx_frame =
            (s < static_cast<std::size_t>(t)) ? static_cast<std::int64_t>(s) : t;
        std::vector<double> map(static_cast<std::size_t>(g * g), 0.0);
        double mass = 0.0;
        const auto& vis = plan.visible[static_cast<std::size_t>(ctx_frame)];
        for (std::size_t i = 0; i < static_cast<std::size_t>(sizes[s]); ++i) {
            map[static_cast<std::size_t>(vis[i])] = row[offset + i];
            mass += row[offset + i];
        }
        offset += static_cast<std::size_t>(sizes[s]);
        total += mass;
        char name[64];
        std::snprintf(name, sizeof(name), "attn_f%lld_q%lld_ctx%lld.png",
                      static_cast<long long>(t), static_cast<long long>(q),
                      static_cast<long long>(ctx_frame));
        write_png_gray(a.out_dir + "/" + std::string(name), g, g, map);
        out << "context frame " << ctx_frame << ": mass " << mass << " -> " << name << "\n";
    }
    for (std::int64_t s = 0; s < N; ++s) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame%lld.png", static_cast<long long>(s));
        write_png_rgb(a.out_dir + "/" + std::string(name),
                      seq.frames[static_cast<std::size_t>(s)]);
    }
    out << "total attention mass: " << total << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// selftest

struct SelftestArgs {
    bool inject_gradient_bug = false;
};

namespace selftest {

struct SuiteResult {
    std::string name;
    bool ok = false;
    std::string detail;
};

inline ModelConfig micro_model_config() {
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

inline FrameSequence noise_sequence(std::int64_t n, std::int64_t size, Rng& rng) {
    FrameSequence seq;
    for (std::int64_t i = 0; i < n; ++i) {
        Image img(size, size, 3);
        for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
        seq.frames.push_back(std::move(img));
    }
    seq.source_indices.resize(static_cast<std::size_t>(n));
    return seq;
}

inline std::string fmt_err(const GradCheckResult& r) {
    std::ostringstream os;
    os.precision(3);
    os << "worst rel err " << r.max_rel_err << " at " << r.worst_param << "[" << r.worst_index
       << "]";
    return os.str();
}

inline SuiteResult grad_suite(bool inject) {
    if (inject) {
        // Simulated defect: the forward value is -gelu(x) but the recorded
        // graph only backpropagates through +gelu(x), exactly a sign-flipped
        // backward rule. The checker must flag it and name the op.
        auto x = Tensor<double>::from_data({5}, {-1.2, -0.3, 0.1, 0.7, 1.9});
        std::vector<std::pair<std::string, Tensor<double>>> named{{"gelu.backward", x}};
        auto& xt = named[0].second;
        auto f = [&xt]() {
            auto a = gelu(xt);
            Tensor<double> b;
            {
                NoGradGuard ng;
                b = scale(gelu(xt), -2.0);
            }
            return sum_all(add(a, b));
        };
        auto res = grad_check(f, named, 1e-5);
        if (!res.passes(1e-5))
            return {"grad-check", false,
                    "injected sign flip detected in gelu.backward: " + fmt_err(res)};
        return {"grad-check", false, "injected gelu.backward defect was NOT detected"};
    }

    auto cfg = micro_model_config();
    Rng rng(51, 0);
    auto params = ModelParams<double>::init(cfg, rng);
    for (auto& e : params.entries) {
        Rng r = rng.child(e.name);
        for (auto& v : e.tensor.values()) v += r.uniform(-0.05, 0.05);
    }
    Rng rng_hp(51, 0);
    auto params_hp = ModelParams<long double>::init(cfg, rng_hp);
    Rng irng(53, 0);
    auto seq = noise_sequence(3, 16, irng);
    Rng mrng(55, 0);
    auto plan = make_mask_plan(16, cfg.mask, mrng);

    std::vector<std::pair<std::string, Tensor<double>>> named;
    for (auto& e : params.entries) named.emplace_back(e.name, e.tensor);
    std::vector<std::pair<std::string, Tensor<long double>>> named_hp;
    for (auto& e : params_hp.entries) named_hp.emplace_back(e.name, e.tensor);

    auto f = [&]() {
        auto batch = forward(seq, plan, params);
        return add(scale(batch.frame_losses[0], 0.8), batch.frame_losses[1]);
    };
    auto f_hp = [&]() {
        auto batch = forward(seq, plan, params_hp);
        return add(scale(batch.frame_losses[0], 0.8L), batch.frame_losses[1]);
    };
    auto res = grad_check_refined(f, named, f_hp, named_hp, 1e-5);
    std::int64_t coords = 0;
    for (const auto& [name, tensor] : named) coords += tensor.numel();
    if (!res.passes(1e-5)) return {"grad-check", false, fmt_err(res)};
    return {"grad-check", true,
            std::to_string(coords) + " coordinates, " + fmt_err(res)};
}

inline SuiteResult causality_suite() {
    auto cfg = micro_model_config();
    Rng prng(3, 0);
    auto params = ModelParams<float>::init(cfg, prng);
    const std::int64_t trials = 20;
    std::int64_t sensitive = 0;
    NoGradGuard ng;
    for (std::int64_t trial = 0; trial < trials; ++trial) {
        Rng r(static_cast<std::uint64_t>(trial), 0xca5a);
        auto seq = noise_sequence(3, 16, r);
        Rng mr = r.child("mask");
        auto plan = make_mask_plan(16, cfg.mask, mr);
        const auto base = forward(seq, plan, params).predictions[0].values();

        auto later = seq;
        for (auto& v : later.frames[2].pixels) v = 1.0f - v;
        const auto after_later = forward(later, plan, params).predictions[0].values();
        if (after_later != base)
            return {"causality", false,
                    "frame-1 reconstruction changed when frame 2 was perturbed (trial " +
                        std::to_string(trial) + ")"};

        auto earlier = seq;
        for (auto& v : earlier.frames[0].pixels) v = 1.0f - v;
        const auto after_earlier = forward(earlier, plan, params).predictions[0].values();
        if (after_earlier != base) ++sensitive;
    }
    if (sensitive < trials - 2)
        return {"causality", false,
                "context looks unused: only " + std::to_string(sensitive) + "/" +
                    std::to_string(trials) + " trials reacted to a frame-0 perturbation"};
    return {"causality", true,
            std::to_string(trials) + "/" + std::to_string(trials) + " bitwise, " +
                std::to_string(sensitive) + "/" + std::to_string(trials) +
                " context-sensitive"};
}

inline SuiteResult masking_suite() {
    // Visible-count formula and partition structure across a small sweep.
    const std::vector<std::int64_t> lengths{1, 2, 3, 16, 49, 196, 1024};
    const std::vector<double> ratios{0.0, 0.5, 0.9, 0.95, 0.99};
    Rng rng(7, 0x3a5c);
    std::int64_t cases = 0;
    for (auto L : lengths)
        for (auto rho : ratios) {
            const auto expect = std::max<std::int64_t>(
                1, static_cast<std::int64_t>(std::floor((1.0 - rho) * static_cast<double>(L))));
            MaskSpec spec{{rho, rho}};
            auto plan = make_mask_plan(L, spec, rng);
            for (std::size_t t = 1; t < 3; ++t) {
                const auto& vis = plan.visible[t];
                const auto& msk = plan.masked[t];
                if (static_cast<std::int64_t>(vis.size()) != expect)
                    return {"masking", false,
                            "visible count " + std::to_string(vis.size()) + " != " +
                                std::to_string(expect) + " at L=" + std::to_string(L) +
                                " rho=" + std::to_string(rho)};
                std::vector<std::int64_t> all(vis);
                all.insert(all.end(), msk.begin(), msk.end());
                std::sort(all.begin(), all.end());
                for (std::int64_t i = 0; i < L; ++i)
                    if (all[static_cast<std::size_t>(i)] != i)
                        return {"masking", false,
                                "visible/masked do not partition 0.." + std::to_string(L - 1)};
            }
            ++cases;
        }

    // Chi-squared uniformity of visible positions at L=16, rho=0.5.
    const std::int64_t L = 16, n = 2000;
    std::vector<std::int64_t> counts(static_cast<std::size_t>(L), 0);
    MaskSpec spec{{0.5, 0.5}};
    for (std::int64_t i = 0; i < n; ++i) {
        auto plan = make_mask_plan(L, spec, rng);
        for (auto v : plan.visible[1]) ++counts[static_cast<std::size_t>(v)];
    }
    const double expected = static_cast<double>(n) * 8.0 / 16.0;
    double chi2 = 0.0;
    for (auto c : counts) {
        const double d = static_cast<double>(c) - expected;
        chi2 += d * d / expected;
    }
    const double dof = 15.0;
    const double limit = dof + 3.0 * std::sqrt(2.0 * dof);
    std::ostringstream os;
    os.precision(4);
    os << cases << " formula cases, chi2 " << chi2 << " (limit " << limit << ")";
    if (chi2 >= limit) return {"masking", false, os.str()};
    return {"masking", true, os.str()};
}

// Independent label-propagation reference: full enumeration, no shared code
// with the library inner loop.
inline std::vector<LabelMap> reference_propagate(const std::vector<FeatureGrid>& features,
                                                 const LabelMap& first,
                                                 const PropagationConfig& cfg) {
    std::vector<LabelMap> out{first};
    const std::int64_t h = first.h, w = first.w;
    for (std::int64_t f = 1; f < static_cast<std::int64_t>(features.size()); ++f) {
        LabelMap lm(h, w, first.classes);
        std::vector<std::int64_t> ctx{0};
        for (std::int64_t c = std::max<std::int64_t>(1, f - cfg.m); c < f; ++c) ctx.push_back(c);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                struct C {
                    double a;
                    std::int64_t frame, yy, xx;
                    std::size_t idx;
                };
                std::vector<C> cands;
                const float* q = features[static_cast<std::size_t>(f)].at(y, x);
                for (auto c : ctx)
                    for (std::int64_t yy = 0; yy < h; ++yy)
                        for (std::int64_t xx = 0; xx < w; ++xx) {
                            if (std::abs(yy - y) > cfg.r || std::abs(xx - x) > cfg.r) continue;
                            const float* kf = features[static_cast<std::size_t>(c)].at(yy, xx);
                            double dot = 0.0;
                            for (std::int64_t d = 0;
                                 d < features[static_cast<std::size_t>(f)].d; ++d)
                                dot += static_cast<double>(q[d]) * static_cast<double>(kf[d]);
                            cands.push_back({dot, c, yy, xx, cands.size()});
                        }
                std::sort(cands.begin(), cands.end(), [](const C& a, const C& b) {
                    if (a.a != b.a) return a.a > b.a;
                    return a.idx < b.idx;
                });
                if (cands.size() > static_cast<std::size_t>(cfg.k))
                    cands.resize(static_cast<std::size_t>(cfg.k));
                double mx = cands[0].a;
                double z = 0.0;
                for (const auto& c : cands) z += std::exp((c.a - mx) / cfg.tau);
                double* dst = lm.at(y, x);
                for (const auto& c : cands) {
                    const double wgt = std::exp((c.a - mx) / cfg.tau) / z;
                    const double* src = out[static_cast<std::size_t>(c.frame)].at(c.yy, c.xx);
                    for (std::int64_t cc = 0; cc < first.classes; ++cc) dst[cc] += wgt * src[cc];
                }
            }
        out.push_back(std::move(lm));
    }
    return out;
}

inline SuiteResult metric_suite() {
    PropagationConfig cfg;
    cfg.k = 3;
    cfg.tau = 0.07;
    cfg.m = 1;
    cfg.r = 2;
    const std::int64_t instances = 200;
    for (std::int64_t s = 0; s < instances; ++s) {
        Rng rng(static_cast<std::uint64_t>(s), 0x9e7a);
        std::vector<FeatureGrid> feats;
        for (int f = 0; f < 3; ++f) {
            FeatureGrid g;
            g.h = 4;
            g.w = 4;
            g.d = 6;
            g.data.resize(static_cast<std::size_t>(g.h * g.w * g.d));
            for (std::int64_t i = 0; i < g.h * g.w; ++i) {
                double norm = 0.0;
                std::vector<double> v(static_cast<std::size_t>(g.d));
                for (auto& x : v) {
                    x = rng.normal();
                    norm += x * x;
                }
                norm = std::sqrt(std::max(norm, 1e-12));
                for (std::int64_t d = 0; d < g.d; ++d)
                    g.data[static_cast<std::size_t>(i * g.d + d)] =
                        static_cast<float>(v[static_cast<std::size_t>(d)] / norm);
            }
            feats.push_back(std::move(g));
        }
        LabelMap first(4, 4, 3);
        for (std::int64_t i = 0; i < 16; ++i)
            first.data[static_cast<std::size_t>(i * 3 + rng.uniform_int(0, 2))] = 1.0;
        const auto got = propagate(feats, first, cfg);
        const auto want = reference_propagate(feats, first, cfg);
        for (std::size_t f = 1; f < got.size(); ++f)
            for (std::size_t i = 0; i < got[f].data.size(); ++i)
                if (std::abs(got[f].data[i] - want[f].data[i]) > 1e-10)
                    return {"metric-oracle", false,
                            "propagation differs from the reference at instance " +
                                std::to_string(s)};
    }

    // J/F closed-form cases.
    auto rect = [](std::int64_t h, std::int64_t w, std::int64_t r0, std::int64_t r1,
                   std::int64_t c0, std::int64_t c1) {
        LabelImage img(h, w);
        for (std::int64_t y = r0; y < r1; ++y)
            for (std::int64_t x = c0; x < c1; ++x)
                img.at(y, x) = 1;
        return img;
    };
    const auto a = rect(30, 40, 5, 15, 0, 20);
    const auto b = rect(30, 40, 5, 15, 10, 30);
    const auto perfect = jf_metrics({a}, {a});
    if (std::abs(perfect.j_mean - 1.0) > 1e-12 || std::abs(perfect.f_mean - 1.0) > 1e-12)
        return {"metric-oracle", false, "identical masks did not score J=F=1"};
    const auto half = jf_metrics({b}, {a});
    if (std::abs(half.j_mean - 1.0 / 3.0) > 1e-12)
        return {"metric-oracle", false, "half-overlap J != 1/3"};
    const auto rev = jf_metrics({a}, {b});
    if (std::abs(rev.j_mean - half.j_mean) > 1e-12)
        return {"metric-oracle", false, "J is not symmetric"};
    const auto c = rect(30, 40, 20, 25, 0, 10);
    const auto disjoint = jf_metrics({c}, {a});
    if (std::abs(disjoint.j_mean) > 1e-12)
        return {"metric-oracle", false, "disjoint masks did not score J=0"};
    return {"metric-oracle", true,
            std::to_string(instances) + " propagation instances, 4 J/F cases"};
}

}  // namespace selftest

inline int cmd_selftest(const SelftestArgs& a, std::ostream& out, std::ostream&) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<selftest::SuiteResult> results;
    results.push_back(selftest::grad_suite(a.inject_gradient_bug));
    results.push_back(selftest::causality_suite());
    results.push_back(selftest::masking_suite());
    results.push_back(selftest::metric_suite());
    bool all = true;
    for (const auto& r : results) {
        out << r.name << ": " << (r.ok ? "ok" : "FAIL") << " (" << r.detail << ")\n";
        all = all && r.ok;
    }
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(
                          std::chrono::steady_clock::now() - start)
                          .count();
    out << "selftest: " << (all ? "PASS" : "FAIL") << " in " << secs << "s\n";
    return all ? kExitOk : kExitConfig;
}

}  // namespace catmae
