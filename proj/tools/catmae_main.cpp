#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "catmae/cli.hpp"

namespace {

// Precedence: config file, then --set overrides, then dedicated flags.
catmae::RunConfig build_config(const std::string& config_path,
                               const std::vector<std::string>& sets) {
    catmae::RunConfig cfg;
    if (!config_path.empty()) cfg = catmae::load_run_config(config_path);
    for (const auto& s : sets) catmae::apply_config_override(cfg, s);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CatMAE: masked video autoencoding with concatenated context"};
    app.require_subcommand(1);

    catmae::GenDataArgs gen;
    auto* gd = app.add_subcommand("gen-data", "Generate a synthetic moving-shape dataset");
    gd->add_option("--out", gen.out_dir, "Output dataset root")->required();
    gd->add_option("--clips", gen.clips, "Number of clips (default 8)");
    gd->add_option("--frames", gen.frames, "Frames per clip (default 64)");
    gd->add_option("--size", gen.size, "Frame height and width in pixels (default 64)");
    gd->add_option("--seed", gen.seed, "Generator seed (default 0)");
    gd->add_flag("--force", gen.force, "Write into a non-empty directory");

    std::string pt_config, pt_resume, pt_data, pt_run_dir;
    std::vector<std::string> pt_sets;
    std::uint64_t pt_seed = 0;
    std::int64_t pt_frames = 0, pt_epochs = 0, pt_batch = 0;
    auto* pt = app.add_subcommand("pretrain", "Pre-train on a clip dataset");
    pt->add_option("--config", pt_config, "Config file");
    pt->add_option("--set", pt_sets, "Override a config entry, section.key=value (repeatable)");
    pt->add_option("--data", pt_data, "Dataset root (overrides data.root)");
    pt->add_option("--run-dir", pt_run_dir, "Run directory (overrides run.dir)");
    auto* pt_seed_opt = pt->add_option("--seed", pt_seed, "Seed (overrides run.seed)");
    auto* pt_frames_opt =
        pt->add_option("--frames", pt_frames, "Frames per sequence (overrides model.frames)");
    auto* pt_epochs_opt =
        pt->add_option("--epochs", pt_epochs, "Epochs (overrides train.epochs)");
    auto* pt_batch_opt =
        pt->add_option("--batch-size", pt_batch, "Batch size (overrides train.batch_size)");
    pt->add_option("--resume", pt_resume, "Checkpoint to resume from");

    std::string ev_config, ev_ckpt, ev_data, ev_out;
    std::vector<std::string> ev_sets;
    std::uint64_t ev_seed = 0;
    bool ev_static = false, ev_random = false;
    auto* ev = app.add_subcommand("eval-seg",
                                  "Label propagation segmentation over a labeled dataset");
    ev->add_option("--config", ev_config, "Config file");
    ev->add_option("--set", ev_sets, "Override a config entry, section.key=value (repeatable)");
    ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint to evaluate");
    ev->add_option("--data", ev_data, "Dataset root with per-clip labels/")->required();
    ev->add_option("--out", ev_out, "Output directory for scores.csv and pred/")->required();
    auto* ev_seed_opt = ev->add_option("--seed", ev_seed, "Seed (overrides run.seed)");
    ev->add_flag("--static-copy", ev_static, "Baseline: frame-0 labels copied to every frame");
    ev->add_flag("--random-init", ev_random, "Baseline: untrained encoder from [model] config");

    std::string vz_config, vz_ckpt, vz_clip, vz_out, vz_query = "auto";
    std::vector<std::string> vz_sets;
    std::int64_t vz_frame = -1;
    std::uint64_t vz_seed = 0;
    auto* vz = app.add_subcommand("viz-attn",
                                  "Decoder cross-attention heatmaps for one masked query");
    vz->add_option("--config", vz_config, "Config file (frame-gap sampling settings)");
    vz->add_option("--set", vz_sets, "Override a config entry, section.key=value (repeatable)");
    vz->add_option("--checkpoint", vz_ckpt, "Model checkpoint")->required();
    vz->add_option("--clip", vz_clip, "Clip directory")->required();
    vz->add_option("--out", vz_out, "Output directory for heatmap PNGs")->required();
    vz->add_option("--query", vz_query, "Masked patch index, or auto (default auto)");
    vz->add_option("--frame", vz_frame, "Reconstructed frame to inspect (default: last)");
    vz->add_option("--seed", vz_seed, "Seed for frame and mask sampling (default 0)");

    bool st_inject = false;
    auto* st = app.add_subcommand("selftest", "Built-in verification suites");
    st->add_flag("--inject-gradient-bug", st_inject,
                 "Run a deliberately sign-flipped backward rule; selftest must detect it "
                 "and fail");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    return catmae::run_command(
        [&]() -> int {
            catmae::env_thread_count();
            if (gd->parsed()) return catmae::cmd_gen_data(gen, std::cout, std::cerr);
            if (pt->parsed()) {
                catmae::PretrainArgs a;
                a.cfg = build_config(pt_config, pt_sets);
                if (!pt_data.empty()) a.cfg.data_root = pt_data;
                if (!pt_run_dir.empty()) a.cfg.run_dir = pt_run_dir;
                if (pt_seed_opt->count() > 0) a.cfg.seed = pt_seed;
                if (pt_frames_opt->count() > 0) a.cfg.n_frames = pt_frames;
                if (pt_epochs_opt->count() > 0) a.cfg.epochs = pt_epochs;
                if (pt_batch_opt->count() > 0) a.cfg.batch_size = pt_batch;
                a.resume = pt_resume;
                return catmae::cmd_pretrain(std::move(a), std::cout, std::cerr);
            }
            if (ev->parsed()) {
                catmae::EvalSegArgs a;
                a.cfg = build_config(ev_config, ev_sets);
                if (ev_seed_opt->count() > 0) a.cfg.seed = ev_seed;
                a.checkpoint = ev_ckpt;
                a.data_root = ev_data;
                a.out_dir = ev_out;
                a.static_copy = ev_static;
                a.random_init = ev_random;
                return catmae::cmd_eval_seg(std::move(a), std::cout, std::cerr);
            }
            if (vz->parsed()) {
                catmae::VizAttnArgs a;
                a.cfg = build_config(vz_config, vz_sets);
                a.checkpoint = vz_ckpt;
                a.clip_dir = vz_clip;
                a.out_dir = vz_out;
                a.query = vz_query;
                a.frame = vz_frame;
                a.seed = vz_seed;
                return catmae::cmd_viz_attention(std::move(a), std::cout, std::cerr);
            }
            if (st->parsed()) {
                catmae::SelftestArgs a;
                a.inject_gradient_bug = st_inject;
                return catmae::cmd_selftest(a, std::cout, std::cerr);
            }
            return 1;
        },
        std::cerr);
}
