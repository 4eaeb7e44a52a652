#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "catmae/checkpoint.hpp"
#include "catmae/cli.hpp"
#include "catmae/config.hpp"
#include "catmae/synthetic.hpp"

using namespace catmae;
namespace stdfs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const std::string dir = testing::TempDir() + "catmae_cli_" + name;
    stdfs::remove_all(dir);
    stdfs::create_directories(dir);
    return dir;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

struct CmdResult {
    int exit_code = -1;
    std::string output;
};

CmdResult run_shell(const std::string& cmd) {
    CmdResult r;
    FILE* p = popen((cmd + " 2>&1").c_str(), "r");
    if (!p) return r;
    char buf[512];
    while (std::size_t n = std::fread(buf, 1, sizeof(buf), p)) r.output.append(buf, n);
    const int rc = pclose(p);
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return r;
}

RunConfig micro_run_config(const std::string& data, const std::string& run_dir) {
    RunConfig c;
    c.data_root = data;
    c.run_dir = run_dir;
    c.image_size = 16;
    c.patch = 4;
    c.n_frames = 3;
    c.enc_dim = 16;
    c.enc_depth = 2;
    c.enc_heads = 2;
    c.dec_dim = 8;
    c.dec_depth = 1;
    c.mask_ratios = {0.5};
    c.gaps = {{1, 3}};
    c.batch_size = 6;
    c.repetition = 2;
    c.epochs = 2;
    c.base_lr = 1e-3;
    c.prop_radius = 4;
    c.prop_context = 2;
    return c;
}

ModelConfig micro_model() {
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

std::string make_dataset(const std::string& name, std::int64_t clips, std::int64_t frames,
                         std::uint64_t seed) {
    const std::string root = fresh_dir(name);
    write_synthetic_dataset(root, clips, 16, 16, frames, seed);
    return root;
}

std::string make_random_checkpoint(const std::string& dir, std::uint64_t seed) {
    auto mcfg = micro_model();
    Rng rng(seed, 0x1217);
    auto params = ModelParams<float>::init(mcfg, rng);
    const std::string path = dir + "/random.ckpt";
    save_checkpoint(path, params, nullptr, seed, 0);
    return path;
}

}  // namespace

// ---------------------------------------------------------------------------
// config file handling

TEST(Config, DefaultsSurviveRenderParseRoundTrip) {
    RunConfig def;
    const std::string text = render_run_config(def);
    std::istringstream in(text);
    const RunConfig back = parse_run_config(in, "<mem>");
    EXPECT_EQ(render_run_config(back), text);
}

TEST(Config, ResolvedConfigRoundTripsExactly) {
    RunConfig c = micro_run_config("some/data", "some/run");
    c.n_frames = 5;
    c.resolve();
    ASSERT_EQ(c.gaps.size(), 4u);
    const std::string text = render_run_config(c);
    std::istringstream in(text);
    const RunConfig back = parse_run_config(in, "<mem>");
    EXPECT_EQ(render_run_config(back), text);
}

TEST(Config, UnknownKeysAndSectionsRejected) {
    std::istringstream bad_key("[model]\nwidth = 3\n");
    EXPECT_THROW(
        {
            try {
                parse_run_config(bad_key, "cfg");
            } catch (const ConfigError& e) {
                EXPECT_NE(std::string(e.what()).find("model.width"), std::string::npos);
                EXPECT_NE(std::string(e.what()).find("cfg:2"), std::string::npos);
                throw;
            }
        },
        ConfigError);
    std::istringstream bad_section("[models]\npatch = 4\n");
    EXPECT_THROW(parse_run_config(bad_section, "cfg"), ConfigError);
    std::istringstream no_section("patch = 4\n");
    EXPECT_THROW(parse_run_config(no_section, "cfg"), ConfigError);
}

TEST(Config, CommentsAndBlankLinesIgnored) {
    std::istringstream in(
        "# top comment\n\n[model]\n# inner\nframes = 4\n\n[train]\nbatch_size = 3\n");
    const RunConfig c = parse_run_config(in, "cfg");
    EXPECT_EQ(c.n_frames, 4);
    EXPECT_EQ(c.batch_size, 3);
}

TEST(Config, SingleEntryListsBroadcastOnResolve) {
    RunConfig c;
    c.n_frames = 5;
    c.gaps = {{2, 7}};
    c.mask_ratios = {0.9};
    c.loss_scales.clear();
    c.resolve();
    ASSERT_EQ(c.gaps.size(), 4u);
    EXPECT_EQ(c.gaps[3].lo, 2);
    EXPECT_EQ(c.gaps[3].hi, 7);
    ASSERT_EQ(c.mask_ratios.size(), 4u);
    EXPECT_DOUBLE_EQ(c.mask_ratios[2], 0.9);
    ASSERT_EQ(c.loss_scales.size(), 4u);
    EXPECT_DOUBLE_EQ(c.loss_scales[0], 0.8);
    EXPECT_DOUBLE_EQ(c.loss_scales[3], 1.0);
}

TEST(Config, PaperDefaultsComeOutOfTheBox) {
    RunConfig c;
    c.resolve();
    EXPECT_EQ(c.n_frames, 3);
    ASSERT_EQ(c.mask_ratios.size(), 2u);
    EXPECT_DOUBLE_EQ(c.mask_ratios[0], 0.95);
    EXPECT_DOUBLE_EQ(c.mask_ratios[1], 0.95);
    ASSERT_EQ(c.loss_scales.size(), 2u);
    EXPECT_DOUBLE_EQ(c.loss_scales[0], 0.8);
    EXPECT_DOUBLE_EQ(c.loss_scales[1], 1.0);
    ASSERT_EQ(c.gaps.size(), 2u);
    EXPECT_EQ(c.gaps[0].lo, 4);
    EXPECT_EQ(c.gaps[0].hi, 16);
    EXPECT_EQ(c.gaps[1].lo, 4);
    EXPECT_EQ(c.gaps[1].hi, 16);
    EXPECT_DOUBLE_EQ(c.weight_decay, 0.05);
    EXPECT_DOUBLE_EQ(c.beta2, 0.95);
}

TEST(Config, OverridesApplyAndRejectMalformedInput) {
    RunConfig c;
    apply_config_override(c, "model.patch=8");
    EXPECT_EQ(c.patch, 8);
    apply_config_override(c, " train.epochs = 3 ");
    EXPECT_EQ(c.epochs, 3);
    EXPECT_THROW(apply_config_override(c, "patch=8"), ConfigError);
    EXPECT_THROW(apply_config_override(c, "model.patch"), ConfigError);
    EXPECT_THROW(apply_config_override(c, "model.patch=abc"), ConfigError);
}

TEST(Config, ValidateAllCollectsEveryFailure) {
    RunConfig c = micro_run_config("d", "r");
    c.patch = 5;        // image 16 not divisible
    c.prop_tau = -1.0;  // bad eval temperature
    c.batch_size = 0;   // bad train setting
    c.resolve();
    const auto errors = c.validate_all();
    ASSERT_GE(errors.size(), 3u);
    std::string joined;
    for (const auto& e : errors) joined += e + "\n";
    EXPECT_NE(joined.find("model"), std::string::npos);
    EXPECT_NE(joined.find("eval"), std::string::npos);
    EXPECT_NE(joined.find("train"), std::string::npos);
}

// ---------------------------------------------------------------------------
// gen-data

TEST(GenData, WritesDocumentedLayout) {
    const std::string dir = fresh_dir("gen_layout");
    GenDataArgs a;
    a.out_dir = dir + "/ds";
    a.clips = 3;
    a.frames = 5;
    a.size = 16;
    a.seed = 11;
    std::ostringstream out, err;
    EXPECT_EQ(cmd_gen_data(a, out, err), 0);
    EXPECT_NE(out.str().find("wrote 3 clips"), std::string::npos);
    EXPECT_TRUE(stdfs::exists(a.out_dir + "/clips.txt"));
    for (const char* clip : {"clip0000", "clip0001", "clip0002"}) {
        EXPECT_TRUE(stdfs::exists(a.out_dir + "/" + clip + "/000004.png"));
        EXPECT_TRUE(stdfs::exists(a.out_dir + "/" + clip + "/labels/000004.png"));
    }
    const auto ids = read_manifest(a.out_dir);
    ASSERT_EQ(ids.size(), 3u);
    EXPECT_EQ(ids[0], "clip0000");
}

TEST(GenData, NonEmptyDirRequiresForce) {
    const std::string dir = fresh_dir("gen_force");
    GenDataArgs a;
    a.out_dir = dir + "/ds";
    a.clips = 1;
    a.frames = 3;
    a.size = 16;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_gen_data(a, out, err), 0);
    const int rc = run_command([&] { return cmd_gen_data(a, out, err); }, err);
    EXPECT_EQ(rc, 2);
    EXPECT_NE(err.str().find("--force"), std::string::npos);
    a.force = true;
    EXPECT_EQ(cmd_gen_data(a, out, err), 0);
}

TEST(GenData, SeedRepeatGivesIdenticalBytes) {
    const std::string dir = fresh_dir("gen_seed");
    for (int variant = 0; variant < 2; ++variant) {
        GenDataArgs a;
        a.clips = 2;
        a.frames = 4;
        a.size = 16;
        a.seed = 21;
        a.out_dir = dir + "/a" + std::to_string(variant);
        std::ostringstream out, err;
        ASSERT_EQ(cmd_gen_data(a, out, err), 0);
    }
    GenDataArgs b;
    b.clips = 2;
    b.frames = 4;
    b.size = 16;
    b.seed = 22;
    b.out_dir = dir + "/b";
    std::ostringstream out, err;
    ASSERT_EQ(cmd_gen_data(b, out, err), 0);

    bool any_difference_from_other_seed = false;
    for (const auto& entry : stdfs::recursive_directory_iterator(dir + "/a0")) {
        if (!entry.is_regular_file()) continue;
        const std::string rel =
            stdfs::relative(entry.path(), dir + "/a0").string();
        EXPECT_EQ(read_file(entry.path().string()), read_file(dir + "/a1/" + rel)) << rel;
        if (read_file(entry.path().string()) != read_file(dir + "/b/" + rel))
            any_difference_from_other_seed = true;
    }
    EXPECT_TRUE(any_difference_from_other_seed);
}

// ---------------------------------------------------------------------------
// pretrain

TEST(Pretrain, WritesResolvedConfigMetricsAndCheckpoints) {
    const std::string data = make_dataset("pt_artifacts_data", 4, 10, 31);
    const std::string dir = fresh_dir("pt_artifacts");
    PretrainArgs a;
    a.cfg = micro_run_config(data, dir + "/run");
    std::ostringstream out, err;
    ASSERT_EQ(cmd_pretrain(a, out, err), 0) << err.str();
    EXPECT_NE(out.str().find("pretrain done"), std::string::npos);

    // 4 clips, repetition 2, batch 6 -> 2 steps per epoch, 2 epochs.
    const RunConfig echoed = load_run_config(dir + "/run/config.resolved");
    EXPECT_EQ(echoed.total_steps, 4);
    EXPECT_EQ(echoed.warmup_steps, 1);
    ASSERT_EQ(echoed.mask_ratios.size(), 2u);
    ASSERT_EQ(echoed.loss_scales.size(), 2u);
    EXPECT_DOUBLE_EQ(echoed.loss_scales[1], 1.0);
    EXPECT_EQ(echoed.data_root, data);

    EXPECT_TRUE(stdfs::exists(dir + "/run/metrics.csv"));
    EXPECT_TRUE(stdfs::exists(dir + "/run/checkpoints/step00000004.ckpt"));
    std::ifstream metrics(dir + "/run/metrics.csv");
    std::string header;
    std::getline(metrics, header);
    EXPECT_EQ(header, "step,lr,loss_f2,loss_f3,total_loss,wall_s");
}

TEST(Pretrain, InvalidConfigListsEveryErrorWithoutCreatingRunDir) {
    const std::string dir = fresh_dir("pt_invalid");
    PretrainArgs a;
    a.cfg = micro_run_config(dir + "/missing_data", dir + "/run");
    a.cfg.patch = 5;
    a.cfg.prop_k = 0;
    std::ostringstream out, err;
    EXPECT_EQ(cmd_pretrain(a, out, err), 1);
    EXPECT_NE(err.str().find("config errors:"), std::string::npos);
    EXPECT_NE(err.str().find("model"), std::string::npos);
    EXPECT_NE(err.str().find("eval"), std::string::npos);
    EXPECT_FALSE(stdfs::exists(dir + "/run"));
}

TEST(Pretrain, EchoedConfigReproducesTheRunExactly) {
    const std::string data = make_dataset("pt_echo_data", 3, 10, 41);
    const std::string dir = fresh_dir("pt_echo");
    PretrainArgs a;
    a.cfg = micro_run_config(data, dir + "/run_a");
    a.cfg.seed = 17;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_pretrain(a, out, err), 0) << err.str();

    PretrainArgs b;
    b.cfg = load_run_config(dir + "/run_a/config.resolved");
    b.cfg.run_dir = dir + "/run_b";
    std::ostringstream out2, err2;
    ASSERT_EQ(cmd_pretrain(b, out2, err2), 0) << err2.str();

    const std::string ckpt_a = read_file(dir + "/run_a/checkpoints/step00000002.ckpt");
    const std::string ckpt_b = read_file(dir + "/run_b/checkpoints/step00000002.ckpt");
    ASSERT_FALSE(ckpt_a.empty());
    EXPECT_EQ(ckpt_a, ckpt_b);
}

// ---------------------------------------------------------------------------
// eval-seg

TEST(EvalSeg, StaticCopyMatchesDirectMetricComputation) {
    const std::string data = make_dataset("ev_static_data", 3, 6, 51);
    const std::string dir = fresh_dir("ev_static");
    EvalSegArgs a;
    a.cfg = micro_run_config(data, dir);
    a.data_root = data;
    a.out_dir = dir + "/ev";
    a.static_copy = true;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_eval_seg(a, out, err), 0) << err.str();

    std::ostringstream expected;
    write_scores_header(expected);
    for (const auto& id : read_manifest(data)) {
        std::vector<LabelImage> gt;
        for (std::int64_t t = 0; t < 6; ++t)
            gt.push_back(read_png_labels(data + "/" + id + "/labels/" + frame_name(t)));
        std::vector<LabelImage> pred(5, gt[0]);
        std::vector<LabelImage> gt1(gt.begin() + 1, gt.end());
        auto score = jf_metrics(pred, gt1);
        for (auto& row : score.rows) row.frame += 1;
        write_scores_csv(expected, id, score);
    }
    EXPECT_EQ(read_file(dir + "/ev/scores.csv"), expected.str());
    EXPECT_TRUE(stdfs::exists(dir + "/ev/pred/clip0000/000005.png"));
    EXPECT_NE(out.str().find("mean over"), std::string::npos);
}

TEST(EvalSeg, RequiresExactlyOnePredictionSource) {
    EvalSegArgs a;
    a.data_root = "x";
    a.out_dir = "y";
    std::ostringstream out, err;
    EXPECT_EQ(run_command([&] { return cmd_eval_seg(a, out, err); }, err), 1);
    a.static_copy = true;
    a.random_init = true;
    EXPECT_EQ(run_command([&] { return cmd_eval_seg(a, out, err); }, err), 1);
    EXPECT_NE(err.str().find("exactly one"), std::string::npos);
}

TEST(EvalSeg, CheckpointModelProducesScoresAndMasks) {
    const std::string data = make_dataset("ev_ckpt_data", 2, 6, 61);
    const std::string dir = fresh_dir("ev_ckpt");
    EvalSegArgs a;
    a.cfg = micro_run_config(data, dir);
    a.checkpoint = make_random_checkpoint(dir, 5);
    a.data_root = data;
    a.out_dir = dir + "/ev";
    std::ostringstream out, err;
    ASSERT_EQ(cmd_eval_seg(a, out, err), 0) << err.str();
    std::ifstream scores(dir + "/ev/scores.csv");
    std::string line;
    std::getline(scores, line);
    EXPECT_EQ(line, "video,object,frame,J,F");
    std::int64_t rows = 0;
    while (std::getline(scores, line))
        if (!line.empty()) ++rows;
    EXPECT_GT(rows, 0);
    EXPECT_TRUE(stdfs::exists(dir + "/ev/pred/clip0001/000003.png"));

    // Reruns are deterministic.
    EvalSegArgs b = a;
    b.out_dir = dir + "/ev2";
    std::ostringstream out2, err2;
    ASSERT_EQ(cmd_eval_seg(b, out2, err2), 0);
    EXPECT_EQ(read_file(dir + "/ev/scores.csv"), read_file(dir + "/ev2/scores.csv"));
    EXPECT_EQ(out.str(), out2.str());
}

TEST(EvalSeg, RandomInitBaselineRunsFromModelConfig) {
    const std::string data = make_dataset("ev_rand_data", 2, 5, 71);
    const std::string dir = fresh_dir("ev_rand");
    EvalSegArgs a;
    a.cfg = micro_run_config(data, dir);
    a.cfg.seed = 9;
    a.data_root = data;
    a.out_dir = dir + "/ev";
    a.random_init = true;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_eval_seg(a, out, err), 0) << err.str();
    EXPECT_TRUE(stdfs::exists(dir + "/ev/scores.csv"));
}

TEST(EvalSeg, MissingLabelsSkipPerVideoAndFailWhenAllSkipped) {
    const std::string data = make_dataset("ev_skip_data", 3, 6, 81);
    stdfs::remove_all(data + "/clip0001/labels");
    const std::string dir = fresh_dir("ev_skip");
    EvalSegArgs a;
    a.cfg = micro_run_config(data, dir);
    a.data_root = data;
    a.out_dir = dir + "/ev";
    a.static_copy = true;
    std::ostringstream out, err;
    EXPECT_EQ(cmd_eval_seg(a, out, err), 0);
    EXPECT_NE(err.str().find("skipping clip0001"), std::string::npos);
    const std::string csv = read_file(dir + "/ev/scores.csv");
    EXPECT_NE(csv.find("clip0000"), std::string::npos);
    EXPECT_EQ(csv.find("clip0001"), std::string::npos);
    EXPECT_NE(csv.find("clip0002"), std::string::npos);

    for (const auto& id : read_manifest(data)) stdfs::remove_all(data + "/" + id + "/labels");
    EvalSegArgs b = a;
    b.out_dir = dir + "/ev_all";
    std::ostringstream out2, err2;
    EXPECT_EQ(cmd_eval_seg(b, out2, err2), 2);
    EXPECT_NE(err2.str().find("all 3 video(s) were skipped"), std::string::npos);
}

// ---------------------------------------------------------------------------
// viz-attn

TEST(VizAttn, WritesOneHeatmapPerContextFrameDeterministically) {
    const std::string data = make_dataset("viz_data", 1, 8, 91);
    const std::string dir = fresh_dir("viz");
    VizAttnArgs a;
    a.cfg = micro_run_config(data, dir);
    a.checkpoint = make_random_checkpoint(dir, 6);
    a.clip_dir = data + "/clip0000";
    a.out_dir = dir + "/viz";
    a.seed = 4;
    std::ostringstream out, err;
    ASSERT_EQ(cmd_viz_attention(a, out, err), 0) << err.str();
    EXPECT_TRUE(stdfs::exists(dir + "/viz/frame0.png"));
    EXPECT_TRUE(stdfs::exists(dir + "/viz/frame2.png"));

    std::vector<std::string> heatmaps;
    for (const auto& entry : stdfs::directory_iterator(dir + "/viz"))
        if (entry.path().filename().string().rfind("attn_", 0) == 0)
            heatmaps.push_back(entry.path().string());
    ASSERT_EQ(heatmaps.size(), 2u);  // context frames 0 and 1 for t=2

    const auto mass_pos = out.str().find("total attention mass: ");
    ASSERT_NE(mass_pos, std::string::npos);
    const double mass = std::stod(out.str().substr(mass_pos + 22));
    EXPECT_NEAR(mass, 1.0, 1e-6);

    VizAttnArgs b = a;
    b.out_dir = dir + "/viz2";
    std::ostringstream out2, err2;
    ASSERT_EQ(cmd_viz_attention(b, out2, err2), 0);
    std::sort(heatmaps.begin(), heatmaps.end());
    for (const auto& h : heatmaps) {
        const std::string rel = stdfs::path(h).filename().string();
        EXPECT_EQ(read_file(h), read_file(dir + "/viz2/" + rel)) << rel;
    }
}

TEST(VizAttn, VisibleQueryRejectedWithAutoHint) {
    const std::string data = make_dataset("viz_badq_data", 1, 8, 101);
    const std::string dir = fresh_dir("viz_badq");
    VizAttnArgs a;
    a.cfg = micro_run_config(data, dir);
    a.checkpoint = make_random_checkpoint(dir, 6);
    a.clip_dir = data + "/clip0000";
    a.out_dir = dir + "/viz";
    a.seed = 4;

    // Reproduce the command's mask sampling to find a visible patch of the
    // last frame.
    Rng root(a.seed, 0x41a7);
    Rng mrng = root.child("mask");
    const auto plan = make_mask_plan(16, micro_model().mask, mrng);
    a.query = std::to_string(plan.visible[2].front());

    std::ostringstream out, err;
    EXPECT_EQ(run_command([&] { return cmd_viz_attention(a, out, err); }, err), 1);
    EXPECT_NE(err.str().find("--query auto"), std::string::npos);

    a.query = "999";
    std::ostringstream out2, err2;
    EXPECT_EQ(run_command([&] { return cmd_viz_attention(a, out2, err2); }, err2), 1);
}

// ---------------------------------------------------------------------------
// the installed binary

TEST(Binary, UsageErrorsExitOne) {
    const std::string bin = CATMAE_BIN;
    EXPECT_EQ(run_shell(bin + " bogus-command").exit_code, 1);
    EXPECT_EQ(run_shell(bin).exit_code, 1);
    EXPECT_EQ(run_shell(bin + " gen-data").exit_code, 1);  // missing required --out
    EXPECT_EQ(run_shell(bin + " --help").exit_code, 0);
    EXPECT_EQ(run_shell("CATMAE_THREADS=0 " + bin + " selftest").exit_code, 1);
}

TEST(Binary, PipelineSmokeTest) {
    const std::string bin = CATMAE_BIN;
    const std::string dir = fresh_dir("bin_pipeline");
    const std::string common =
        " --set model.image_size=16 --set model.patch=4 --set model.frames=3"
        " --set model.enc_dim=16 --set model.enc_depth=2 --set model.enc_heads=2"
        " --set model.dec_dim=8 --set model.dec_depth=1 --set model.mask_ratios=0.5"
        " --set data.gaps=1:3 --set train.batch_size=6"
        " --set eval.radius=4 --set eval.context_frames=2";

    auto gen = run_shell(bin + " gen-data --out " + dir + "/data --clips 3 --frames 8"
                         " --size 16 --seed 2");
    ASSERT_EQ(gen.exit_code, 0) << gen.output;

    auto pt = run_shell(bin + " pretrain --data " + dir + "/data --run-dir " + dir + "/run" +
                        common);
    ASSERT_EQ(pt.exit_code, 0) << pt.output;
    EXPECT_NE(pt.output.find("pretrain done"), std::string::npos);

    auto ev = run_shell(bin + " eval-seg --checkpoint " + dir +
                        "/run/checkpoints/step00000001.ckpt --data " + dir + "/data --out " +
                        dir + "/ev" + common);
    ASSERT_EQ(ev.exit_code, 0) << ev.output;
    EXPECT_NE(ev.output.find("mean over"), std::string::npos);

    auto vz = run_shell(bin + " viz-attn --checkpoint " + dir +
                        "/run/checkpoints/step00000001.ckpt --clip " + dir +
                        "/data/clip0000 --out " + dir + "/viz --seed 3" + common);
    ASSERT_EQ(vz.exit_code, 0) << vz.output;
    EXPECT_NE(vz.output.find("total attention mass: 1"), std::string::npos);
}

TEST(Binary, SelftestPassesAndInjectedBugIsNamed) {
    const std::string bin = CATMAE_BIN;
    auto ok = run_shell(bin + " selftest");
    EXPECT_EQ(ok.exit_code, 0) << ok.output;
    EXPECT_NE(ok.output.find("selftest: PASS"), std::string::npos);

    auto bug = run_shell(bin + " selftest --inject-gradient-bug");
    EXPECT_EQ(bug.exit_code, 1);
    EXPECT_NE(bug.output.find("gelu.backward"), std::string::npos);
    EXPECT_NE(bug.output.find("selftest: FAIL"), std::string::npos);
}
