#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "catmae/checkpoint.hpp"
#include "catmae/dataio.hpp"
#include "catmae/error.hpp"
#include "catmae/masking.hpp"
#include "catmae/model.hpp"
#include "catmae/optim.hpp"
#include "catmae/rng.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

struct TrainConfig {
    ClipSpec clip;
    LossSpec loss;  // empty scales -> LossSpec::defaults_for(n_frames)
    OptimizerConfig opt;
    std::int64_t batch_size = 8;
    std::int64_t repetition = 2;
    std::int64_t epochs = 1;
    std::int64_t checkpoint_every = 0;  // in optimizer steps; 0 = final only
    std::int64_t stop_after_step = 0;   // absolute step to pause at; 0 = run to the end
    std::uint64_t seed = 0;
    std::string run_dir;
    std::string resume;   // checkpoint path; empty = fresh start
    std::ostream* log = nullptr;

    void validate(const ModelConfig& mcfg) const {
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (repetition < 1) throw ConfigError("TrainConfig: repetition must be >= 1");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
        if (checkpoint_every < 0) throw ConfigError("TrainConfig: checkpoint_every must be >= 0");
        if (stop_after_step < 0) throw ConfigError("TrainConfig: stop_after_step must be >= 0");
        if (run_dir.empty()) throw ConfigError("TrainConfig: run_dir is required");
        if (clip.n_frames != mcfg.n_frames)
            throw ConfigError("TrainConfig: clip n_frames " + std::to_string(clip.n_frames) +
                              " does not match model n_frames " + std::to_string(mcfg.n_frames));
        if (clip.crop_size != mcfg.image_size)
            throw ConfigError("TrainConfig: crop_size " + std::to_string(clip.crop_size) +
                              " does not match model image_size " +
                              std::to_string(mcfg.image_size));
        clip.validate();
        if (!loss.scales.empty() &&
            loss.scales.size() != static_cast<std::size_t>(mcfg.n_frames - 1))
            throw ConfigError("TrainConfig: loss scale count does not match n_frames");
    }
};

struct TrainResult {
    std::int64_t steps = 0;  // optimizer steps completed over the whole run
    double first_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> step_losses;  // total loss per step of this invocation
    std::string final_checkpoint;
    ModelParams<float> params;
};

namespace detail {

inline std::string checkpoint_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step%08lld.ckpt", static_cast<long long>(step));
    return buf;
}

inline void write_metrics_header(std::ostream& out, std::int64_t n_frames) {
    out << "step,lr";
    for (std::int64_t t = 2; t <= n_frames; ++t) out << ",loss_f" << t;
    out << ",total_loss,wall_s\n";
}

}  // namespace detail

// Deterministic training loop. Every random choice is keyed on
// (seed, epoch, clip slot, repeat), so a resumed run replays the exact sample
// stream of an uninterrupted one. Each epoch visits every clip once; a loaded
// sequence yields `repetition` independently augmented+masked samples that
// stay adjacent in the batch stream.
inline TrainResult train(const std::string& data_root, const ModelConfig& mcfg,
                         const TrainConfig& tcfg) {
    namespace fs = std::filesystem;
    mcfg.validate();
    tcfg.validate(mcfg);

    const std::vector<std::string> clip_ids = read_manifest(data_root);
    if (clip_ids.empty())
        throw DataError(DataError::Kind::empty, "dataset " + data_root + " has no clips");

    LossSpec loss_spec = tcfg.loss;
    if (loss_spec.scales.empty()) loss_spec = LossSpec::defaults_for(mcfg.n_frames);

    const std::int64_t C = static_cast<std::int64_t>(clip_ids.size());
    const std::int64_t R = tcfg.repetition;
    const std::int64_t B = tcfg.batch_size;
    const std::int64_t samples_per_epoch = R * C;
    const std::int64_t steps_per_epoch = (samples_per_epoch + B - 1) / B;
    const std::int64_t total_steps = tcfg.epochs * steps_per_epoch;

    OptimizerConfig ocfg = tcfg.opt;
    if (ocfg.total_steps == 0) ocfg.total_steps = total_steps;
    if (ocfg.warmup_steps == 0) ocfg.warmup_steps = std::max<std::int64_t>(1, ocfg.total_steps / 10);
    ocfg.validate();

    TrainResult result;
    std::uint64_t seed = tcfg.seed;
    std::int64_t start_step = 0;
    AdamW<float> opt;
    opt.cfg = ocfg;
    if (!tcfg.resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(tcfg.resume);
        if (detail::model_config_json(ckpt.model_cfg) != detail::model_config_json(mcfg))
            throw ConfigError("resume checkpoint " + tcfg.resume +
                              " was written with a different model config");
        Rng init_rng(ckpt.seed, 0x1217);
        result.params = ModelParams<float>::init(mcfg, init_rng);
        ckpt.apply_model(result.params);
        ckpt.apply_optimizer(opt, result.params);
        opt.cfg = ocfg;
        seed = ckpt.seed;
        start_step = ckpt.step;
    } else {
        Rng init_rng(seed, 0x1217);
        result.params = ModelParams<float>::init(mcfg, init_rng);
        opt.init(result.params);
    }
    if (start_step > total_steps)
        throw ConfigError("resume checkpoint is already past the requested schedule");
    const std::int64_t end_step = tcfg.stop_after_step > 0
                                      ? std::min(tcfg.stop_after_step, total_steps)
                                      : total_steps;

    fs::create_directories(fs::path(tcfg.run_dir) / "checkpoints");
    const std::string metrics_path = (fs::path(tcfg.run_dir) / "metrics.csv").string();
    const bool fresh_csv = !fs::exists(metrics_path) || fs::file_size(metrics_path) == 0;
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw DataError(DataError::Kind::missing, "cannot open " + metrics_path);
    if (fresh_csv) detail::write_metrics_header(metrics, mcfg.n_frames);

    const Rng root(seed, 0x7121);
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t L = mcfg.seq_len();

    std::int64_t cached_epoch = -1;
    std::vector<std::int64_t> perm;
    std::int64_t cached_slot_epoch = -1, cached_slot = -1;
    std::vector<Image> slot_frames;
    std::vector<std::int64_t> slot_indices;
    std::string slot_clip_id;

    for (std::int64_t s = start_step; s < end_step; ++s) {
        const std::int64_t epoch = s / steps_per_epoch;
        const std::int64_t sie = s % steps_per_epoch;
        if (epoch != cached_epoch) {
            Rng order_rng = root.child("order").child(static_cast<std::uint64_t>(epoch));
            perm = order_rng.permutation(C);
            cached_epoch = epoch;
        }
        const std::int64_t lo = sie * B;
        const std::int64_t hi = std::min((sie + 1) * B, samples_per_epoch);
        const std::int64_t b_actual = hi - lo;

        try {
            result.params.zero_grad();
            std::vector<double> frame_means(static_cast<std::size_t>(mcfg.n_frames - 1), 0.0);
            double total_mean = 0.0;
            for (std::int64_t j = lo; j < hi; ++j) {
                const std::int64_t slot = j / R;
                const std::int64_t rep = j % R;
                if (epoch != cached_slot_epoch || slot != cached_slot) {
                    const std::string& id = clip_ids[static_cast<std::size_t>(
                        perm[static_cast<std::size_t>(slot)])];
                    const std::string dir = (fs::path(data_root) / id).string();
                    Rng load_rng = root.child("load")
                                       .child(static_cast<std::uint64_t>(epoch))
                                       .child(static_cast<std::uint64_t>(slot));
                    slot_indices = sample_frame_indices(clip_frame_count(dir), tcfg.clip, load_rng);
                    slot_frames = load_clip_frames(dir, slot_indices);
                    slot_clip_id = id;
                    cached_slot_epoch = epoch;
                    cached_slot = slot;
                }
                Rng srng = root.child("sample")
                               .child(static_cast<std::uint64_t>(epoch))
                               .child(static_cast<std::uint64_t>(slot))
                               .child(static_cast<std::uint64_t>(rep));
                FrameSequence seq;
                seq.clip_id = slot_clip_id;
                seq.frames = slot_frames;
                seq.source_indices = slot_indices;
                seq = augment(seq, tcfg.clip, srng);
                seq = vire_reverse(seq, tcfg.clip.vire_prob, srng);
                MaskPlan plan = make_mask_plan(L, mcfg.mask, srng);

                ReconstructionBatch<float> batch = forward(seq, plan, result.params);
                Tensor<float> total = total_loss(batch, loss_spec);
                scale(total, 1.0 / static_cast<double>(b_actual)).backward();
                for (std::size_t t = 0; t < frame_means.size(); ++t)
                    frame_means[t] += static_cast<double>(batch.frame_losses[t].item()) /
                                      static_cast<double>(b_actual);
                total_mean += static_cast<double>(total.item()) / static_cast<double>(b_actual);
            }

            const double lr = lr_at(s + 1, opt.cfg);
            opt.apply(result.params, lr);

            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%lld,%.10g", static_cast<long long>(s + 1), lr);
            metrics << buf;
            for (double fm : frame_means) {
                std::snprintf(buf, sizeof(buf), ",%.9g", fm);
                metrics << buf;
            }
            std::snprintf(buf, sizeof(buf), ",%.9g,%.3f\n", total_mean, wall);
            metrics << buf;
            metrics.flush();

            result.step_losses.push_back(total_mean);
            if (result.step_losses.size() == 1) result.first_loss = total_mean;
            result.final_loss = total_mean;

            const bool last = s + 1 == end_step;
            if (last || (tcfg.checkpoint_every > 0 && (s + 1) % tcfg.checkpoint_every == 0)) {
                const std::string path =
                    (fs::path(tcfg.run_dir) / "checkpoints" / detail::checkpoint_name(s + 1))
                        .string();
                save_checkpoint(path, result.params, &opt, seed, s + 1);
                result.final_checkpoint = path;
            }
            if (tcfg.log != nullptr && (sie + 1 == steps_per_epoch || last)) {
                *tcfg.log << "epoch " << (epoch + 1) << "/" << tcfg.epochs << " (effective "
                          << (epoch + 1) * R << ") step " << (s + 1) << "/" << total_steps
                          << " lr " << lr << " loss " << total_mean << "\n";
            }
        } catch (const DataError& e) {
            throw DataError(e.kind, "step " + std::to_string(s + 1) + ": " + e.what());
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(s + 1) + ": " + e.what());
        } catch (const CheckpointError& e) {
            throw CheckpointError(e.kind, "step " + std::to_string(s + 1) + ": " + e.what());
        }
    }

    result.steps = end_step;
    return result;
}

}  // namespace catmae
