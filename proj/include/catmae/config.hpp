#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "catmae/dataio.hpp"
#include "catmae/error.hpp"
#include "catmae/labelprop.hpp"
#include "catmae/model.hpp"
#include "catmae/optim.hpp"
#include "catmae/training.hpp"

namespace catmae {

// Flat key-value run configuration. The file format is line-based:
// [section] headers, "key = value" pairs, full-line # comments. Keys are
// addressed as "section.key"; unknown keys are rejected. List-valued keys
// (data.gaps, model.mask_ratios, loss.scales) accept either one entry, which
// broadcasts to all n_frames-1 slots, or exactly n_frames-1 entries.
struct RunConfig {
    // [run]
    std::uint64_t seed = 0;
    std::string run_dir = "runs/catmae";

    // [data]
    std::string data_root = "data/train";
    std::vector<GapRange> gaps{{4, 16}};
    double crop_scale_min = 0.5;
    double crop_scale_max = 1.0;
    double flip_prob = 0.5;
    double vire_prob = 0.5;

    // [model]
    std::int64_t image_size = 224;
    std::int64_t patch = 16;
    std::int64_t n_frames = 3;
    std::int64_t enc_dim = 384, enc_depth = 12, enc_heads = 6;
    std::int64_t dec_dim = 192, dec_depth = 2, dec_heads = 0;
    double mlp_ratio = 4.0;
    std::vector<double> mask_ratios{0.95};
    bool context_includes_current = false;

    // [loss]: empty = 0.8 for every reconstruction except 1.0 for the last
    std::vector<double> loss_scales;

    // [optim]
    double base_lr = 1e-4;
    double min_lr = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
    std::int64_t warmup_steps = 0;  // 0 = 10% of total, at least 1
    std::int64_t total_steps = 0;   // 0 = epochs * steps per epoch

    // [train]
    std::int64_t batch_size = 8;
    std::int64_t repetition = 2;
    std::int64_t epochs = 1;
    std::int64_t checkpoint_every = 0;  // optimizer steps; 0 = final only
    std::int64_t stop_after_step = 0;   // 0 = run to the end

    // [eval]
    std::int64_t prop_k = 7;
    double prop_tau = 0.1;
    std::int64_t prop_context = 7;
    std::int64_t prop_radius = 20;
    std::int64_t feature_layer = -1;  // -1 = final encoder layer

    void resolve();
    std::vector<std::string> validate_all() const;

    ClipSpec to_clip_spec() const;
    ModelConfig to_model_config() const;
    LossSpec to_loss_spec() const;
    OptimizerConfig to_optimizer_config() const;
    TrainConfig to_train_config() const;
    PropagationConfig to_propagation_config() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::int64_t>(x);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected an integer, got \"" + v + "\"");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got \"" + v + "\"");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true/false, got \"" + v + "\"");
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) out.push_back(parse_double(key, part));
    return out;
}

inline std::vector<GapRange> parse_gap_list(const std::string& key, const std::string& v) {
    std::vector<GapRange> out;
    for (const auto& part : split(v, ',')) {
        const auto bounds = split(part, ':');
        if (bounds.size() != 2)
            throw ConfigError(key + ": expected lo:hi pairs, got \"" + part + "\"");
        out.push_back({parse_int(key, bounds[0]), parse_int(key, bounds[1])});
    }
    return out;
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string fmt_double_list(const std::vector<double>& vs) {
    std::string out;
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i) out += ",";
        out += fmt_double(vs[i]);
    }
    return out;
}

inline std::string fmt_gap_list(const std::vector<GapRange>& gs) {
    std::string out;
    for (std::size_t i = 0; i < gs.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(gs[i].lo) + ":" + std::to_string(gs[i].hi);
    }
    return out;
}

}  // namespace detail

// Apply one "section.key = value" assignment. Unknown keys throw ConfigError.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "run.seed") cfg.seed = parse_u64(key, value);
    else if (key == "run.dir") cfg.run_dir = value;
    else if (key == "data.root") cfg.data_root = value;
    else if (key == "data.gaps") cfg.gaps = parse_gap_list(key, value);
    else if (key == "data.crop_scale") {
        const auto bounds = split(value, ':');
        if (bounds.size() != 2)
            throw ConfigError(key + ": expected min:max, got \"" + value + "\"");
        cfg.crop_scale_min = parse_double(key, bounds[0]);
        cfg.crop_scale_max = parse_double(key, bounds[1]);
    }
    else if (key == "data.flip_prob") cfg.flip_prob = parse_double(key, value);
    else if (key == "data.vire_prob") cfg.vire_prob = parse_double(key, value);
    else if (key == "model.image_size") cfg.image_size = parse_int(key, value);
    else if (key == "model.patch") cfg.patch = parse_int(key, value);
    else if (key == "model.frames") cfg.n_frames = parse_int(key, value);
    else if (key == "model.enc_dim") cfg.enc_dim = parse_int(key, value);
    else if (key == "model.enc_depth") cfg.enc_depth = parse_int(key, value);
    else if (key == "model.enc_heads") cfg.enc_heads = parse_int(key, value);
    else if (key == "model.dec_dim") cfg.dec_dim = parse_int(key, value);
    else if (key == "model.dec_depth") cfg.dec_depth = parse_int(key, value);
    else if (key == "model.dec_heads") cfg.dec_heads = parse_int(key, value);
    else if (key == "model.mlp_ratio") cfg.mlp_ratio = parse_double(key, value);
    else if (key == "model.mask_ratios") cfg.mask_ratios = parse_double_list(key, value);
    else if (key == "model.context_includes_current")
        cfg.context_includes_current = parse_bool(key, value);
    else if (key == "loss.scales") {
        if (trim(value) == "auto") cfg.loss_scales.clear();
        else cfg.loss_scales = parse_double_list(key, value);
    }
    else if (key == "optim.base_lr") cfg.base_lr = parse_double(key, value);
    else if (key == "optim.min_lr") cfg.min_lr = parse_double(key, value);
    else if (key == "optim.beta1") cfg.beta1 = parse_double(key, value);
    else if (key == "optim.beta2") cfg.beta2 = parse_double(key, value);
    else if (key == "optim.weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "optim.eps") cfg.eps = parse_double(key, value);
    else if (key == "optim.warmup_steps") cfg.warmup_steps = parse_int(key, value);
    else if (key == "optim.total_steps") cfg.total_steps = parse_int(key, value);
    else if (key == "train.batch_size") cfg.batch_size = parse_int(key, value);
    else if (key == "train.repetition") cfg.repetition = parse_int(key, value);
    else if (key == "train.epochs") cfg.epochs = parse_int(key, value);
    else if (key == "train.checkpoint_every") cfg.checkpoint_every = parse_int(key, value);
    else if (key == "train.stop_after_step") cfg.stop_after_step = parse_int(key, value);
    else if (key == "eval.k") cfg.prop_k = parse_int(key, value);
    else if (key == "eval.tau") cfg.prop_tau = parse_double(key, value);
    else if (key == "eval.context_frames") cfg.prop_context = parse_int(key, value);
    else if (key == "eval.radius") cfg.prop_radius = parse_int(key, value);
    else if (key == "eval.feature_layer") cfg.feature_layer = parse_int(key, value);
    else throw ConfigError("unknown config key \"" + key + "\"");
}

// Parse "section.key=value" (used for --set overrides).
inline void apply_config_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override \"" + assignment + "\" is not of the form key=value");
    const std::string key = detail::trim(assignment.substr(0, eq));
    const std::string value = detail::trim(assignment.substr(eq + 1));
    if (key.find('.') == std::string::npos)
        throw ConfigError("override key \"" + key + "\" must be section.key");
    apply_config_entry(cfg, key, value);
}

inline RunConfig parse_run_config(std::istream& in, const std::string& origin) {
    RunConfig cfg;
    std::string line, section;
    std::int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": malformed section header \"" + t + "\"");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected key = value, got \"" + t + "\"");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": key \"" + key +
                              "\" appears before any [section] header");
        try {
            apply_config_entry(cfg, section + "." + key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse_run_config(in, path);
}

// Expand broadcast lists to their full n_frames-1 length and fill auto loss
// scales. Leaves invalid values alone for validate_all to report.
inline void RunConfig::resolve() {
    const std::size_t slots =
        n_frames >= 2 ? static_cast<std::size_t>(n_frames - 1) : std::size_t{0};
    if (slots > 0) {
        if (gaps.size() == 1 && slots > 1) gaps.assign(slots, gaps[0]);
        if (mask_ratios.size() == 1 && slots > 1) mask_ratios.assign(slots, mask_ratios[0]);
        if (loss_scales.empty()) loss_scales = LossSpec::defaults_for(n_frames).scales;
        else if (loss_scales.size() == 1 && slots > 1) {
            const double v = loss_scales[0];
            loss_scales.assign(slots, v);
        }
    }
}

inline ClipSpec RunConfig::to_clip_spec() const {
    ClipSpec s;
    s.n_frames = n_frames;
    s.gap_ranges = gaps;
    s.crop_size = image_size;
    s.crop_scale_min = crop_scale_min;
    s.crop_scale_max = crop_scale_max;
    s.flip_prob = flip_prob;
    s.vire_prob = vire_prob;
    return s;
}

inline ModelConfig RunConfig::to_model_config() const {
    ModelConfig m;
    m.image_size = image_size;
    m.patch = patch;
    m.n_frames = n_frames;
    m.enc_dim = enc_dim;
    m.enc_depth = enc_depth;
    m.enc_heads = enc_heads;
    m.dec_dim = dec_dim;
    m.dec_depth = dec_depth;
    m.dec_heads = dec_heads;
    m.mlp_ratio = mlp_ratio;
    m.mask.ratios = mask_ratios;
    m.context_includes_current = context_includes_current;
    return m;
}

inline LossSpec RunConfig::to_loss_spec() const {
    LossSpec s;
    s.scales = loss_scales;
    return s;
}

inline OptimizerConfig RunConfig::to_optimizer_config() const {
    OptimizerConfig o;
    o.base_lr = base_lr;
    o.min_lr = min_lr;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.weight_decay = weight_decay;
    o.eps = eps;
    o.warmup_steps = warmup_steps;
    o.total_steps = total_steps;
    return o;
}

inline TrainConfig RunConfig::to_train_config() const {
    TrainConfig t;
    t.clip = to_clip_spec();
    t.loss = to_loss_spec();
    t.opt = to_optimizer_config();
    t.batch_size = batch_size;
    t.repetition = repetition;
    t.epochs = epochs;
    t.checkpoint_every = checkpoint_every;
    t.stop_after_step = stop_after_step;
    t.seed = seed;
    t.run_dir = run_dir;
    return t;
}

inline PropagationConfig RunConfig::to_propagation_config() const {
    PropagationConfig p;
    p.k = prop_k;
    p.tau = prop_tau;
    p.m = prop_context;
    p.r = prop_radius;
    p.feature_layer = feature_layer;
    return p;
}

// Collect every validation failure instead of stopping at the first one.
inline std::vector<std::string> RunConfig::validate_all() const {
    std::vector<std::string> errors;
    auto check = [&errors](const char* what, auto&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            errors.push_back(std::string(what) + ": " + e.what());
        }
    };
    check("model", [this] { to_model_config().validate(); });
    check("data", [this] { to_clip_spec().validate(); });
    check("loss", [this] {
        const auto s = to_loss_spec();
        s.validate();
        if (s.scales.size() != static_cast<std::size_t>(n_frames - 1))
            throw ConfigError(std::to_string(s.scales.size()) + " scales for " +
                              std::to_string(n_frames) + " frames");
    });
    check("optim", [this] {
        auto o = to_optimizer_config();
        if (o.total_steps == 0) {
            // derived later from the dataset; validate the rest against a stand-in
            o.total_steps = 1;
            o.warmup_steps = 0;
        }
        o.validate();
    });
    check("train", [this] {
        auto t = to_train_config();
        t.run_dir = t.run_dir.empty() ? "runs/catmae" : t.run_dir;
        t.validate(to_model_config());
    });
    check("eval", [this] { to_propagation_config().validate(); });
    return errors;
}

// Canonical text form: every key in fixed order, resolved values. Parsing the
// rendered text reproduces the config exactly.
inline std::string render_run_config(const RunConfig& c) {
    using namespace detail;
    std::ostringstream os;
    os << "[run]\n";
    os << "seed = " << c.seed << "\n";
    os << "dir = " << c.run_dir << "\n";
    os << "\n[data]\n";
    os << "root = " << c.data_root << "\n";
    os << "gaps = " << fmt_gap_list(c.gaps) << "\n";
    os << "crop_scale = " << fmt_double(c.crop_scale_min) << ":" << fmt_double(c.crop_scale_max)
       << "\n";
    os << "flip_prob = " << fmt_double(c.flip_prob) << "\n";
    os << "vire_prob = " << fmt_double(c.vire_prob) << "\n";
    os << "\n[model]\n";
    os << "image_size = " << c.image_size << "\n";
    os << "patch = " << c.patch << "\n";
    os << "frames = " << c.n_frames << "\n";
    os << "enc_dim = " << c.enc_dim << "\n";
    os << "enc_depth = " << c.enc_depth << "\n";
    os << "enc_heads = " << c.enc_heads << "\n";
    os << "dec_dim = " << c.dec_dim << "\n";
    os << "dec_depth = " << c.dec_depth << "\n";
    os << "dec_heads = " << c.dec_heads << "\n";
    os << "mlp_ratio = " << fmt_double(c.mlp_ratio) << "\n";
    os << "mask_ratios = " << fmt_double_list(c.mask_ratios) << "\n";
    os << "context_includes_current = " << (c.context_includes_current ? "true" : "false")
       << "\n";
    os << "\n[loss]\n";
    os << "scales = " << (c.loss_scales.empty() ? "auto" : fmt_double_list(c.loss_scales))
       << "\n";
    os << "\n[optim]\n";
    os << "base_lr = " << fmt_double(c.base_lr) << "\n";
    os << "min_lr = " << fmt_double(c.min_lr) << "\n";
    os << "beta1 = " << fmt_double(c.beta1) << "\n";
    os << "beta2 = " << fmt_double(c.beta2) << "\n";
    os << "weight_decay = " << fmt_double(c.weight_decay) << "\n";
    os << "eps = " << fmt_double(c.eps) << "\n";
    os << "warmup_steps = " << c.warmup_steps << "\n";
    os << "total_steps = " << c.total_steps << "\n";
    os << "\n[train]\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "repetition = " << c.repetition << "\n";
    os << "epochs = " << c.epochs << "\n";
    os << "checkpoint_every = " << c.checkpoint_every << "\n";
    os << "stop_after_step = " << c.stop_after_step << "\n";
    os << "\n[eval]\n";
    os << "k = " << c.prop_k << "\n";
    os << "tau = " << fmt_double(c.prop_tau) << "\n";
    os << "context_frames = " << c.prop_context << "\n";
    os << "radius = " << c.prop_radius << "\n";
    os << "feature_layer = " << c.feature_layer << "\n";
    return os.str();
}

inline void write_resolved_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::missing, "cannot write " + path);
    out << render_run_config(cfg);
}

}  // namespace catmae
