#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "catmae/error.hpp"
#include "catmae/model.hpp"
#include "catmae/optim.hpp"
#include "catmae/tensor.hpp"

namespace catmae {

// Checkpoint container (little-endian):
//   "CMAE" | u32 format version | u64 header length | JSON header |
//   raw f32 tensor payloads | u32 CRC32 over everything before the trailer.
// The JSON header carries the model/optimizer config, counters, and a tensor
// directory (name, dtype, shape, offset relative to the payload start).
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline nlohmann::json model_config_json(const ModelConfig& c) {
    nlohmann::json j;
    j["image_size"] = c.image_size;
    j["patch"] = c.patch;
    j["n_frames"] = c.n_frames;
    j["enc_dim"] = c.enc_dim;
    j["enc_depth"] = c.enc_depth;
    j["enc_heads"] = c.enc_heads;
    j["dec_dim"] = c.dec_dim;
    j["dec_depth"] = c.dec_depth;
    j["dec_heads"] = c.dec_heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["mask_ratios"] = c.mask.ratios;
    j["context_includes_current"] = c.context_includes_current;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.image_size = j.at("image_size").get<std::int64_t>();
    c.patch = j.at("patch").get<std::int64_t>();
    c.n_frames = j.at("n_frames").get<std::int64_t>();
    c.enc_dim = j.at("enc_dim").get<std::int64_t>();
    c.enc_depth = j.at("enc_depth").get<std::int64_t>();
    c.enc_heads = j.at("enc_heads").get<std::int64_t>();
    c.dec_dim = j.at("dec_dim").get<std::int64_t>();
    c.dec_depth = j.at("dec_depth").get<std::int64_t>();
    c.dec_heads = j.at("dec_heads").get<std::int64_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.mask.ratios = j.at("mask_ratios").get<std::vector<double>>();
    c.context_includes_current = j.at("context_includes_current").get<bool>();
    return c;
}

inline nlohmann::json optimizer_config_json(const OptimizerConfig& c) {
    nlohmann::json j;
    j["base_lr"] = c.base_lr;
    j["min_lr"] = c.min_lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["weight_decay"] = c.weight_decay;
    j["eps"] = c.eps;
    j["warmup_steps"] = c.warmup_steps;
    j["total_steps"] = c.total_steps;
    return j;
}

inline OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
    OptimizerConfig c;
    c.base_lr = j.at("base_lr").get<double>();
    c.min_lr = j.at("min_lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.eps = j.at("eps").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
    c.total_steps = j.at("total_steps").get<std::int64_t>();
    return c;
}

}  // namespace detail

struct Checkpoint {
    std::uint32_t format_version = kCheckpointVersion;
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    std::int64_t opt_step = 0;
    ModelConfig model_cfg;
    OptimizerConfig opt_cfg;
    std::map<std::string, Tensor<float>> tensors;

    // Copies model parameter values out of the checkpoint. Every "model."
    // tensor must match a registered parameter and vice versa.
    void apply_model(ModelParams<float>& params) const {
        for (const auto& e : params.entries) {
            if (tensors.find("model." + e.name) == tensors.end())
                throw CheckpointError(CheckpointError::Kind::missing_tensor,
                                      "checkpoint is missing tensor model." + e.name);
        }
        for (const auto& [name, t] : tensors) {
            if (name.rfind("model.", 0) != 0) continue;
            const std::string pname = name.substr(6);
            Tensor<float>* dst = nullptr;
            for (auto& e : params.entries)
                if (e.name == pname) {
                    dst = &e.tensor;
                    break;
                }
            if (dst == nullptr)
                throw CheckpointError(CheckpointError::Kind::unknown_tensor,
                                      "checkpoint holds unknown tensor " + name);
            if (dst->shape() != t.shape())
                throw ShapeError("checkpoint tensor " + name + " has mismatched shape");
            std::copy(t.values().begin(), t.values().end(), dst->data());
        }
    }

    void apply_optimizer(AdamW<float>& opt, const ModelParams<float>& params) const {
        opt.cfg = opt_cfg;
        opt.init(params);
        opt.step = opt_step;
        for (std::size_t pi = 0; pi < params.entries.size(); ++pi) {
            const std::string& pname = params.entries[pi].name;
            for (const char* slot : {"m", "v"}) {
                auto it = tensors.find(std::string("opt.") + slot + "." + pname);
                if (it == tensors.end())
                    throw CheckpointError(CheckpointError::Kind::missing_tensor,
                                          "checkpoint is missing optimizer state for " + pname);
                auto& dst = slot[0] == 'm' ? opt.m[pi] : opt.v[pi];
                if (it->second.values().size() != dst.size())
                    throw ShapeError("checkpoint optimizer tensor for " + pname +
                                     " has mismatched size");
                dst = it->second.values();
            }
        }
    }
};

inline void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                            const AdamW<float>* opt, std::uint64_t seed, std::int64_t step) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["step"] = step;
    header["seed"] = seed;
    header["model_config"] = detail::model_config_json(params.cfg);
    if (opt != nullptr) {
        header["optimizer_config"] = detail::optimizer_config_json(opt->cfg);
        header["optimizer_step"] = opt->step;
    }

    struct Slot {
        std::string name;
        const float* data;
        std::size_t count;
        std::vector<std::int64_t> shape;
    };
    std::vector<Slot> slots;
    for (const auto& e : params.entries)
        slots.push_back({"model." + e.name, e.tensor.values().data(), e.tensor.values().size(),
                         e.tensor.shape()});
    if (opt != nullptr) {
        if (opt->m.size() != params.entries.size())
            throw ConfigError("save_checkpoint: optimizer does not match parameter set");
        for (std::size_t pi = 0; pi < params.entries.size(); ++pi) {
            const auto& e = params.entries[pi];
            slots.push_back({"opt.m." + e.name, opt->m[pi].data(), opt->m[pi].size(),
                             e.tensor.shape()});
            slots.push_back({"opt.v." + e.name, opt->v[pi].data(), opt->v[pi].size(),
                             e.tensor.shape()});
        }
    }

    nlohmann::json dir = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& s : slots) {
        nlohmann::json entry;
        entry["name"] = s.name;
        entry["dtype"] = "f32";
        entry["shape"] = s.shape;
        entry["offset"] = offset;
        dir.push_back(entry);
        offset += s.count * sizeof(float);
    }
    header["tensors"] = dir;

    const std::string header_text = header.dump();
    std::vector<std::uint8_t> bytes;
    bytes.reserve(16 + header_text.size() + offset + 4);
    bytes.insert(bytes.end(), {'C', 'M', 'A', 'E'});
    detail::put_u32(bytes, kCheckpointVersion);
    detail::put_u64(bytes, header_text.size());
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    for (const auto& s : slots) {
        const std::size_t pos = bytes.size();
        bytes.resize(pos + s.count * sizeof(float));
        std::memcpy(bytes.data() + pos, s.data, s.count * sizeof(float));
    }
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, bytes.data(), static_cast<uInt>(bytes.size())));
    detail::put_u32(bytes, crc);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path);
    const std::streamsize size = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "short read from " + path);

    if (bytes.size() < 20)
        throw CheckpointError(CheckpointError::Kind::truncated, path + " is truncated");
    if (std::memcmp(bytes.data(), "CMAE", 4) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic, path + " is not a checkpoint");
    const std::uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::version,
                              "unsupported checkpoint version " + std::to_string(version));

    const std::uint32_t stored_crc = detail::get_u32(bytes.data() + bytes.size() - 4);
    const std::uint32_t crc = static_cast<std::uint32_t>(
        crc32(0, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
    if (crc != stored_crc)
        throw CheckpointError(CheckpointError::Kind::truncated,
                              path + " failed its integrity check");

    const std::uint64_t header_len = detail::get_u64(bytes.data() + 8);
    if (16 + header_len + 4 > bytes.size())
        throw CheckpointError(CheckpointError::Kind::truncated, path + " is truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16,
                                       bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::truncated,
                              path + " has a corrupt header: " + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.format_version = header.at("format_version").get<std::uint32_t>();
        ckpt.step = header.at("step").get<std::int64_t>();
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.model_cfg = detail::model_config_from_json(header.at("model_config"));
        if (header.contains("optimizer_config")) {
            ckpt.opt_cfg = detail::optimizer_config_from_json(header.at("optimizer_config"));
            ckpt.opt_step = header.at("optimizer_step").get<std::int64_t>();
        }
        const std::size_t payload_start = 16 + static_cast<std::size_t>(header_len);
        const std::size_t payload_size = bytes.size() - 4 - payload_start;
        for (const auto& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::string dtype = entry.at("dtype").get<std::string>();
            if (dtype != "f32")
                throw CheckpointError(CheckpointError::Kind::version,
                                      "tensor " + name + " has unsupported dtype " + dtype);
            Shape shape = entry.at("shape").get<std::vector<std::int64_t>>();
            const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
            const std::size_t count = static_cast<std::size_t>(shape_numel(shape));
            if (off + count * sizeof(float) > payload_size)
                throw CheckpointError(CheckpointError::Kind::truncated,
                                      path + " payload is truncated at tensor " + name);
            std::vector<float> vals(count);
            std::memcpy(vals.data(), bytes.data() + payload_start + off, count * sizeof(float));
            ckpt.tensors.emplace(name, Tensor<float>::from_data(shape, std::move(vals)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::truncated,
                              path + " has a corrupt header: " + e.what());
    }
    return ckpt;
}

}  // namespace catmae
