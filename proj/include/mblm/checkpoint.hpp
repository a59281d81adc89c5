#pragma once

#include <string>

#include "mblm/model.hpp"
#include "mblm/trainer.hpp"

namespace mblm {

/// On-disk layout: magic "MBLM", format version as a 4-byte little-endian
/// unsigned, a u64 little-endian byte length followed by a UTF-8 JSON
/// header (config, step, tokens_seen, rng_state, tensor table mapping
/// name to dtype code, dims and byte offset), then the raw tensor
/// payloads as little-endian 32-bit floats in row-major order, laid out
/// in table order. Optimizer moments ride along as "opt.m.<name>" and
/// "opt.v.<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    struct TensorEntry {
        std::string name;
        Shape dims;
        std::int64_t offset = 0;  // into the payload region
    };

    ModelConfig config;
    std::int64_t step = 0;
    std::int64_t tokens_seen = 0;
    std::string rng_state_json;  // "{}" when absent
    bool has_optimizer = false;
    std::vector<TensorEntry> tensors;  // payload order
};

void save_checkpoint(const std::string& path, const TransformerModel<float>& model,
                     const OptimizerState<float>* opt, std::int64_t step,
                     std::int64_t tokens_seen, const std::string& rng_state_json);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    TransformerModel<float> model;
    OptimizerState<float> opt;  // empty slots when the file has no moments
};

/// Rebuilds the model from the stored config and fills every weight (and
/// moment, when present) from the payload. Missing or surplus tensors are
/// data errors. opt.step mirrors meta.step: the loop applies exactly one
/// update per step, so the two counters always agree.
LoadedCheckpoint load_checkpoint(const std::string& path);

/// Reads only the header; payload bytes stay untouched.
CheckpointMeta inspect_checkpoint(const std::string& path);

}  // namespace mblm
