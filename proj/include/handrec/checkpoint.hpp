#pragma once

#include <string>
#include <utility>
#include <vector>

#include "handrec/metalearn.hpp"

namespace handrec {

// Checkpoint = <stem>.json manifest (names, shapes, byte offsets) plus
// <stem>.bin, a little-endian blob of 64-bit floats in row-major order.
// load(save(x)) is byte-identical.

struct CheckpointInfo {
    int format = 1;
    std::string config_hash;
    std::string variant; // "baseline" or a VariantKind name
    int epoch = 0;
    bool ablate_gamma = false;
    bool ablate_alpha = false;
    long adam_step = 0;
    bool has_adam = false;
};

std::string config_hash(const ModelConfig& cfg);

struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> items;

    const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::string& stem, const CheckpointInfo& info,
                      const NamedTensors& tensors);
std::pair<CheckpointInfo, NamedTensors> read_checkpoint(const std::string& stem);

// MetaParams-level helpers. Sections present in the file depend on the
// variant (a maml checkpoint carries no gamma tensors).
void save_meta_checkpoint(const std::string& stem, const CheckpointInfo& info,
                          const MetaParams& meta, VariantKind variant,
                          const MetaHyper& hyper, const AdamState* adam = nullptr);

struct LoadedCheckpoint {
    CheckpointInfo info;
    MetaParams meta;
    bool has_gamma = false;
    bool has_alpha = false;
    bool has_alpha_pp = false;
    AdamState adam;
};

// Rejects checkpoints whose config hash disagrees with cfg.
LoadedCheckpoint load_meta_checkpoint(const std::string& stem, const ModelConfig& cfg);

} // namespace handrec
