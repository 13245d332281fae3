#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "handrec/eval.hpp"
#include "handrec/metalearn.hpp"
#include "handrec/writers.hpp"

namespace handrec {

// Flat run configuration with sections; loadable from JSON, and every field
// is overridable by a CLI flag of the same dotted name (flags win).
struct RunConfig {
    std::uint64_t seed = 7;
    int workers = 1;

    // pool
    int pool_train_writers = 20;
    int pool_test_writers = 8;
    std::string pool_lexicon = "data/lexicon.txt";
    std::string pool_glyphs = "data/glyphs.txt";
    double pool_slant_max = 0.3;
    int pool_thickness_max = 1;
    double pool_noise_min = 0.0;
    double pool_noise_max = 0.08;
    int pool_jitter_max = 2;
    double pool_warp_row_prob = 0.12;
    double pool_idio_prob = 0.5;
    int pool_idio_flips = 6;
    int pool_idio_groups = 26;
    int pool_eval_images = 48;     // per test writer
    int pool_pretrain_images = 40; // per train writer

    // model
    ModelConfig model;

    // train
    int pretrain_epochs = 12;
    double pretrain_lr = 2e-3;
    int pretrain_batch = 16;
    int meta_epochs = 20;
    int steps_per_epoch = 50;
    int meta_batch = 8; // M
    int task_batch = 16; // B
    double beta = 1e-4;
    double inner_lr = 1e-3;
    double alpha_init = 1e-3;
    double dg_lambda = 0.5;
    double dg_inner_lr = 5e-4;
    std::string variant = "metahtr";
    bool ablate_gamma = false;
    bool ablate_alpha = false;

    // eval
    int k = 16;
    int n_steps = 1;
    int reps = 10;
    std::string mode = "NL";

    // paths
    std::string checkpoint_dir = "out";
    std::string report_dir = "out";

    void validate() const;
    static RunConfig from_json_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);
    std::string to_json() const;
    void apply_override(const std::string& dotted, const std::string& value);

    MetaHyper hyper() const;
    PoolConfig pool_config() const;
    ProtocolOpts protocol_opts() const;
    VariantKind variant_kind() const { return variant_from_string(variant); }
};

// (dotted name, kind) pairs for flag generation.
struct ConfigField {
    std::string name;
    enum class Kind { U64, Int, Double, Bool, String } kind;
};
std::vector<ConfigField> config_fields();

} // namespace handrec
