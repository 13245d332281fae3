#pragma once

#include <string>
#include <vector>

#include "handrec/checkpoint.hpp"
#include "handrec/config.hpp"

namespace handrec {

// Orchestration used by both the CLI and tests. User/config problems raise
// ConfigError or IoError (exit 2); anything else is an internal error (1).

WriterPool pool_from_config(const RunConfig& cfg);
std::vector<WordImage> pretrain_dataset(const WriterPool& pool, int images_per_writer);
std::vector<WriterTask> sample_meta_batch(const WriterPool& pool, int M, int B,
                                          std::uint64_t seed);

// Label used in checkpoint/report filenames: variant plus ablation suffixes.
std::string variant_label(const RunConfig& cfg);

std::string baseline_stem(const RunConfig& cfg);
std::string variant_stem(const RunConfig& cfg);

// pretrain -> baseline checkpoint + training-curve CSV
void cmd_pretrain(const RunConfig& cfg);

// meta-train from a pretrained checkpoint -> MetaParams checkpoint + curve
void cmd_meta_train(const RunConfig& cfg, std::string init_stem = "");

// k-shot adaptation protocol -> JSON + CSV reports; returns the report
EvalReport cmd_evaluate(const RunConfig& cfg, std::string checkpoint_stem = "");

// ablation arms with shared splits -> per-arm CSVs + combined summary
std::vector<std::pair<std::string, EvalReport>> cmd_ablate(const RunConfig& cfg);

// character accuracy vs predicted-weight diagnostic -> JSON
CharDiagnostic cmd_diagnose(const RunConfig& cfg, std::string checkpoint_stem = "");

// Reassembles MetaParams from a checkpoint, filling fresh components where
// the file has none and the variant does not need them.
MetaParams meta_from_checkpoint(const LoadedCheckpoint& loaded, const RunConfig& cfg);

} // namespace handrec
