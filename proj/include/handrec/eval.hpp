#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "handrec/metalearn.hpp"
#include "handrec/writers.hpp"

namespace handrec {

// Levenshtein distance with unit costs.
int edit_distance(const std::string& a, const std::string& b);

// Nearest lexicon word by edit distance; ties break lexicographically.
std::string lexicon_decode(const std::string& raw, const std::vector<std::string>& lexicon);

enum class WraMode { Lexicon, NoLexicon };
WraMode wra_mode_from_string(const std::string& s); // "L" | "NL"
std::string wra_mode_name(WraMode m);

// Percentage of exact matches; lexicon mode snaps predictions first.
double word_recognition_accuracy(const std::vector<std::string>& preds,
                                 const std::vector<std::string>& gts, WraMode mode,
                                 const std::vector<std::string>* lexicon = nullptr);

struct RepPair {
    int rep = 0;
    double before = 0.0;
    double after = 0.0;
};

struct WriterReport {
    std::uint64_t writer_id = 0;
    double wra_before = 0.0; // mean over reps
    double wra_after = 0.0;
    std::vector<RepPair> reps;
};

struct EvalReport {
    std::string variant;
    WraMode mode = WraMode::NoLexicon;
    int k = 16;
    int n_steps = 1;
    int reps = 10;
    std::vector<WriterReport> per_writer;
    std::vector<std::string> skipped; // ineligible writers, surfaced not fatal
    double before_mean = 0.0;
    double before_std = 0.0;
    double after_mean = 0.0;
    double after_std = 0.0;

    void recompute_aggregate();
    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
    std::string to_csv() const; // variant,writer_id,rep,k,n_steps,mode,wra_before,wra_after
};

struct ProtocolOpts {
    int k = 16;
    int n_steps = 1;
    int reps = 10;
    int total_n = 48; // eval images per writer
    int workers = 1;
    MetaHyper hyper;
};

// The k-shot adaptation protocol over every test writer: per rep, adapt on
// the k-set and greedy-decode the rest, before (common model) and after.
// Decodes run once; both scoring modes reuse the same predictions.
std::pair<EvalReport, EvalReport> run_protocol_both(const MetaParams& meta,
                                                    const WriterPool& pool,
                                                    VariantKind variant,
                                                    const ProtocolOpts& opts);
EvalReport run_protocol(const MetaParams& meta, const WriterPool& pool, VariantKind variant,
                        WraMode mode, const ProtocolOpts& opts);

struct CharDiagnostic {
    struct Row {
        char c = 'a';
        int observations = 0;
        double accuracy = 0.0;  // teacher-forced stepwise argmax
        double gamma_mean = 0.0;
    };
    std::vector<Row> rows; // characters with enough observations
    double spearman_rho = 0.0;
    bool degenerate = false; // too few rows or zero variance
    int min_observations = 5;

    std::string to_json() const;
};

// Per-character pre-adaptation accuracy vs mean predicted weight on support
// sets, with Spearman rank correlation between the two.
CharDiagnostic char_weight_diagnostic(const MetaParams& meta, const WriterPool& pool,
                                      std::span<const std::size_t> writers,
                                      const ProtocolOpts& opts);

// Spearman rank correlation with average ranks for ties; NaN-free: returns
// 0 with degenerate=true when either side has no variance.
double spearman_rho(std::span<const double> xs, std::span<const double> ys, bool* degenerate);

struct AblationArms {
    const MetaParams* full = nullptr;        // metahtr
    const MetaParams* no_gamma = nullptr;    // mean-CE inner loss arm
    const MetaParams* fixed_alpha = nullptr; // alpha pinned at the fixed rate
    std::vector<int> k_sweep;
    std::vector<int> step_sweep;
};

// One EvalReport per requested arm, all with shared splits.
std::vector<std::pair<std::string, EvalReport>> ablation_suite(const AblationArms& arms,
                                                               const WriterPool& pool,
                                                               WraMode mode,
                                                               const ProtocolOpts& base);

} // namespace handrec
