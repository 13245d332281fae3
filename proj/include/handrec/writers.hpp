#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "handrec/recognizer.hpp"

namespace handrec {

// One synthetic writer. Given (word, sample_seed) the style reproduces the
// exact same image; the warp seed perturbs the canonical glyph strokes
// per writer.
struct WriterStyle {
    std::uint64_t seed = 0;
    double slant = 0.0;        // shear factor
    int thickness = 0;         // dilation passes
    double noise_sigma = 0.0;  // additive pixel noise
    int jitter = 0;            // baseline offset, px
    std::uint64_t glyph_warp_seed = 0;
    // stroke perturbation strength, copied from the pool ranges
    double warp_row_prob = 0.0;  // chance a glyph row shifts one cell
    double idio_prob = 0.0;      // chance a character joins a signature group
    int idio_flips = 0;          // cells toggled by a signature pattern
    int idio_groups = 1;         // characters per-group share one pattern
};

struct StyleRanges {
    double slant_max = 0.3;   // drawn from [-slant_max, slant_max]
    int thickness_max = 1;    // drawn from {0..thickness_max}
    double noise_min = 0.0;
    double noise_max = 0.08;
    int jitter_max = 2;       // drawn from {-jitter_max..jitter_max}
    double warp_row_prob = 0.12;
    // writer "signatures": personalised characters share a per-group stroke
    // pattern, so a few support words expose the whole habit
    double idio_prob = 0.5;
    int idio_flips = 6;
    int idio_groups = 26;
};

struct WriterPool {
    std::uint64_t seed = 0;
    std::vector<WriterStyle> train_writers;
    std::vector<WriterStyle> test_writers;
    std::vector<std::string> lexicon;
    ModelConfig model; // image geometry + charset

    const WriterStyle& writer(bool train_split, std::size_t id) const;
};

struct PoolConfig {
    int train_writers = 20;
    int test_writers = 8;
    StyleRanges ranges;
    std::string lexicon_path;
    std::string glyphs_path;
};

// 8x6 canonical glyph bitmaps for a..z, loaded from the plain-text data file.
struct GlyphSet {
    static constexpr int rows = 8;
    static constexpr int cols = 6;
    static constexpr int pitch = 7; // horizontal advance per character
    std::array<Eigen::Matrix<double, 8, 6>, 26> glyphs;

    static GlyphSet load(const std::string& path);
};

std::vector<std::string> load_lexicon(const std::string& path);

// Global glyph set handle used by rendering; set once from config.
const GlyphSet& glyph_set();
void set_glyph_set(GlyphSet gs);
bool glyph_set_loaded();

WriterPool make_pool(const PoolConfig& cfg, const ModelConfig& model, std::uint64_t seed);

// Canonical composition, then shear, dilation, vertical jitter, clipped
// Gaussian noise. Deterministic in (style, word, sample_seed).
WordImage render_word(const WriterStyle& style, const std::string& word,
                      std::uint64_t sample_seed, const ModelConfig& model);

// Image with no style applied; used by tests and by render_word internally.
Eigen::MatrixXd compose_canonical(const std::string& word, const ModelConfig& model);

// Shear rows by slant*(y - center) with linear interpolation.
Eigen::MatrixXd shear_image(const Eigen::MatrixXd& img, double slant);

struct WriterTask {
    std::uint64_t writer_id = 0;
    std::vector<WordImage> support;
    std::vector<WordImage> val;
};

// 2B distinct (word, sample_seed) draws from one writer, split evenly into
// disjoint support and validation halves.
WriterTask sample_task(const WriterPool& pool, std::size_t writer_id, int B,
                       std::uint64_t seed);

struct EvalSplit {
    std::vector<WordImage> adaptation; // k images
    std::vector<WordImage> eval;       // total_n - k images
};

// The writer's total_n eval images are fixed by (pool seed, writer_id); the
// rep seed only shuffles the split, so splits are shared across variants.
EvalSplit make_eval_split(const WriterPool& pool, std::size_t writer_id, int k, int total_n,
                          std::uint64_t rep_seed);

} // namespace handrec
