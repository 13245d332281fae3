#include "handrec/writers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include "handrec/rng.hpp"

namespace handrec {

namespace {

std::uint64_t fnv64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

GlyphSet g_glyphs;
bool g_glyphs_loaded = false;

constexpr int kMarginX = 2;
constexpr int kGlyphTop = 4; // (16 - 8) / 2

} // namespace

GlyphSet GlyphSet::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open glyph file: " + path);
    GlyphSet gs;
    std::array<bool, 26> seen{};
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line.size() != 1 || line[0] < 'a' || line[0] > 'z')
            throw IoError("glyph file: expected a letter line, got '" + line + "'");
        const int idx = line[0] - 'a';
        Eigen::Matrix<double, 8, 6>& m = gs.glyphs[static_cast<std::size_t>(idx)];
        for (int r = 0; r < rows; ++r) {
            if (!std::getline(in, line) || line.size() < static_cast<std::size_t>(cols))
                throw IoError("glyph file: truncated bitmap for '" +
                              std::string(1, static_cast<char>('a' + idx)) + "'");
            for (int c = 0; c < cols; ++c) m(r, c) = line[static_cast<std::size_t>(c)] == '#' ? 1.0 : 0.0;
        }
        seen[static_cast<std::size_t>(idx)] = true;
    }
    for (int i = 0; i < 26; ++i)
        if (!seen[static_cast<std::size_t>(i)])
            throw IoError("glyph file: missing letter '" + std::string(1, static_cast<char>('a' + i)) + "'");
    return gs;
}

const GlyphSet& glyph_set() {
    if (!g_glyphs_loaded) throw Error("glyph set not loaded; call set_glyph_set first");
    return g_glyphs;
}

void set_glyph_set(GlyphSet gs) {
    g_glyphs = gs;
    g_glyphs_loaded = true;
}

bool glyph_set_loaded() { return g_glyphs_loaded; }

std::vector<std::string> load_lexicon(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open lexicon file: " + path);
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        for (char c : line)
            if (c < 'a' || c > 'z')
                throw IoError("lexicon word '" + line + "' has characters outside a..z");
        words.push_back(line);
    }
    if (words.empty()) throw IoError("lexicon file is empty: " + path);
    return words;
}

const WriterStyle& WriterPool::writer(bool train_split, std::size_t id) const {
    const auto& v = train_split ? train_writers : test_writers;
    if (id >= v.size())
        throw TaskError("writer id " + std::to_string(id) + " out of range (" +
                        std::to_string(v.size()) + ")");
    return v[id];
}

namespace {

int max_word_len(const ModelConfig& model) {
    return (model.img_w - kMarginX - GlyphSet::cols) / GlyphSet::pitch + 1;
}

WriterStyle draw_style(std::uint64_t style_seed, const StyleRanges& r) {
    std::mt19937_64 rng(style_seed);
    WriterStyle s;
    s.seed = style_seed;
    s.slant = std::uniform_real_distribution<double>(-r.slant_max, r.slant_max)(rng);
    s.thickness = std::uniform_int_distribution<int>(0, r.thickness_max)(rng);
    s.noise_sigma = std::uniform_real_distribution<double>(r.noise_min, r.noise_max)(rng);
    s.jitter = std::uniform_int_distribution<int>(-r.jitter_max, r.jitter_max)(rng);
    s.glyph_warp_seed = rng() | 1ull;
    s.warp_row_prob = r.warp_row_prob;
    s.idio_prob = r.idio_prob;
    s.idio_flips = r.idio_flips;
    s.idio_groups = r.idio_groups;
    return s;
}

// Per-writer stroke perturbation. Every character may have a few rows shifted
// sideways. A writer-specific subset of characters is additionally
// personalised: characters in the same group share one toggled-cell pattern
// (a writing habit), so every occurrence in a support set teaches the same
// thing. Consistent across all of a writer's images.
Eigen::Matrix<double, 8, 6> warped_glyph(int letter, const WriterStyle& style) {
    const Eigen::Matrix<double, 8, 6>& base =
        glyph_set().glyphs[static_cast<std::size_t>(letter)];
    if (style.glyph_warp_seed == 0) return base;
    std::mt19937_64 rng(mix64(style.glyph_warp_seed, static_cast<std::uint64_t>(letter)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> dir(0, 1);
    Eigen::Matrix<double, 8, 6> out = base;
    for (int r = 0; r < GlyphSet::rows; ++r) {
        const double p = u(rng);
        const int d = dir(rng) == 0 ? -1 : 1;
        if (p >= style.warp_row_prob) continue;
        Eigen::Matrix<double, 1, 6> row = Eigen::Matrix<double, 1, 6>::Zero();
        for (int c = 0; c < GlyphSet::cols; ++c) {
            const int src = c - d;
            if (src >= 0 && src < GlyphSet::cols) row(c) = out(r, src);
        }
        out.row(r) = row;
    }
    if (u(rng) < style.idio_prob && style.idio_groups > 0) {
        const int group = letter % style.idio_groups;
        std::mt19937_64 grng(
            mix64(style.glyph_warp_seed, 0x534947ull, static_cast<std::uint64_t>(group)));
        std::uniform_int_distribution<int> rr(1, GlyphSet::rows - 2);
        std::uniform_int_distribution<int> cc(0, GlyphSet::cols - 2);
        for (int i = 0; i < style.idio_flips; ++i) {
            const int r = rr(grng), c = cc(grng);
            out(r, c) = 1.0 - out(r, c);
        }
    }
    return out;
}

} // namespace

WriterPool make_pool(const PoolConfig& cfg, const ModelConfig& model, std::uint64_t seed) {
    if (cfg.train_writers < 2)
        throw ConfigError("pool.train_writers must be >= 2, got " +
                          std::to_string(cfg.train_writers));
    if (cfg.test_writers < 1)
        throw ConfigError("pool.test_writers must be >= 1, got " +
                          std::to_string(cfg.test_writers));
    model.validate();

    if (!glyph_set_loaded()) set_glyph_set(GlyphSet::load(cfg.glyphs_path));

    WriterPool pool;
    pool.seed = seed;
    pool.model = model;
    pool.lexicon = load_lexicon(cfg.lexicon_path);
    const int maxlen = std::min(max_word_len(model), model.max_len - 1);
    for (const std::string& w : pool.lexicon)
        if (static_cast<int>(w.size()) > maxlen)
            throw ConfigError("lexicon word '" + w + "' longer than the " +
                              std::to_string(maxlen) + "-character canvas limit");

    std::unordered_set<std::uint64_t> used;
    for (int i = 0; i < cfg.train_writers; ++i) {
        const std::uint64_t s = mix64(seed, 0x5752495445525full, static_cast<std::uint64_t>(i));
        pool.train_writers.push_back(draw_style(s, cfg.ranges));
        used.insert(s);
    }
    for (int i = 0; i < cfg.test_writers; ++i) {
        const std::uint64_t s = mix64(seed, 0x5752495445525full,
                                      static_cast<std::uint64_t>(cfg.train_writers + i));
        pool.test_writers.push_back(draw_style(s, cfg.ranges));
        used.insert(s);
    }
    if (used.size() != static_cast<std::size_t>(cfg.train_writers + cfg.test_writers))
        throw Error("writer seed collision; change the pool seed");
    return pool;
}

Eigen::MatrixXd compose_canonical(const std::string& word, const ModelConfig& model) {
    WriterStyle identity;
    identity.glyph_warp_seed = 0;
    Eigen::MatrixXd canvas = Eigen::MatrixXd::Zero(model.img_h, model.img_w);
    int x = kMarginX;
    for (char c : word) {
        const Eigen::Matrix<double, 8, 6> gl = warped_glyph(char_to_index(c), identity);
        for (int r = 0; r < GlyphSet::rows; ++r)
            for (int cc = 0; cc < GlyphSet::cols; ++cc)
                canvas(kGlyphTop + r, x + cc) = std::max(canvas(kGlyphTop + r, x + cc), gl(r, cc));
        x += GlyphSet::pitch;
    }
    return canvas;
}

Eigen::MatrixXd shear_image(const Eigen::MatrixXd& img, double slant) {
    const Eigen::Index h = img.rows(), w = img.cols();
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h, w);
    for (Eigen::Index r = 0; r < h; ++r) {
        const double shift = slant * (static_cast<double>(r) - cy);
        for (Eigen::Index c = 0; c < w; ++c) {
            const double src = static_cast<double>(c) - shift;
            const double f = std::floor(src);
            const double frac = src - f;
            const auto c0 = static_cast<Eigen::Index>(f);
            double v = 0.0;
            if (c0 >= 0 && c0 < w) v += (1.0 - frac) * img(r, c0);
            if (frac != 0.0 && c0 + 1 >= 0 && c0 + 1 < w) v += frac * img(r, c0 + 1);
            out(r, c) = v;
        }
    }
    return out;
}

namespace {

Eigen::MatrixXd dilate_once(const Eigen::MatrixXd& img) {
    const Eigen::Index h = img.rows(), w = img.cols();
    Eigen::MatrixXd out = img;
    for (Eigen::Index r = 0; r < h; ++r) {
        for (Eigen::Index c = 0; c < w; ++c) {
            double v = img(r, c);
            if (r > 0) v = std::max(v, img(r - 1, c));
            if (r + 1 < h) v = std::max(v, img(r + 1, c));
            if (c > 0) v = std::max(v, img(r, c - 1));
            if (c + 1 < w) v = std::max(v, img(r, c + 1));
            out(r, c) = v;
        }
    }
    return out;
}

Eigen::MatrixXd shift_rows(const Eigen::MatrixXd& img, int dy) {
    if (dy == 0) return img;
    const Eigen::Index h = img.rows(), w = img.cols();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h, w);
    for (Eigen::Index r = 0; r < h; ++r) {
        const Eigen::Index src = r - dy;
        if (src >= 0 && src < h) out.row(r) = img.row(src);
    }
    return out;
}

} // namespace

WordImage render_word(const WriterStyle& style, const std::string& word,
                      std::uint64_t sample_seed, const ModelConfig& model) {
    const int maxlen = max_word_len(model);
    if (static_cast<int>(word.size()) > maxlen)
        throw Error("word '" + word + "' too long for the canvas (limit " +
                    std::to_string(maxlen) + ")");

    // left-to-right composition of (possibly warped) glyphs
    Eigen::MatrixXd canvas = Eigen::MatrixXd::Zero(model.img_h, model.img_w);
    int x = kMarginX;
    for (char c : word) {
        const Eigen::Matrix<double, 8, 6> gl =
            warped_glyph(char_to_index(c), style);
        for (int r = 0; r < GlyphSet::rows; ++r)
            for (int cc = 0; cc < GlyphSet::cols; ++cc)
                canvas(kGlyphTop + r, x + cc) = std::max(canvas(kGlyphTop + r, x + cc), gl(r, cc));
        x += GlyphSet::pitch;
    }

    if (style.slant != 0.0) canvas = shear_image(canvas, style.slant);
    for (int i = 0; i < style.thickness; ++i) canvas = dilate_once(canvas);
    canvas = shift_rows(canvas, style.jitter);

    if (style.noise_sigma > 0.0) {
        std::mt19937_64 rng(mix64(style.seed, fnv64(word), sample_seed));
        std::normal_distribution<double> gauss(0.0, style.noise_sigma);
        for (Eigen::Index r = 0; r < canvas.rows(); ++r)
            for (Eigen::Index c = 0; c < canvas.cols(); ++c)
                canvas(r, c) = std::clamp(canvas(r, c) + gauss(rng), 0.0, 1.0);
    } else {
        canvas = canvas.cwiseMax(0.0).cwiseMin(1.0);
    }

    WordImage img;
    img.pixels = std::move(canvas);
    img.label = word_to_label(word, model);
    return img;
}

WriterTask sample_task(const WriterPool& pool, std::size_t writer_id, int B,
                       std::uint64_t seed) {
    if (B < 1) throw Error("sample_task: B must be >= 1");
    const WriterStyle& style = pool.writer(true, writer_id);
    std::mt19937_64 rng(mix64(seed, 0x5441534bull, writer_id));
    std::uniform_int_distribution<std::size_t> pick(0, pool.lexicon.size() - 1);

    std::set<std::pair<std::size_t, std::uint64_t>> seen;
    std::vector<std::pair<std::size_t, std::uint64_t>> draws;
    while (draws.size() < static_cast<std::size_t>(2 * B)) {
        const std::size_t w = pick(rng);
        const std::uint64_t s = rng();
        if (!seen.insert({w, s}).second) continue;
        draws.push_back({w, s});
    }

    WriterTask task;
    task.writer_id = writer_id;
    for (int i = 0; i < 2 * B; ++i) {
        const auto& [w, s] = draws[static_cast<std::size_t>(i)];
        WordImage img = render_word(style, pool.lexicon[w], s, pool.model);
        (i < B ? task.support : task.val).push_back(std::move(img));
    }
    return task;
}

EvalSplit make_eval_split(const WriterPool& pool, std::size_t writer_id, int k, int total_n,
                          std::uint64_t rep_seed) {
    if (k < 0) throw TaskError("make_eval_split: k must be >= 0");
    if (k >= total_n)
        throw TaskError("make_eval_split: k=" + std::to_string(k) + " must be < total_n=" +
                        std::to_string(total_n));
    if (k == 16 && total_n <= 32)
        throw TaskError("writer ineligible: k=16 requires more than 32 images, got " +
                        std::to_string(total_n));
    const WriterStyle& style = pool.writer(false, writer_id);

    // the writer's image set is fixed by (pool seed, writer); reps only
    // reshuffle the split, so it stays constant across variants
    std::mt19937_64 data_rng(mix64(pool.seed, 0x4556414cull, writer_id));
    std::uniform_int_distribution<std::size_t> pick(0, pool.lexicon.size() - 1);
    std::set<std::pair<std::size_t, std::uint64_t>> seen;
    std::vector<WordImage> images;
    while (images.size() < static_cast<std::size_t>(total_n)) {
        const std::size_t w = pick(data_rng);
        const std::uint64_t s = data_rng();
        if (!seen.insert({w, s}).second) continue;
        images.push_back(render_word(style, pool.lexicon[w], s, pool.model));
    }

    std::vector<std::size_t> idx(static_cast<std::size_t>(total_n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rep_rng(mix64(rep_seed, 0x53504c49ull, writer_id));
    std::shuffle(idx.begin(), idx.end(), rep_rng);

    EvalSplit split;
    for (int i = 0; i < total_n; ++i) {
        WordImage& img = images[idx[static_cast<std::size_t>(i)]];
        (i < k ? split.adaptation : split.eval).push_back(std::move(img));
    }
    return split;
}

} // namespace handrec
