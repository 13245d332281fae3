#include <doctest.h>

#include <cmath>
#include <set>

#include "handrec/writers.hpp"

using namespace handrec;

namespace {

ModelConfig default_model() {
    ModelConfig cfg;
    return cfg;
}

PoolConfig data_pool_config(int train = 4, int test = 2) {
    PoolConfig pc;
    pc.train_writers = train;
    pc.test_writers = test;
    pc.lexicon_path = HANDREC_DATA_DIR "/lexicon.txt";
    pc.glyphs_path = HANDREC_DATA_DIR "/glyphs.txt";
    return pc;
}

void ensure_glyphs() {
    if (!glyph_set_loaded()) set_glyph_set(GlyphSet::load(HANDREC_DATA_DIR "/glyphs.txt"));
}

} // namespace

TEST_CASE("pool: same seed reproduces the identical pool") {
    const ModelConfig model = default_model();
    WriterPool a = make_pool(data_pool_config(), model, 99);
    WriterPool b = make_pool(data_pool_config(), model, 99);
    REQUIRE(a.train_writers.size() == b.train_writers.size());
    for (std::size_t i = 0; i < a.train_writers.size(); ++i) {
        CHECK(a.train_writers[i].seed == b.train_writers[i].seed);
        CHECK(a.train_writers[i].slant == b.train_writers[i].slant);
        CHECK(a.train_writers[i].noise_sigma == b.train_writers[i].noise_sigma);
    }
    CHECK(a.lexicon == b.lexicon);
}

TEST_CASE("pool: writer count minima are enforced") {
    const ModelConfig model = default_model();
    CHECK_NOTHROW((void)make_pool(data_pool_config(2, 1), model, 1));
    CHECK_THROWS_AS((void)make_pool(data_pool_config(1, 1), model, 1), ConfigError);
    CHECK_THROWS_AS((void)make_pool(data_pool_config(2, 0), model, 1), ConfigError);
}

TEST_CASE("pool: train and test writer seeds are disjoint") {
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(8, 4), model, 5);
    std::set<std::uint64_t> train_seeds, all;
    for (const WriterStyle& s : p.train_writers) {
        train_seeds.insert(s.seed);
        all.insert(s.seed);
    }
    for (const WriterStyle& s : p.test_writers) {
        CHECK(train_seeds.count(s.seed) == 0);
        all.insert(s.seed);
    }
    CHECK(all.size() == p.train_writers.size() + p.test_writers.size());
}

TEST_CASE("render: identity style reproduces the canonical composition") {
    ensure_glyphs();
    const ModelConfig model = default_model();
    WriterStyle identity;
    identity.glyph_warp_seed = 0;
    WordImage img = render_word(identity, "cave", 7, model);
    const Eigen::MatrixXd canonical = compose_canonical("cave", model);
    CHECK((img.pixels - canonical).cwiseAbs().maxCoeff() == 0.0);
    // label is the word plus EOS
    REQUIRE(img.label.size() == 5);
    CHECK(img.label[0] == 'c' - 'a');
    CHECK(img.label[4] == model.eos());
}

TEST_CASE("render: deterministic in (style, word, sample_seed)") {
    ensure_glyphs();
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(), model, 42);
    const WriterStyle& s = p.train_writers[0];
    WordImage a = render_word(s, "house", 123, model);
    WordImage b = render_word(s, "house", 123, model);
    CHECK((a.pixels - b.pixels).cwiseAbs().maxCoeff() == 0.0);
    WordImage c = render_word(s, "house", 124, model);
    if (s.noise_sigma > 0.0) CHECK((a.pixels - c.pixels).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("render: words beyond the canvas are rejected") {
    ensure_glyphs();
    const ModelConfig model = default_model();
    WriterStyle identity;
    CHECK_THROWS_AS((void)render_word(identity, "aaaaaaaaaa", 1, model), Error);
}

TEST_CASE("render: shear then inverse shear is close to the original") {
    ensure_glyphs();
    const ModelConfig model = default_model();
    const Eigen::MatrixXd img = compose_canonical("water", model);
    const double s = 0.1;
    const Eigen::MatrixXd back = shear_image(shear_image(img, s), -s);
    const double mae = (back - img).cwiseAbs().sum() /
                       static_cast<double>(img.rows() * img.cols());
    CHECK(mae < 0.02);
}

TEST_CASE("render: two writers produce visibly different images") {
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(4, 1), model, 31);
    double diff_frac_sum = 0.0;
    int count = 0;
    for (int w = 0; w < 20; ++w) {
        const std::string& word = p.lexicon[static_cast<std::size_t>(w * 7) % p.lexicon.size()];
        WordImage a = render_word(p.train_writers[0], word, 55, model);
        WordImage b = render_word(p.train_writers[1], word, 55, model);
        const auto diff = (a.pixels - b.pixels).cwiseAbs();
        diff_frac_sum += (diff.array() > 0.1).count() /
                         static_cast<double>(a.pixels.rows() * a.pixels.cols());
        ++count;
    }
    CHECK(diff_frac_sum / count >= 0.05);
}

TEST_CASE("tasks: support and validation halves are disjoint and sized B") {
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(), model, 17);
    WriterTask t16 = sample_task(p, 1, 16, 77);
    CHECK(t16.support.size() == 16);
    CHECK(t16.val.size() == 16);

    WriterTask t1 = sample_task(p, 1, 1, 78);
    CHECK(t1.support.size() == 1);
    CHECK(t1.val.size() == 1);

    // disjoint as pixel sets (same writer, distinct (word, sample_seed))
    for (const WordImage& s : t16.support)
        for (const WordImage& v : t16.val)
            CHECK((s.pixels - v.pixels).cwiseAbs().maxCoeff() > 0.0);

    WriterTask again = sample_task(p, 1, 16, 77);
    for (std::size_t i = 0; i < 16; ++i)
        CHECK((t16.support[i].pixels - again.support[i].pixels).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("eval split: sizes, determinism, and the eligibility rule") {
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(2, 2), model, 23);

    EvalSplit s = make_eval_split(p, 0, 16, 40, 5);
    CHECK(s.adaptation.size() == 16);
    CHECK(s.eval.size() == 24);

    EvalSplit s2 = make_eval_split(p, 0, 16, 40, 5);
    for (std::size_t i = 0; i < s.eval.size(); ++i)
        CHECK((s.eval[i].pixels - s2.eval[i].pixels).cwiseAbs().maxCoeff() == 0.0);

    EvalSplit empty = make_eval_split(p, 0, 0, 40, 5);
    CHECK(empty.adaptation.empty());
    CHECK(empty.eval.size() == 40);

    CHECK_THROWS_AS((void)make_eval_split(p, 0, 16, 32, 5), TaskError);
    CHECK_THROWS_AS((void)make_eval_split(p, 0, 40, 40, 5), TaskError);
}

TEST_CASE("eval split: the image set is shared across reps") {
    const ModelConfig model = default_model();
    WriterPool p = make_pool(data_pool_config(2, 1), model, 29);
    EvalSplit r0 = make_eval_split(p, 0, 4, 36, 1000);
    EvalSplit r1 = make_eval_split(p, 0, 4, 36, 2000);

    auto key = [](const WordImage& img) {
        double sum = 0.0;
        for (Eigen::Index r = 0; r < img.pixels.rows(); ++r)
            for (Eigen::Index c = 0; c < img.pixels.cols(); ++c)
                sum += img.pixels(r, c) * static_cast<double>(r * 101 + c * 7 + 1);
        return sum;
    };
    std::multiset<double> k0, k1;
    for (const auto& i : r0.adaptation) k0.insert(key(i));
    for (const auto& i : r0.eval) k0.insert(key(i));
    for (const auto& i : r1.adaptation) k1.insert(key(i));
    for (const auto& i : r1.eval) k1.insert(key(i));
    CHECK(k0 == k1);
}
