#include <doctest.h>

#include <algorithm>
#include <random>

#include "handrec/eval.hpp"

using namespace handrec;

namespace {

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.hidden = 8;
    cfg.embed = 4;
    cfg.attn = 8;
    return cfg;
}

WriterPool small_pool(int train = 2, int test = 2, std::uint64_t seed = 404) {
    PoolConfig pc;
    pc.train_writers = train;
    pc.test_writers = test;
    pc.lexicon_path = HANDREC_DATA_DIR "/lexicon.txt";
    pc.glyphs_path = HANDREC_DATA_DIR "/glyphs.txt";
    return make_pool(pc, small_model(), seed);
}

} // namespace

TEST_CASE("edit distance: classic cases") {
    CHECK(edit_distance("", "abc") == 3);
    CHECK(edit_distance("covid", "covid") == 0);
    CHECK(edit_distance("kitten", "sitting") == 3);
    CHECK(edit_distance("abc", "") == 3);
    CHECK(edit_distance("ab", "ba") == 2);
}

TEST_CASE("lexicon decode: membership, tie rule, empty input") {
    const std::vector<std::string> lex{"covid", "could"};
    CHECK(lexicon_decode("covid", lex) == "covid");
    // both candidates are one edit away; lexicographic order wins
    CHECK(edit_distance("covld", "covid") == 1);
    CHECK(edit_distance("covld", "could") == 1);
    CHECK(lexicon_decode("covld", lex) == "could");

    const std::vector<std::string> lex2{"a", "bb"};
    CHECK(lexicon_decode("", lex2) == "a");
    CHECK_THROWS_AS((void)lexicon_decode("x", {}), Error);
}

TEST_CASE("wra: percentages and the lexicon inequality") {
    CHECK(word_recognition_accuracy({"a", "b"}, {"a", "b"}, WraMode::NoLexicon) == 100.0);
    CHECK(word_recognition_accuracy({"a", "x", "y", "z"}, {"a", "b", "c", "d"},
                                    WraMode::NoLexicon) == 25.0);
    const std::vector<std::string> lex{"water", "house", "stone"};
    CHECK_THROWS_AS(
        (void)word_recognition_accuracy({"water"}, {"water"}, WraMode::Lexicon, nullptr),
        ConfigError);

    // random single-character corruptions of lexicon words: L >= NL always
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> pos(0, 4), ch(0, 25), which(0, 2);
    for (int rep = 0; rep < 30; ++rep) {
        std::vector<std::string> gts, preds;
        for (int i = 0; i < 10; ++i) {
            const std::string w = lex[static_cast<std::size_t>(which(rng))];
            gts.push_back(w);
            std::string p = w;
            if (rng() % 2 == 0) p[static_cast<std::size_t>(pos(rng))] =
                static_cast<char>('a' + ch(rng));
            preds.push_back(p);
        }
        const double nl = word_recognition_accuracy(preds, gts, WraMode::NoLexicon);
        const double l = word_recognition_accuracy(preds, gts, WraMode::Lexicon, &lex);
        CHECK(l >= nl);
    }
}

TEST_CASE("wra: invariant under pair order permutation") {
    std::vector<std::string> preds{"aa", "bb", "cc", "dd"};
    std::vector<std::string> gts{"aa", "xx", "cc", "yy"};
    const double base = word_recognition_accuracy(preds, gts, WraMode::NoLexicon);
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<std::size_t> idx{0, 1, 2, 3};
        std::shuffle(idx.begin(), idx.end(), rng);
        std::vector<std::string> p2, g2;
        for (std::size_t i : idx) {
            p2.push_back(preds[i]);
            g2.push_back(gts[i]);
        }
        CHECK(word_recognition_accuracy(p2, g2, WraMode::NoLexicon) == base);
    }
}

TEST_CASE("spearman: bounds, orderings, degenerate flag") {
    bool degen = false;
    const std::vector<double> xs{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> inc{0.1, 0.2, 0.3, 0.4};
    const std::vector<double> dec{4.0, 3.0, 2.0, 1.0};
    CHECK(spearman_rho(xs, inc, &degen) == doctest::Approx(1.0));
    CHECK(!degen);
    CHECK(spearman_rho(xs, dec, &degen) == doctest::Approx(-1.0));

    const std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
    CHECK(spearman_rho(xs, flat, &degen) == 0.0);
    CHECK(degen);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> a, b;
        for (int i = 0; i < 10; ++i) {
            a.push_back(d(rng));
            b.push_back(d(rng));
        }
        const double rho = spearman_rho(a, b, &degen);
        CHECK(rho >= -1.0);
        CHECK(rho <= 1.0);
    }
}

TEST_CASE("report: aggregate consistency and serialization round-trip") {
    EvalReport r;
    r.variant = "metahtr";
    r.mode = WraMode::NoLexicon;
    r.k = 4;
    r.n_steps = 1;
    r.reps = 2;
    WriterReport w0;
    w0.writer_id = 0;
    w0.reps = {{0, 50.0, 62.5}, {1, 43.75, 56.25}};
    WriterReport w1;
    w1.writer_id = 1;
    w1.reps = {{0, 31.25, 37.5}, {1, 37.5, 43.75}};
    r.per_writer = {w0, w1};
    r.recompute_aggregate();

    CHECK(r.per_writer[0].wra_before == doctest::Approx(46.875));
    const double manual_mean =
        (r.per_writer[0].wra_before + r.per_writer[1].wra_before) / 2.0;
    CHECK(r.before_mean == doctest::Approx(manual_mean));

    const std::string js = r.to_json();
    EvalReport back = EvalReport::from_json(js);
    CHECK(back.to_json() == js);
    CHECK(back.to_csv() == r.to_csv());
    CHECK(back.per_writer.size() == 2);
    CHECK(back.per_writer[1].reps[1].after == 43.75);
}

TEST_CASE("protocol: k=0 means before equals after") {
    WriterPool pool = small_pool();
    MetaParams meta = MetaParams::init(ParamSet::init_recognizer(pool.model, 5), pool.model,
                                       1e-3, 5);
    ProtocolOpts opts;
    opts.k = 0;
    opts.n_steps = 1;
    opts.reps = 1;
    opts.total_n = 12;
    EvalReport r = run_protocol(meta, pool, VariantKind::MetaHtr, WraMode::NoLexicon, opts);
    REQUIRE(!r.per_writer.empty());
    for (const WriterReport& w : r.per_writer)
        for (const RepPair& p : w.reps) CHECK(p.before == p.after);
}

TEST_CASE("protocol: before-adaptation accuracy is shared across variants") {
    WriterPool pool = small_pool();
    MetaParams meta = MetaParams::init(ParamSet::init_recognizer(pool.model, 5), pool.model,
                                       1e-3, 5);
    ProtocolOpts opts;
    opts.k = 4;
    opts.n_steps = 1;
    opts.reps = 2;
    opts.total_n = 12;
    EvalReport a = run_protocol(meta, pool, VariantKind::MetaHtr, WraMode::NoLexicon, opts);
    EvalReport b = run_protocol(meta, pool, VariantKind::Maml, WraMode::NoLexicon, opts);
    REQUIRE(a.per_writer.size() == b.per_writer.size());
    for (std::size_t i = 0; i < a.per_writer.size(); ++i)
        for (std::size_t j = 0; j < a.per_writer[i].reps.size(); ++j)
            CHECK(a.per_writer[i].reps[j].before == b.per_writer[i].reps[j].before);
}

TEST_CASE("protocol: lexicon report dominates the unconstrained one") {
    WriterPool pool = small_pool();
    MetaParams meta = MetaParams::init(ParamSet::init_recognizer(pool.model, 6), pool.model,
                                       1e-3, 6);
    ProtocolOpts opts;
    opts.k = 2;
    opts.n_steps = 1;
    opts.reps = 1;
    opts.total_n = 10;
    auto [nl, lex] = run_protocol_both(meta, pool, VariantKind::Maml, opts);
    REQUIRE(nl.per_writer.size() == lex.per_writer.size());
    for (std::size_t i = 0; i < nl.per_writer.size(); ++i)
        for (std::size_t j = 0; j < nl.per_writer[i].reps.size(); ++j) {
            CHECK(lex.per_writer[i].reps[j].before >= nl.per_writer[i].reps[j].before);
            CHECK(lex.per_writer[i].reps[j].after >= nl.per_writer[i].reps[j].after);
        }
}

TEST_CASE("diagnostic: zero weight-net head is degenerate with rho zero") {
    WriterPool pool = small_pool();
    MetaParams meta = MetaParams::init(ParamSet::init_recognizer(pool.model, 7), pool.model,
                                       1e-3, 7);
    ProtocolOpts opts;
    opts.k = 8;
    opts.total_n = 20;
    const std::vector<std::size_t> writers{0, 1};
    CharDiagnostic diag = char_weight_diagnostic(meta, pool, writers, opts);
    CHECK(diag.degenerate);
    CHECK(diag.spearman_rho == 0.0);
    for (const auto& row : diag.rows) {
        CHECK(row.gamma_mean == 0.5);
        CHECK(row.accuracy >= 0.0);
        CHECK(row.accuracy <= 1.0);
        CHECK(row.observations >= diag.min_observations);
    }
}

TEST_CASE("ablation: empty arm request yields an empty table") {
    WriterPool pool = small_pool();
    AblationArms arms;
    const auto table = ablation_suite(arms, pool, WraMode::NoLexicon, ProtocolOpts{});
    CHECK(table.empty());
}

TEST_CASE("ablation: k sweep emits one row per k in order") {
    WriterPool pool = small_pool();
    MetaParams meta = MetaParams::init(ParamSet::init_recognizer(pool.model, 9), pool.model,
                                       1e-3, 9);
    AblationArms arms;
    arms.full = &meta;
    arms.k_sweep = {0, 2, 4};
    ProtocolOpts base;
    base.k = 2;
    base.n_steps = 1;
    base.reps = 1;
    base.total_n = 12;
    const auto table = ablation_suite(arms, pool, WraMode::NoLexicon, base);
    REQUIRE(table.size() == 4); // metahtr + three k rows
    CHECK(table[0].first == "metahtr");
    CHECK(table[1].first == "k=0");
    CHECK(table[1].second.k == 0);
    CHECK(table[2].second.k == 2);
    CHECK(table[3].second.k == 4);
}
