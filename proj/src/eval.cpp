#include "handrec/eval.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "handrec/rng.hpp"

namespace handrec {

int edit_distance(const std::string& a, const std::string& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

std::string lexicon_decode(const std::string& raw, const std::vector<std::string>& lexicon) {
    if (lexicon.empty()) throw Error("lexicon_decode: empty lexicon");
    const std::string* best = nullptr;
    int best_d = 0;
    for (const std::string& w : lexicon) {
        const int d = edit_distance(raw, w);
        if (!best || d < best_d || (d == best_d && w < *best)) {
            best = &w;
            best_d = d;
        }
    }
    return *best;
}

WraMode wra_mode_from_string(const std::string& s) {
    if (s == "L") return WraMode::Lexicon;
    if (s == "NL") return WraMode::NoLexicon;
    throw ConfigError("eval.mode must be 'L' or 'NL', got '" + s + "'");
}

std::string wra_mode_name(WraMode m) {
    return m == WraMode::Lexicon ? "L" : "NL";
}

double word_recognition_accuracy(const std::vector<std::string>& preds,
                                 const std::vector<std::string>& gts, WraMode mode,
                                 const std::vector<std::string>* lexicon) {
    if (preds.size() != gts.size() || preds.empty())
        throw Error("word_recognition_accuracy: need equal nonempty prediction/truth lists");
    if (mode == WraMode::Lexicon && (!lexicon || lexicon->empty()))
        throw ConfigError("lexicon mode requires a lexicon");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const std::string p =
            mode == WraMode::Lexicon ? lexicon_decode(preds[i], *lexicon) : preds[i];
        if (p == gts[i]) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------

namespace {

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
}

} // namespace

void EvalReport::recompute_aggregate() {
    std::vector<double> before, after;
    for (WriterReport& w : per_writer) {
        std::vector<double> b, a;
        for (const RepPair& r : w.reps) {
            b.push_back(r.before);
            a.push_back(r.after);
        }
        w.wra_before = mean_of(b);
        w.wra_after = mean_of(a);
        before.push_back(w.wra_before);
        after.push_back(w.wra_after);
    }
    before_mean = mean_of(before);
    before_std = std_of(before);
    after_mean = mean_of(after);
    after_std = std_of(after);
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["variant"] = variant;
    j["mode"] = wra_mode_name(mode);
    j["k"] = k;
    j["n_steps"] = n_steps;
    j["reps"] = reps;
    j["aggregate"] = {{"before_mean", before_mean},
                      {"before_std", before_std},
                      {"after_mean", after_mean},
                      {"after_std", after_std}};
    j["skipped"] = skipped;
    auto& pw = j["per_writer"] = nlohmann::ordered_json::array();
    for (const WriterReport& w : per_writer) {
        nlohmann::ordered_json wj;
        wj["writer_id"] = w.writer_id;
        wj["wra_before"] = w.wra_before;
        wj["wra_after"] = w.wra_after;
        auto& rj = wj["reps"] = nlohmann::ordered_json::array();
        for (const RepPair& r : w.reps)
            rj.push_back({{"rep", r.rep}, {"before", r.before}, {"after", r.after}});
        pw.push_back(std::move(wj));
    }
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    EvalReport r;
    r.variant = j.at("variant").get<std::string>();
    r.mode = wra_mode_from_string(j.at("mode").get<std::string>());
    r.k = j.at("k").get<int>();
    r.n_steps = j.at("n_steps").get<int>();
    r.reps = j.at("reps").get<int>();
    r.before_mean = j.at("aggregate").at("before_mean").get<double>();
    r.before_std = j.at("aggregate").at("before_std").get<double>();
    r.after_mean = j.at("aggregate").at("after_mean").get<double>();
    r.after_std = j.at("aggregate").at("after_std").get<double>();
    r.skipped = j.value("skipped", std::vector<std::string>{});
    for (const auto& wj : j.at("per_writer")) {
        WriterReport w;
        w.writer_id = wj.at("writer_id").get<std::uint64_t>();
        w.wra_before = wj.at("wra_before").get<double>();
        w.wra_after = wj.at("wra_after").get<double>();
        for (const auto& rj : wj.at("reps"))
            w.reps.push_back({rj.at("rep").get<int>(), rj.at("before").get<double>(),
                              rj.at("after").get<double>()});
        r.per_writer.push_back(std::move(w));
    }
    return r;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "variant,writer_id,rep,k,n_steps,mode,wra_before,wra_after\n";
    os.precision(17);
    for (const WriterReport& w : per_writer)
        for (const RepPair& r : w.reps)
            os << variant << ',' << w.writer_id << ',' << r.rep << ',' << k << ',' << n_steps
               << ',' << wra_mode_name(mode) << ',' << r.before << ',' << r.after << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------

namespace {

struct RepOutcome {
    bool ok = false;
    std::string error;
    std::vector<std::string> gts;
    std::vector<std::string> pred_before;
    std::vector<std::string> pred_after;
};

void run_indexed_jobs(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int count = std::min<int>(workers, static_cast<int>(n));
    pool.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    for (std::thread& th : pool) th.join();
}

} // namespace

std::pair<EvalReport, EvalReport> run_protocol_both(const MetaParams& meta,
                                                    const WriterPool& pool,
                                                    VariantKind variant,
                                                    const ProtocolOpts& opts) {
    const ModelConfig& cfg = pool.model;
    const std::size_t writers = pool.test_writers.size();
    if (writers == 0) throw Error("run_protocol: pool has no test writers");
    if (opts.reps < 1) throw Error("run_protocol: reps must be >= 1");

    std::vector<RepOutcome> outcomes(writers * static_cast<std::size_t>(opts.reps));
    run_indexed_jobs(outcomes.size(), opts.workers, [&](std::size_t job) {
        const std::size_t w = job / static_cast<std::size_t>(opts.reps);
        const int rep = static_cast<int>(job % static_cast<std::size_t>(opts.reps));
        RepOutcome& out = outcomes[job];
        try {
            const std::uint64_t rep_seed = mix64(pool.seed, 0x524550ull,
                                                 static_cast<std::uint64_t>(rep));
            EvalSplit split = make_eval_split(pool, w, opts.k, opts.total_n, rep_seed);
            ParamSet adapted =
                (opts.k == 0 || opts.n_steps == 0)
                    ? meta.theta
                    : adapt(meta, split.adaptation, opts.n_steps, variant, cfg, opts.hyper);
            for (const WordImage& img : split.eval) {
                out.gts.push_back(label_to_word(img.label, cfg));
                out.pred_before.push_back(
                    decode_word(meta.theta, cfg, img, DecodeMode::Greedy).predicted);
                out.pred_after.push_back(
                    decode_word(adapted, cfg, img, DecodeMode::Greedy).predicted);
            }
            out.ok = true;
        } catch (const std::exception& e) {
            out.ok = false;
            out.error = e.what();
        }
    });

    EvalReport nl;
    nl.variant = variant_name(variant);
    nl.mode = WraMode::NoLexicon;
    nl.k = opts.k;
    nl.n_steps = opts.n_steps;
    nl.reps = opts.reps;
    EvalReport lex = nl;
    lex.mode = WraMode::Lexicon;

    bool any_ok = false;
    for (std::size_t w = 0; w < writers; ++w) {
        WriterReport wr_nl, wr_l;
        wr_nl.writer_id = w;
        wr_l.writer_id = w;
        bool writer_ok = true;
        for (int rep = 0; rep < opts.reps; ++rep) {
            const RepOutcome& out =
                outcomes[w * static_cast<std::size_t>(opts.reps) + static_cast<std::size_t>(rep)];
            if (!out.ok) {
                nl.skipped.push_back("writer " + std::to_string(w) + ": " + out.error);
                lex.skipped.push_back("writer " + std::to_string(w) + ": " + out.error);
                writer_ok = false;
                break;
            }
            wr_nl.reps.push_back(
                {rep,
                 word_recognition_accuracy(out.pred_before, out.gts, WraMode::NoLexicon),
                 word_recognition_accuracy(out.pred_after, out.gts, WraMode::NoLexicon)});
            wr_l.reps.push_back(
                {rep,
                 word_recognition_accuracy(out.pred_before, out.gts, WraMode::Lexicon,
                                           &pool.lexicon),
                 word_recognition_accuracy(out.pred_after, out.gts, WraMode::Lexicon,
                                           &pool.lexicon)});
        }
        if (writer_ok) {
            nl.per_writer.push_back(std::move(wr_nl));
            lex.per_writer.push_back(std::move(wr_l));
            any_ok = true;
        }
    }
    if (!any_ok)
        throw TaskError("run_protocol: no eligible writers" +
                        (nl.skipped.empty() ? std::string() : "; first: " + nl.skipped.front()));
    nl.recompute_aggregate();
    lex.recompute_aggregate();
    return {std::move(nl), std::move(lex)};
}

EvalReport run_protocol(const MetaParams& meta, const WriterPool& pool, VariantKind variant,
                        WraMode mode, const ProtocolOpts& opts) {
    auto [nl, lex] = run_protocol_both(meta, pool, variant, opts);
    return mode == WraMode::Lexicon ? lex : nl;
}

// ---------------------------------------------------------------------------

double spearman_rho(std::span<const double> xs, std::span<const double> ys, bool* degenerate) {
    if (degenerate) *degenerate = false;
    const std::size_t n = xs.size();
    if (n != ys.size()) throw Error("spearman: length mismatch");
    if (n < 2) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    auto ranks = [](std::span<const double> v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(xs), ry = ranks(ys);
    const double mx = mean_of(rx), my = mean_of(ry);
    double num = 0.0, dx = 0.0, dy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        dx += (rx[i] - mx) * (rx[i] - mx);
        dy += (ry[i] - my) * (ry[i] - my);
    }
    if (dx == 0.0 || dy == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return num / std::sqrt(dx * dy);
}

CharDiagnostic char_weight_diagnostic(const MetaParams& meta, const WriterPool& pool,
                                      std::span<const std::size_t> writers,
                                      const ProtocolOpts& opts) {
    const ModelConfig& cfg = pool.model;
    std::array<int, 26> obs{};
    std::array<int, 26> correct{};
    std::array<double, 26> gamma_sum{};

    for (std::size_t w : writers) {
        const std::uint64_t rep_seed = mix64(pool.seed, 0x524550ull, 0);
        EvalSplit split = make_eval_split(pool, w, opts.k, opts.total_n, rep_seed);
        for (const WordImage& img : split.adaptation) {
            const DecodeResult res = decode_word(meta.theta, cfg, img, DecodeMode::TeacherForced);
            const std::vector<Tensor> G =
                classifier_step_gradients(res.trace, res.decoder_outputs, img.label);
            const std::vector<double> gammas = predict_weights(G, meta.gamma);
            for (std::size_t t = 0; t < img.label.size(); ++t) {
                const int c = img.label[t];
                if (c < 0 || c >= 26) continue; // letters only; EOS has no accuracy analogue
                const Eigen::Index tt = static_cast<Eigen::Index>(t);
                int arg = 0;
                for (Eigen::Index j = 1; j < res.trace.logits.cols(); ++j)
                    if (res.trace.logits(tt, j) > res.trace.logits(tt, arg))
                        arg = static_cast<int>(j);
                obs[static_cast<std::size_t>(c)] += 1;
                if (arg == c) correct[static_cast<std::size_t>(c)] += 1;
                gamma_sum[static_cast<std::size_t>(c)] += gammas[t];
            }
        }
    }

    CharDiagnostic diag;
    std::vector<double> accs, gms;
    for (int c = 0; c < 26; ++c) {
        if (obs[static_cast<std::size_t>(c)] < diag.min_observations) continue;
        CharDiagnostic::Row row;
        row.c = static_cast<char>('a' + c);
        row.observations = obs[static_cast<std::size_t>(c)];
        row.accuracy = static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                       static_cast<double>(obs[static_cast<std::size_t>(c)]);
        row.gamma_mean = gamma_sum[static_cast<std::size_t>(c)] /
                         static_cast<double>(obs[static_cast<std::size_t>(c)]);
        diag.rows.push_back(row);
        accs.push_back(row.accuracy);
        gms.push_back(row.gamma_mean);
    }
    diag.spearman_rho = spearman_rho(accs, gms, &diag.degenerate);
    return diag;
}

std::string CharDiagnostic::to_json() const {
    nlohmann::ordered_json j;
    j["spearman_rho"] = spearman_rho;
    j["degenerate"] = degenerate;
    j["min_observations"] = min_observations;
    auto& rows_j = j["per_character"] = nlohmann::ordered_json::array();
    for (const Row& r : rows) {
        rows_j.push_back({{"char", std::string(1, r.c)},
                          {"observations", r.observations},
                          {"accuracy", r.accuracy},
                          {"gamma_mean", r.gamma_mean}});
    }
    return j.dump(2);
}

std::vector<std::pair<std::string, EvalReport>> ablation_suite(const AblationArms& arms,
                                                               const WriterPool& pool,
                                                               WraMode mode,
                                                               const ProtocolOpts& base) {
    std::vector<std::pair<std::string, EvalReport>> table;
    if (arms.full)
        table.emplace_back("metahtr",
                           run_protocol(*arms.full, pool, VariantKind::MetaHtr, mode, base));
    if (arms.no_gamma) {
        ProtocolOpts o = base;
        o.hyper.ablate_gamma = true;
        table.emplace_back("no_gamma",
                           run_protocol(*arms.no_gamma, pool, VariantKind::MetaHtr, mode, o));
    }
    if (arms.fixed_alpha) {
        ProtocolOpts o = base;
        o.hyper.ablate_alpha = true;
        table.emplace_back("fixed_alpha",
                           run_protocol(*arms.fixed_alpha, pool, VariantKind::MetaHtr, mode, o));
    }
    for (int k : arms.k_sweep) {
        if (!arms.full) break;
        ProtocolOpts o = base;
        o.k = k;
        table.emplace_back("k=" + std::to_string(k),
                           run_protocol(*arms.full, pool, VariantKind::MetaHtr, mode, o));
    }
    for (int s : arms.step_sweep) {
        if (!arms.full) break;
        ProtocolOpts o = base;
        o.n_steps = s;
        table.emplace_back("steps=" + std::to_string(s),
                           run_protocol(*arms.full, pool, VariantKind::MetaHtr, mode, o));
    }
    return table;
}

} // namespace handrec
