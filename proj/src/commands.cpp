#include "handrec/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "handrec/rng.hpp"

namespace handrec {

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(p.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    out.close();
    if (!out) throw IoError("failed writing " + path);
}

std::string curve_csv(const std::string& header, const std::vector<double>& values) {
    std::ostringstream os;
    os.precision(17);
    os << header << '\n';
    for (std::size_t i = 0; i < values.size(); ++i) os << i << ',' << values[i] << '\n';
    return os.str();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

} // namespace

WriterPool pool_from_config(const RunConfig& cfg) {
    cfg.validate();
    return make_pool(cfg.pool_config(), cfg.model, cfg.seed);
}

std::vector<WordImage> pretrain_dataset(const WriterPool& pool, int images_per_writer) {
    std::vector<WordImage> out;
    out.reserve(pool.train_writers.size() * static_cast<std::size_t>(images_per_writer));
    for (std::size_t w = 0; w < pool.train_writers.size(); ++w) {
        std::mt19937_64 rng(mix64(pool.seed, 0x50524544ull, w));
        std::uniform_int_distribution<std::size_t> pick(0, pool.lexicon.size() - 1);
        for (int i = 0; i < images_per_writer; ++i) {
            const std::size_t word = pick(rng);
            const std::uint64_t sample_seed = rng();
            out.push_back(
                render_word(pool.train_writers[w], pool.lexicon[word], sample_seed, pool.model));
        }
    }
    return out;
}

std::vector<WriterTask> sample_meta_batch(const WriterPool& pool, int M, int B,
                                          std::uint64_t seed) {
    const int n = static_cast<int>(pool.train_writers.size());
    if (M > n)
        throw ConfigError("train.meta_batch (" + std::to_string(M) +
                          ") exceeds pool.train_writers (" + std::to_string(n) + ")");
    std::mt19937_64 rng(mix64(seed, 0x4d425754ull));
    std::vector<std::size_t> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<WriterTask> tasks;
    tasks.reserve(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i)
        tasks.push_back(sample_task(pool, ids[static_cast<std::size_t>(i)], B, rng()));
    return tasks;
}

std::string variant_label(const RunConfig& cfg) {
    std::string label = cfg.variant;
    if (cfg.variant == "metahtr") {
        if (cfg.ablate_gamma) label += "_nogamma";
        if (cfg.ablate_alpha) label += "_fixedalpha";
    }
    return label;
}

std::string baseline_stem(const RunConfig& cfg) {
    return cfg.checkpoint_dir + "/baseline";
}

std::string variant_stem(const RunConfig& cfg) {
    return cfg.checkpoint_dir + "/" + variant_label(cfg);
}

void cmd_pretrain(const RunConfig& cfg) {
    WriterPool pool = pool_from_config(cfg);
    const std::vector<WordImage> dataset = pretrain_dataset(pool, cfg.pool_pretrain_images);

    ParamSet params = ParamSet::init_recognizer(cfg.model, mix64(cfg.seed, 0x494e4954ull));
    PretrainOpts opts;
    opts.epochs = cfg.pretrain_epochs;
    opts.lr = cfg.pretrain_lr;
    opts.batch = cfg.pretrain_batch;
    opts.seed = mix64(cfg.seed, 0x5054ull);
    std::vector<double> curve;
    params = pretrain(dataset, params, cfg.model, opts, &curve);

    ensure_dir(cfg.checkpoint_dir);
    MetaParams meta;
    meta.theta = std::move(params);
    CheckpointInfo info;
    info.config_hash = config_hash(cfg.model);
    info.variant = "baseline";
    info.epoch = cfg.pretrain_epochs;
    save_meta_checkpoint(baseline_stem(cfg), info, meta, VariantKind::Finetune, MetaHyper{});

    ensure_dir(cfg.report_dir);
    write_text(cfg.report_dir + "/pretrain_curve.csv", curve_csv("epoch,mean_ce", curve));
}

void cmd_meta_train(const RunConfig& cfg, std::string init_stem) {
    cfg.validate();
    if (init_stem.empty()) init_stem = baseline_stem(cfg);
    const LoadedCheckpoint init = load_meta_checkpoint(init_stem, cfg.model);

    WriterPool pool = pool_from_config(cfg);
    const VariantKind variant = cfg.variant_kind();
    const MetaHyper hyper = cfg.hyper();

    MetaParams meta = MetaParams::init(init.meta.theta, cfg.model, cfg.alpha_init,
                                       mix64(cfg.seed, 0x4d455441ull),
                                       variant == VariantKind::MetaSgd);
    AdamState adam;
    std::vector<double> curve;
    long step_counter = 0;
    for (int epoch = 0; epoch < cfg.meta_epochs; ++epoch) {
        double epoch_loss = 0.0;
        int steps_ok = 0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step, ++step_counter) {
            const std::uint64_t batch_seed =
                mix64(cfg.seed, 0x4d535450ull, static_cast<std::uint64_t>(step_counter));
            std::vector<WriterTask> tasks =
                sample_meta_batch(pool, cfg.meta_batch, cfg.task_batch, batch_seed);
            OuterStepResult res =
                outer_step(meta, tasks, cfg.beta, variant, cfg.model, hyper, adam, cfg.workers);
            for (const std::string& e : res.task_errors)
                std::cerr << "warning: task skipped: " << e << '\n';
            meta = std::move(res.meta);
            epoch_loss += res.mean_outer_loss;
            ++steps_ok;
        }
        curve.push_back(steps_ok > 0 ? epoch_loss / steps_ok : 0.0);
    }

    ensure_dir(cfg.checkpoint_dir);
    CheckpointInfo info;
    info.config_hash = config_hash(cfg.model);
    info.variant = cfg.variant;
    info.epoch = cfg.meta_epochs;
    info.ablate_gamma = hyper.ablate_gamma;
    info.ablate_alpha = hyper.ablate_alpha;
    save_meta_checkpoint(variant_stem(cfg), info, meta, variant, hyper, &adam);

    ensure_dir(cfg.report_dir);
    write_text(cfg.report_dir + "/meta_curve_" + variant_label(cfg) + ".csv",
               curve_csv("epoch,mean_outer_loss", curve));
}

MetaParams meta_from_checkpoint(const LoadedCheckpoint& loaded, const RunConfig& cfg) {
    const VariantKind variant = cfg.variant_kind();
    MetaParams meta = MetaParams::init(loaded.meta.theta, cfg.model, cfg.alpha_init,
                                       mix64(cfg.seed, 0x4d455441ull),
                                       variant == VariantKind::MetaSgd);
    if (loaded.has_gamma) meta.gamma = loaded.meta.gamma;
    if (loaded.has_alpha) meta.alpha = loaded.meta.alpha;
    if (loaded.has_alpha_pp) meta.alpha_pp = loaded.meta.alpha_pp;

    const MetaHyper hyper = cfg.hyper();
    if (variant == VariantKind::MetaHtr && !hyper.ablate_gamma && !loaded.has_gamma)
        throw ConfigError("checkpoint has no weight-net tensors but variant metahtr needs them");
    if (variant == VariantKind::MetaSgd && !loaded.has_alpha_pp)
        throw ConfigError("checkpoint has no per-parameter rates but variant metasgd needs them");
    return meta;
}

namespace {

void check_eval_compat(const LoadedCheckpoint& loaded, const RunConfig& cfg) {
    const std::string want = cfg.variant;
    const std::string have = loaded.info.variant;
    const bool ok = have == want || (want == "finetune" && have == "baseline") ||
                    (want == "dg" && have == "baseline");
    if (!ok)
        throw ConfigError("checkpoint variant '" + have + "' does not match requested '" + want +
                          "'");
    if (have == want && cfg.variant == "metahtr" &&
        (loaded.info.ablate_gamma != cfg.ablate_gamma ||
         loaded.info.ablate_alpha != cfg.ablate_alpha))
        throw ConfigError("checkpoint ablation switches do not match the requested eval");
}

} // namespace

EvalReport cmd_evaluate(const RunConfig& cfg, std::string checkpoint_stem) {
    cfg.validate();
    if (checkpoint_stem.empty())
        checkpoint_stem = cfg.variant == "finetune" ? baseline_stem(cfg) : variant_stem(cfg);
    const LoadedCheckpoint loaded = load_meta_checkpoint(checkpoint_stem, cfg.model);
    check_eval_compat(loaded, cfg);

    WriterPool pool = pool_from_config(cfg);
    const MetaParams meta = meta_from_checkpoint(loaded, cfg);
    const WraMode mode = wra_mode_from_string(cfg.mode);

    EvalReport report =
        run_protocol(meta, pool, cfg.variant_kind(), mode, cfg.protocol_opts());
    for (const std::string& s : report.skipped) std::cerr << "warning: " << s << '\n';

    ensure_dir(cfg.report_dir);
    const std::string stem = cfg.report_dir + "/eval_" + variant_label(cfg) + "_" + cfg.mode;
    write_text(stem + ".json", report.to_json());
    write_text(stem + ".csv", report.to_csv());
    return report;
}

std::vector<std::pair<std::string, EvalReport>> cmd_ablate(const RunConfig& cfg) {
    cfg.validate();
    WriterPool pool = pool_from_config(cfg);
    const WraMode mode = wra_mode_from_string(cfg.mode);
    const ProtocolOpts base = cfg.protocol_opts();

    auto try_load = [&](const std::string& stem) -> std::optional<MetaParams> {
        if (!std::filesystem::exists(stem + ".json")) {
            std::cerr << "warning: ablation arm skipped, no checkpoint at " << stem << ".json\n";
            return std::nullopt;
        }
        LoadedCheckpoint loaded = load_meta_checkpoint(stem, cfg.model);
        RunConfig arm_cfg = cfg;
        arm_cfg.variant = "metahtr";
        arm_cfg.ablate_gamma = loaded.info.ablate_gamma;
        arm_cfg.ablate_alpha = loaded.info.ablate_alpha;
        return meta_from_checkpoint(loaded, arm_cfg);
    };

    const std::optional<MetaParams> full = try_load(cfg.checkpoint_dir + "/metahtr");
    const std::optional<MetaParams> no_gamma = try_load(cfg.checkpoint_dir + "/metahtr_nogamma");
    const std::optional<MetaParams> fixed_alpha =
        try_load(cfg.checkpoint_dir + "/metahtr_fixedalpha");

    AblationArms arms;
    if (full) {
        arms.full = &*full;
        arms.k_sweep = {1, 2, 4, 8, 16, 24, 32};
        arms.step_sweep = {1, 2, 3, 5};
    }
    if (no_gamma) arms.no_gamma = &*no_gamma;
    if (fixed_alpha) arms.fixed_alpha = &*fixed_alpha;
    if (!full && !no_gamma && !fixed_alpha)
        throw ConfigError("no ablation arm checkpoints found under " + cfg.checkpoint_dir);

    const auto table = ablation_suite(arms, pool, mode, base);

    ensure_dir(cfg.report_dir);
    std::ostringstream summary;
    summary.precision(17);
    summary << "arm,variant,k,n_steps,mode,before_mean,before_std,after_mean,after_std\n";
    for (const auto& [name, report] : table) {
        std::string safe = name;
        for (char& c : safe)
            if (c == '=') c = '_';
        write_text(cfg.report_dir + "/ablate_" + safe + ".csv", report.to_csv());
        summary << name << ',' << report.variant << ',' << report.k << ',' << report.n_steps
                << ',' << wra_mode_name(report.mode) << ',' << report.before_mean << ','
                << report.before_std << ',' << report.after_mean << ',' << report.after_std
                << '\n';
    }
    write_text(cfg.report_dir + "/ablate_summary.csv", summary.str());
    return table;
}

CharDiagnostic cmd_diagnose(const RunConfig& cfg, std::string checkpoint_stem) {
    cfg.validate();
    if (checkpoint_stem.empty()) checkpoint_stem = cfg.checkpoint_dir + "/metahtr";
    const LoadedCheckpoint loaded = load_meta_checkpoint(checkpoint_stem, cfg.model);
    if (!loaded.has_gamma)
        throw ConfigError("diagnose needs a metahtr checkpoint with weight-net tensors");

    RunConfig diag_cfg = cfg;
    diag_cfg.variant = "metahtr";
    diag_cfg.ablate_gamma = false;
    WriterPool pool = pool_from_config(diag_cfg);
    const MetaParams meta = meta_from_checkpoint(loaded, diag_cfg);

    std::vector<std::size_t> writers(pool.test_writers.size());
    std::iota(writers.begin(), writers.end(), 0);
    const CharDiagnostic diag =
        char_weight_diagnostic(meta, pool, writers, diag_cfg.protocol_opts());

    ensure_dir(cfg.report_dir);
    write_text(cfg.report_dir + "/char_diagnostic.json", diag.to_json());
    return diag;
}

} // namespace handrec
