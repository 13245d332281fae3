#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "handrec/commands.hpp"

using namespace handrec;

namespace {

struct CliState {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides; // dotted -> value
    std::string init_stem;
    std::string checkpoint_stem;
};

void add_common_options(CLI::App* cmd, CliState& st) {
    cmd->add_option("--config", st.config_path, "JSON config file");

    // every config field doubles as a flag of the same dotted name
    for (const ConfigField& f : config_fields()) {
        const std::string name = "--" + f.name;
        cmd->add_option_function<std::string>(
               name,
               [&st, field = f.name](const std::string& v) { st.overrides.emplace_back(field, v); },
               "override config field " + f.name)
            ->type_name(f.kind == ConfigField::Kind::String ? "TEXT" : "VALUE");
    }

    // spec'd short forms
    cmd->add_option_function<std::string>(
        "--variant", [&st](const std::string& v) { st.overrides.emplace_back("train.variant", v); },
        "variant name (metahtr|maml|maml_fo|metasgd|anil|finetune|dg)");
    cmd->add_option_function<std::string>(
        "--k", [&st](const std::string& v) { st.overrides.emplace_back("eval.k", v); },
        "adaptation set size");
    cmd->add_option_function<std::string>(
        "--steps", [&st](const std::string& v) { st.overrides.emplace_back("eval.n_steps", v); },
        "adaptation steps");
    cmd->add_option_function<std::string>(
        "--mode", [&st](const std::string& v) { st.overrides.emplace_back("eval.mode", v); },
        "L or NL");
    cmd->add_option_function<std::string>(
        "--out",
        [&st](const std::string& v) {
            st.overrides.emplace_back("paths.checkpoint_dir", v);
            st.overrides.emplace_back("paths.report_dir", v);
        },
        "output directory for checkpoints and reports");
}

RunConfig resolve_config(const CliState& st) {
    RunConfig cfg = st.config_path.empty() ? RunConfig() : RunConfig::from_json_file(st.config_path);
    for (const auto& [name, value] : st.overrides) cfg.apply_override(name, value);
    cfg.validate();
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"writer-adaptive handwritten word recognition via meta-learning"};
    app.require_subcommand(1);

    CliState st;
    CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "supervised pretraining");
    CLI::App* meta_cmd = app.add_subcommand("meta-train", "bi-level meta-training");
    CLI::App* eval_cmd = app.add_subcommand("evaluate", "k-shot adaptation protocol");
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "ablation sweeps over shared splits");
    CLI::App* diag_cmd = app.add_subcommand("diagnose", "character accuracy vs weight diagnostic");
    for (CLI::App* c : {pretrain_cmd, meta_cmd, eval_cmd, ablate_cmd, diag_cmd})
        add_common_options(c, st);
    meta_cmd->add_option("--init", st.init_stem, "pretrained checkpoint stem");
    eval_cmd->add_option("--checkpoint", st.checkpoint_stem, "checkpoint stem to evaluate");
    diag_cmd->add_option("--checkpoint", st.checkpoint_stem, "metahtr checkpoint stem");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        const RunConfig cfg = resolve_config(st);
        if (pretrain_cmd->parsed()) {
            cmd_pretrain(cfg);
        } else if (meta_cmd->parsed()) {
            cmd_meta_train(cfg, st.init_stem);
        } else if (eval_cmd->parsed()) {
            const EvalReport report = cmd_evaluate(cfg, st.checkpoint_stem);
            std::cout << "variant " << report.variant << " mode " << wra_mode_name(report.mode)
                      << ": WRA before " << report.before_mean << " after " << report.after_mean
                      << "\n";
        } else if (ablate_cmd->parsed()) {
            const auto table = cmd_ablate(cfg);
            for (const auto& [name, report] : table)
                std::cout << name << ": before " << report.before_mean << " after "
                          << report.after_mean << "\n";
        } else if (diag_cmd->parsed()) {
            const CharDiagnostic diag = cmd_diagnose(cfg, st.checkpoint_stem);
            std::cout << "spearman_rho " << diag.spearman_rho
                      << (diag.degenerate ? " (degenerate)" : "") << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
