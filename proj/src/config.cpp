#include "handrec/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace handrec {

namespace {

using Kind = ConfigField::Kind;

struct Binding {
    std::string name;
    Kind kind;
    std::function<void(RunConfig&, const nlohmann::json&)> set;
    std::function<nlohmann::json(const RunConfig&)> get;
};

template <typename T>
Binding bind_field(const std::string& name, Kind kind, T RunConfig::* member) {
    return Binding{
        name, kind,
        [member, name](RunConfig& c, const nlohmann::json& v) {
            try {
                c.*member = v.get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("config field " + name + ": bad value " + v.dump());
            }
        },
        [member](const RunConfig& c) { return nlohmann::json(c.*member); }};
}

template <typename T>
Binding bind_model(const std::string& name, Kind kind, T ModelConfig::* member) {
    return Binding{
        name, kind,
        [member, name](RunConfig& c, const nlohmann::json& v) {
            try {
                c.model.*member = v.get<T>();
            } catch (const nlohmann::json::exception&) {
                throw ConfigError("config field " + name + ": bad value " + v.dump());
            }
        },
        [member](const RunConfig& c) { return nlohmann::json(c.model.*member); }};
}

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> b = {
        bind_field("seed", Kind::U64, &RunConfig::seed),
        bind_field("workers", Kind::Int, &RunConfig::workers),

        bind_field("pool.train_writers", Kind::Int, &RunConfig::pool_train_writers),
        bind_field("pool.test_writers", Kind::Int, &RunConfig::pool_test_writers),
        bind_field("pool.lexicon", Kind::String, &RunConfig::pool_lexicon),
        bind_field("pool.glyphs", Kind::String, &RunConfig::pool_glyphs),
        bind_field("pool.slant_max", Kind::Double, &RunConfig::pool_slant_max),
        bind_field("pool.thickness_max", Kind::Int, &RunConfig::pool_thickness_max),
        bind_field("pool.noise_min", Kind::Double, &RunConfig::pool_noise_min),
        bind_field("pool.noise_max", Kind::Double, &RunConfig::pool_noise_max),
        bind_field("pool.jitter_max", Kind::Int, &RunConfig::pool_jitter_max),
        bind_field("pool.warp_row_prob", Kind::Double, &RunConfig::pool_warp_row_prob),
        bind_field("pool.idio_prob", Kind::Double, &RunConfig::pool_idio_prob),
        bind_field("pool.idio_flips", Kind::Int, &RunConfig::pool_idio_flips),
        bind_field("pool.idio_groups", Kind::Int, &RunConfig::pool_idio_groups),
        bind_field("pool.eval_images", Kind::Int, &RunConfig::pool_eval_images),
        bind_field("pool.pretrain_images", Kind::Int, &RunConfig::pool_pretrain_images),

        bind_model("model.img_h", Kind::Int, &ModelConfig::img_h),
        bind_model("model.img_w", Kind::Int, &ModelConfig::img_w),
        bind_model("model.patch_h", Kind::Int, &ModelConfig::patch_h),
        bind_model("model.patch_w", Kind::Int, &ModelConfig::patch_w),
        bind_model("model.hidden", Kind::Int, &ModelConfig::hidden),
        bind_model("model.embed", Kind::Int, &ModelConfig::embed),
        bind_model("model.attn", Kind::Int, &ModelConfig::attn),
        bind_model("model.charset", Kind::Int, &ModelConfig::charset),
        bind_model("model.max_len", Kind::Int, &ModelConfig::max_len),

        bind_field("train.pretrain_epochs", Kind::Int, &RunConfig::pretrain_epochs),
        bind_field("train.pretrain_lr", Kind::Double, &RunConfig::pretrain_lr),
        bind_field("train.pretrain_batch", Kind::Int, &RunConfig::pretrain_batch),
        bind_field("train.meta_epochs", Kind::Int, &RunConfig::meta_epochs),
        bind_field("train.steps_per_epoch", Kind::Int, &RunConfig::steps_per_epoch),
        bind_field("train.meta_batch", Kind::Int, &RunConfig::meta_batch),
        bind_field("train.task_batch", Kind::Int, &RunConfig::task_batch),
        bind_field("train.beta", Kind::Double, &RunConfig::beta),
        bind_field("train.inner_lr", Kind::Double, &RunConfig::inner_lr),
        bind_field("train.alpha_init", Kind::Double, &RunConfig::alpha_init),
        bind_field("train.dg_lambda", Kind::Double, &RunConfig::dg_lambda),
        bind_field("train.dg_inner_lr", Kind::Double, &RunConfig::dg_inner_lr),
        bind_field("train.variant", Kind::String, &RunConfig::variant),
        bind_field("train.ablate_gamma", Kind::Bool, &RunConfig::ablate_gamma),
        bind_field("train.ablate_alpha", Kind::Bool, &RunConfig::ablate_alpha),

        bind_field("eval.k", Kind::Int, &RunConfig::k),
        bind_field("eval.n_steps", Kind::Int, &RunConfig::n_steps),
        bind_field("eval.reps", Kind::Int, &RunConfig::reps),
        bind_field("eval.mode", Kind::String, &RunConfig::mode),

        bind_field("paths.checkpoint_dir", Kind::String, &RunConfig::checkpoint_dir),
        bind_field("paths.report_dir", Kind::String, &RunConfig::report_dir),
    };
    return b;
}

const Binding& binding(const std::string& name) {
    for (const Binding& b : bindings())
        if (b.name == name) return b;
    throw ConfigError("unknown config field '" + name + "'");
}

} // namespace

std::vector<ConfigField> config_fields() {
    std::vector<ConfigField> out;
    for (const Binding& b : bindings()) out.push_back({b.name, b.kind});
    return out;
}

void RunConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("config: " + msg);
    };
    need(meta_batch >= 1, "train.meta_batch (M) must be >= 1");
    need(task_batch >= 1, "train.task_batch (B) must be >= 1");
    need(k >= 0, "eval.k must be >= 0");
    need(reps >= 1, "eval.reps must be >= 1");
    need(n_steps >= 0, "eval.n_steps must be >= 0");
    need(workers >= 1, "workers must be >= 1");
    need(pool_train_writers >= 2, "pool.train_writers must be >= 2");
    need(pool_test_writers >= 1, "pool.test_writers must be >= 1");
    need(pool_eval_images > k, "pool.eval_images must exceed eval.k");
    need(pretrain_epochs >= 0, "train.pretrain_epochs must be >= 0");
    need(meta_epochs >= 0, "train.meta_epochs must be >= 0");
    need(steps_per_epoch >= 1, "train.steps_per_epoch must be >= 1");
    need(beta >= 0.0, "train.beta must be >= 0");
    need(dg_lambda >= 0.0 && dg_lambda <= 1.0, "train.dg_lambda must lie in [0,1]");
    (void)variant_from_string(variant);
    (void)wra_mode_from_string(mode);
    model.validate();
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    auto consume = [&](const nlohmann::json& obj, const std::string& prefix) {
        for (const auto& [key, value] : obj.items()) {
            const std::string dotted = prefix.empty() ? key : prefix + "." + key;
            if (value.is_object()) {
                for (const auto& [k2, v2] : value.items()) binding(dotted + "." + k2).set(cfg, v2);
            } else {
                binding(dotted).set(cfg, value);
            }
        }
    };
    consume(j, "");
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return from_json_text(os.str());
}

std::string RunConfig::to_json() const {
    nlohmann::ordered_json j;
    for (const Binding& b : bindings()) {
        const std::size_t dot = b.name.find('.');
        if (dot == std::string::npos) {
            j[b.name] = b.get(*this);
        } else {
            j[b.name.substr(0, dot)][b.name.substr(dot + 1)] = b.get(*this);
        }
    }
    return j.dump(2);
}

void RunConfig::apply_override(const std::string& dotted, const std::string& value) {
    const Binding& b = binding(dotted);
    nlohmann::json v;
    switch (b.kind) {
        case Kind::U64: {
            try {
                v = static_cast<std::uint64_t>(std::stoull(value));
            } catch (...) {
                throw ConfigError("config field " + dotted + ": expected unsigned integer, got '" +
                                  value + "'");
            }
            break;
        }
        case Kind::Int: {
            try {
                v = std::stoi(value);
            } catch (...) {
                throw ConfigError("config field " + dotted + ": expected integer, got '" + value +
                                  "'");
            }
            break;
        }
        case Kind::Double: {
            try {
                v = std::stod(value);
            } catch (...) {
                throw ConfigError("config field " + dotted + ": expected number, got '" + value +
                                  "'");
            }
            break;
        }
        case Kind::Bool: {
            if (value == "true" || value == "1") v = true;
            else if (value == "false" || value == "0") v = false;
            else
                throw ConfigError("config field " + dotted + ": expected bool, got '" + value +
                                  "'");
            break;
        }
        case Kind::String:
            v = value;
            break;
    }
    b.set(*this, v);
}

MetaHyper RunConfig::hyper() const {
    MetaHyper h;
    h.beta = beta;
    h.fixed_inner_lr = inner_lr;
    h.dg_lambda = dg_lambda;
    h.dg_inner_lr = dg_inner_lr;
    h.ablate_gamma = ablate_gamma;
    h.ablate_alpha = ablate_alpha;
    return h;
}

PoolConfig RunConfig::pool_config() const {
    PoolConfig p;
    p.train_writers = pool_train_writers;
    p.test_writers = pool_test_writers;
    p.lexicon_path = pool_lexicon;
    p.glyphs_path = pool_glyphs;
    p.ranges.slant_max = pool_slant_max;
    p.ranges.thickness_max = pool_thickness_max;
    p.ranges.noise_min = pool_noise_min;
    p.ranges.noise_max = pool_noise_max;
    p.ranges.jitter_max = pool_jitter_max;
    p.ranges.warp_row_prob = pool_warp_row_prob;
    p.ranges.idio_prob = pool_idio_prob;
    p.ranges.idio_flips = pool_idio_flips;
    p.ranges.idio_groups = pool_idio_groups;
    return p;
}

ProtocolOpts RunConfig::protocol_opts() const {
    ProtocolOpts o;
    o.k = k;
    o.n_steps = n_steps;
    o.reps = reps;
    o.total_n = pool_eval_images;
    o.workers = workers;
    o.hyper = hyper();
    return o;
}

} // namespace handrec
