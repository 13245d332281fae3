#include "handrec/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace handrec {

std::string config_hash(const ModelConfig& cfg) {
    std::ostringstream os;
    os << cfg.img_h << ';' << cfg.img_w << ';' << cfg.patch_h << ';' << cfg.patch_w << ';'
       << cfg.hidden << ';' << cfg.embed << ';' << cfg.attn << ';' << cfg.charset << ';'
       << cfg.max_len;
    const std::string s = os.str();
    std::uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::ostringstream hex;
    hex << std::hex << h;
    return hex.str();
}

const Tensor* NamedTensors::find(const std::string& name) const {
    for (const auto& [n, t] : items)
        if (n == name) return &t;
    return nullptr;
}

namespace {

std::string strip_ext(std::string stem) {
    for (const char* ext : {".json", ".bin"}) {
        const std::size_t n = std::strlen(ext);
        if (stem.size() > n && stem.compare(stem.size() - n, n, ext) == 0)
            return stem.substr(0, stem.size() - n);
    }
    return stem;
}

} // namespace

void write_checkpoint(const std::string& stem_in, const CheckpointInfo& info,
                      const NamedTensors& tensors) {
    const std::string stem = strip_ext(stem_in);
    nlohmann::ordered_json manifest;
    manifest["format"] = info.format;
    manifest["config_hash"] = info.config_hash;
    manifest["variant"] = info.variant;
    manifest["epoch"] = info.epoch;
    manifest["ablate_gamma"] = info.ablate_gamma;
    manifest["ablate_alpha"] = info.ablate_alpha;
    manifest["has_adam"] = info.has_adam;
    manifest["adam_step"] = info.adam_step;

    std::vector<double> blob;
    auto& tj = manifest["tensors"] = nlohmann::ordered_json::array();
    for (const auto& [name, t] : tensors.items) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["offset"] = blob.size();
        tj.push_back(std::move(e));
        t.append_row_major(blob);
    }

    std::ofstream mf(stem + ".json", std::ios::trunc);
    if (!mf) throw IoError("cannot write " + stem + ".json");
    mf << manifest.dump(2) << '\n';
    mf.close();
    if (!mf) throw IoError("failed writing " + stem + ".json");

    std::ofstream bf(stem + ".bin", std::ios::trunc | std::ios::binary);
    if (!bf) throw IoError("cannot write " + stem + ".bin");
    bf.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(double)));
    bf.close();
    if (!bf) throw IoError("failed writing " + stem + ".bin");
}

std::pair<CheckpointInfo, NamedTensors> read_checkpoint(const std::string& stem_in) {
    const std::string stem = strip_ext(stem_in);
    std::ifstream mf(stem + ".json");
    if (!mf) throw IoError("cannot open checkpoint manifest " + stem + ".json");
    nlohmann::json manifest;
    mf >> manifest;

    std::ifstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot open checkpoint blob " + stem + ".bin");
    bf.seekg(0, std::ios::end);
    const std::streamoff bytes = bf.tellg();
    bf.seekg(0, std::ios::beg);
    if (bytes % static_cast<std::streamoff>(sizeof(double)) != 0)
        throw IoError("checkpoint blob has a partial value: " + stem + ".bin");
    std::vector<double> blob(static_cast<std::size_t>(bytes) / sizeof(double));
    bf.read(reinterpret_cast<char*>(blob.data()), bytes);
    if (!bf) throw IoError("failed reading " + stem + ".bin");

    CheckpointInfo info;
    info.format = manifest.at("format").get<int>();
    info.config_hash = manifest.at("config_hash").get<std::string>();
    info.variant = manifest.at("variant").get<std::string>();
    info.epoch = manifest.at("epoch").get<int>();
    info.ablate_gamma = manifest.value("ablate_gamma", false);
    info.ablate_alpha = manifest.value("ablate_alpha", false);
    info.has_adam = manifest.value("has_adam", false);
    info.adam_step = manifest.value("adam_step", 0L);

    NamedTensors tensors;
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const std::vector<Eigen::Index> shape = e.at("shape").get<std::vector<Eigen::Index>>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        std::size_t count = 1;
        for (Eigen::Index d : shape) count *= static_cast<std::size_t>(d);
        if (offset + count > blob.size())
            throw IoError("checkpoint tensor '" + name + "' exceeds blob size");
        tensors.items.emplace_back(name,
                                   Tensor::from_row_major(shape, blob.data() + offset, count));
    }
    return {std::move(info), std::move(tensors)};
}

void save_meta_checkpoint(const std::string& stem, const CheckpointInfo& info_in,
                          const MetaParams& meta, VariantKind variant,
                          const MetaHyper& hyper, const AdamState* adam) {
    CheckpointInfo info = info_in;
    info.has_adam = adam != nullptr && adam->initialized();
    info.adam_step = info.has_adam ? adam->step : 0;

    NamedTensors out;
    const std::vector<std::string> names = meta_var_names(meta, variant, hyper);
    const std::vector<const Tensor*> ptrs = meta_var_ptrs(meta, variant, hyper);
    for (std::size_t i = 0; i < names.size(); ++i) out.items.emplace_back(names[i], *ptrs[i]);
    if (info.has_adam) {
        if (adam->m.size() != names.size())
            throw Error("checkpoint: optimizer moments do not match variable count");
        for (std::size_t i = 0; i < names.size(); ++i)
            out.items.emplace_back("adam_m/" + names[i], adam->m[i]);
        for (std::size_t i = 0; i < names.size(); ++i)
            out.items.emplace_back("adam_v/" + names[i], adam->v[i]);
    }
    write_checkpoint(stem, info, out);
}

namespace {

// "prefix/layer/idx" -> layer grouping in file order.
ParamSet collect_param_set(const NamedTensors& tensors, const std::string& prefix) {
    ParamSet p;
    for (const auto& [name, t] : tensors.items) {
        if (name.rfind(prefix + "/", 0) != 0) continue;
        const std::string rest = name.substr(prefix.size() + 1);
        const std::size_t sep = rest.rfind('/');
        if (sep == std::string::npos) throw IoError("malformed tensor name: " + name);
        const std::string layer = rest.substr(0, sep);
        if (p.layers.empty() || p.layers.back().first != layer) {
            if (!p.layers.empty()) {
                for (const auto& [ln, _] : p.layers)
                    if (ln == layer) throw IoError("non-contiguous layer in checkpoint: " + layer);
            }
            p.layers.emplace_back(layer, std::vector<Tensor>{});
        }
        p.layers.back().second.push_back(t);
    }
    return p;
}

} // namespace

LoadedCheckpoint load_meta_checkpoint(const std::string& stem, const ModelConfig& cfg) {
    auto [info, tensors] = read_checkpoint(stem);
    const std::string expect = config_hash(cfg);
    if (info.config_hash != expect)
        throw ConfigError("checkpoint config hash " + info.config_hash +
                          " does not match current model config " + expect);

    LoadedCheckpoint out;
    out.info = info;
    out.meta.theta = collect_param_set(tensors, "theta");
    if (out.meta.theta.layers.empty()) throw IoError("checkpoint has no theta tensors");

    for (const auto& [name, t] : tensors.items) {
        if (name.rfind("gamma/", 0) == 0) {
            out.meta.gamma.tensors.push_back(t);
            out.has_gamma = true;
        } else if (name == "alpha") {
            out.meta.alpha = t;
            out.has_alpha = true;
        }
    }
    ParamSet pp = collect_param_set(tensors, "alpha_pp");
    if (!pp.layers.empty()) {
        out.meta.alpha_pp = std::move(pp);
        out.has_alpha_pp = true;
    }

    if (info.has_adam) {
        out.adam.step = info.adam_step;
        for (const auto& [name, t] : tensors.items) {
            if (name.rfind("adam_m/", 0) == 0) out.adam.m.push_back(t);
            else if (name.rfind("adam_v/", 0) == 0) out.adam.v.push_back(t);
        }
        if (out.adam.m.size() != out.adam.v.size())
            throw IoError("checkpoint optimizer moments are inconsistent");
    }
    return out;
}

} // namespace handrec
