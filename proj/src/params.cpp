#include "handrec/params.hpp"

#include <cmath>

#include "handrec/rng.hpp"

namespace handrec {

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("model config: " + what);
    };
    need(img_h > 0 && img_w > 0, "image dims must be positive");
    need(patch_h > 0 && patch_w > 0, "patch dims must be positive");
    need(img_h % patch_h == 0 && img_w % patch_w == 0,
         "image dims must be divisible by patch dims");
    need(hidden >= 2 && hidden % 2 == 0, "hidden must be even and >= 2");
    need(embed >= 1, "embed must be >= 1");
    need(attn >= 1, "attn must be >= 1");
    need(charset >= 2, "charset must be >= 2");
    need(max_len >= 1, "max_len must be >= 1");
}

std::vector<std::string> recognizer_layer_names() {
    return {"encoder", "context", "attention", "decoder", "embedding", "classifier"};
}

namespace {

Tensor uniform_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
    const double s = 1.0 / std::sqrt(static_cast<double>(c));
    std::uniform_real_distribution<double> d(-s, s);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
    return Tensor::from_matrix(m);
}

Tensor uniform_vec(std::mt19937_64& rng, Eigen::Index n, Eigen::Index fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> d(-s, s);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return Tensor::from_vector(v);
}

// Wz Uz bz Wr Ur br Wh Uh bh
void push_cell(std::vector<Tensor>& out, std::mt19937_64& rng, int in, int state) {
    for (int gate = 0; gate < 3; ++gate) {
        out.push_back(uniform_mat(rng, state, in));
        out.push_back(uniform_mat(rng, state, state));
        out.push_back(Tensor::zeros(state));
    }
}

void push_cell_zero(std::vector<Tensor>& out, int in, int state) {
    for (int gate = 0; gate < 3; ++gate) {
        out.push_back(Tensor::zeros(state, in));
        out.push_back(Tensor::zeros(state, state));
        out.push_back(Tensor::zeros(state));
    }
}

} // namespace

ParamSet ParamSet::init_recognizer(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(mix64(seed, 0x7061726d73ull));
    const int hc = cfg.hidden / 2;
    ParamSet p;

    std::vector<Tensor> enc;
    enc.push_back(uniform_mat(rng, cfg.hidden, cfg.patch_dim()));
    enc.push_back(Tensor::zeros(cfg.hidden));
    p.layers.emplace_back("encoder", std::move(enc));

    std::vector<Tensor> ctx;
    push_cell(ctx, rng, cfg.hidden, hc); // forward
    push_cell(ctx, rng, cfg.hidden, hc); // backward
    p.layers.emplace_back("context", std::move(ctx));

    std::vector<Tensor> att;
    att.push_back(uniform_mat(rng, cfg.attn, cfg.hidden)); // W_s
    att.push_back(uniform_mat(rng, cfg.attn, cfg.hidden)); // W_h
    att.push_back(Tensor::zeros(cfg.attn));                // b_a
    att.push_back(uniform_vec(rng, cfg.attn, cfg.attn));   // v
    p.layers.emplace_back("attention", std::move(att));

    std::vector<Tensor> dec;
    push_cell(dec, rng, cfg.embed + cfg.hidden, cfg.hidden);
    p.layers.emplace_back("decoder", std::move(dec));

    std::vector<Tensor> emb;
    emb.push_back(uniform_mat(rng, cfg.charset + 1, cfg.embed));
    p.layers.emplace_back("embedding", std::move(emb));

    std::vector<Tensor> cls;
    cls.push_back(uniform_mat(rng, cfg.charset, cfg.hidden)); // W_o
    cls.push_back(Tensor::zeros(cfg.charset));                // b_o
    p.layers.emplace_back("classifier", std::move(cls));
    return p;
}

ParamSet ParamSet::zeros_recognizer(const ModelConfig& cfg) {
    cfg.validate();
    const int hc = cfg.hidden / 2;
    ParamSet p;
    std::vector<Tensor> enc{Tensor::zeros(cfg.hidden, cfg.patch_dim()),
                            Tensor::zeros(cfg.hidden)};
    p.layers.emplace_back("encoder", std::move(enc));
    std::vector<Tensor> ctx;
    push_cell_zero(ctx, cfg.hidden, hc);
    push_cell_zero(ctx, cfg.hidden, hc);
    p.layers.emplace_back("context", std::move(ctx));
    std::vector<Tensor> att{Tensor::zeros(cfg.attn, cfg.hidden),
                            Tensor::zeros(cfg.attn, cfg.hidden), Tensor::zeros(cfg.attn),
                            Tensor::zeros(cfg.attn)};
    p.layers.emplace_back("attention", std::move(att));
    std::vector<Tensor> dec;
    push_cell_zero(dec, cfg.embed + cfg.hidden, cfg.hidden);
    p.layers.emplace_back("decoder", std::move(dec));
    std::vector<Tensor> emb{Tensor::zeros(cfg.charset + 1, cfg.embed)};
    p.layers.emplace_back("embedding", std::move(emb));
    std::vector<Tensor> cls{Tensor::zeros(cfg.charset, cfg.hidden), Tensor::zeros(cfg.charset)};
    p.layers.emplace_back("classifier", std::move(cls));
    return p;
}

std::size_t ParamSet::layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].first == name) return i;
    throw Error("no layer named " + name);
}

const std::vector<Tensor>& ParamSet::layer(const std::string& name) const {
    return layers[layer_index(name)].second;
}

std::vector<Tensor>& ParamSet::layer(const std::string& name) {
    return layers[layer_index(name)].second;
}

std::size_t ParamSet::tensor_count() const {
    std::size_t n = 0;
    for (const auto& [_, ts] : layers) n += ts.size();
    return n;
}

bool ParamSet::same_shapes(const ParamSet& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].first != o.layers[i].first) return false;
        if (layers[i].second.size() != o.layers[i].second.size()) return false;
        for (std::size_t j = 0; j < layers[i].second.size(); ++j)
            if (!layers[i].second[j].same_shape(o.layers[i].second[j])) return false;
    }
    return true;
}

bool ParamSet::bitwise_equal(const ParamSet& o) const {
    if (!same_shapes(o)) return false;
    for (std::size_t i = 0; i < layers.size(); ++i)
        for (std::size_t j = 0; j < layers[i].second.size(); ++j)
            if (!layers[i].second[j].bitwise_equal(o.layers[i].second[j])) return false;
    return true;
}

std::vector<Tensor*> ParamSet::flat() {
    std::vector<Tensor*> out;
    for (auto& [_, ts] : layers)
        for (Tensor& t : ts) out.push_back(&t);
    return out;
}

std::vector<const Tensor*> ParamSet::flat() const {
    std::vector<const Tensor*> out;
    for (const auto& [_, ts] : layers)
        for (const Tensor& t : ts) out.push_back(&t);
    return out;
}

std::size_t ParamNodes::layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].first == name) return i;
    throw Error("no layer named " + name);
}

const std::vector<NodeId>& ParamNodes::layer(const std::string& name) const {
    return layers[layer_index(name)].second;
}

std::vector<NodeId> ParamNodes::flat() const {
    std::vector<NodeId> out;
    for (const auto& [_, ids] : layers) out.insert(out.end(), ids.begin(), ids.end());
    return out;
}

std::vector<std::vector<NodeId>> ParamNodes::grouped() const {
    std::vector<std::vector<NodeId>> out;
    for (const auto& [_, ids] : layers) out.push_back(ids);
    return out;
}

ParamNodes bind(Graph& g, const ParamSet& p, bool requires_grad) {
    ParamNodes out;
    for (const auto& [name, ts] : p.layers) {
        std::vector<NodeId> ids;
        ids.reserve(ts.size());
        for (const Tensor& t : ts) ids.push_back(g.input(t, requires_grad));
        out.layers.emplace_back(name, std::move(ids));
    }
    return out;
}

ParamSet extract(const Graph& g, const ParamNodes& nodes) {
    ParamSet out;
    for (const auto& [name, ids] : nodes.layers) {
        std::vector<Tensor> ts;
        ts.reserve(ids.size());
        for (NodeId id : ids) ts.push_back(g.value(id));
        out.layers.emplace_back(name, std::move(ts));
    }
    return out;
}

} // namespace handrec
