#include "handrec/metalearn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <thread>

#include "handrec/rng.hpp"

namespace handrec {

VariantKind variant_from_string(const std::string& s) {
    if (s == "metahtr") return VariantKind::MetaHtr;
    if (s == "maml") return VariantKind::Maml;
    if (s == "maml_fo") return VariantKind::MamlFo;
    if (s == "metasgd") return VariantKind::MetaSgd;
    if (s == "anil") return VariantKind::Anil;
    if (s == "finetune") return VariantKind::Finetune;
    if (s == "dg") return VariantKind::Dg;
    throw ConfigError("unknown variant '" + s + "'");
}

std::string variant_name(VariantKind v) {
    switch (v) {
        case VariantKind::MetaHtr: return "metahtr";
        case VariantKind::Maml: return "maml";
        case VariantKind::MamlFo: return "maml_fo";
        case VariantKind::MetaSgd: return "metasgd";
        case VariantKind::Anil: return "anil";
        case VariantKind::Finetune: return "finetune";
        case VariantKind::Dg: return "dg";
    }
    return "?";
}

int weight_net_input_width(const ModelConfig& cfg) {
    return 2 * (cfg.charset * cfg.hidden + cfg.charset);
}

WeightNetParams WeightNetParams::init(int input_width, std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed, 0x67616d6d61ull));
    auto uniform = [&](Eigen::Index r, Eigen::Index c) {
        const double s = 1.0 / std::sqrt(static_cast<double>(c));
        std::uniform_real_distribution<double> d(-s, s);
        Eigen::MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
        return Tensor::from_matrix(m);
    };
    WeightNetParams p;
    p.tensors.push_back(uniform(64, input_width));
    p.tensors.push_back(Tensor::zeros(64));
    p.tensors.push_back(uniform(32, 64));
    p.tensors.push_back(Tensor::zeros(32));
    p.tensors.push_back(Tensor::zeros(1, 32)); // zero head: initial weights 0.5
    p.tensors.push_back(Tensor::zeros(1));
    return p;
}

int WeightNetParams::input_width() const {
    return static_cast<int>(tensors.at(0).cols());
}

bool WeightNetParams::bitwise_equal(const WeightNetParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
        if (!tensors[i].bitwise_equal(o.tensors[i])) return false;
    return true;
}

MetaParams MetaParams::init(ParamSet theta, const ModelConfig& cfg, double alpha_init,
                            std::uint64_t seed, bool per_param_alpha) {
    MetaParams m;
    m.gamma = WeightNetParams::init(weight_net_input_width(cfg), seed);
    const auto layers = static_cast<Eigen::Index>(theta.layers.size());
    m.alpha = Tensor::from_vector(Eigen::VectorXd::Constant(layers, alpha_init));
    if (per_param_alpha) {
        ParamSet pp = theta;
        for (Tensor* t : pp.flat()) t->mat().setConstant(alpha_init);
        m.alpha_pp = std::move(pp);
    }
    m.theta = std::move(theta);
    return m;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> classifier_step_gradients(const DecodeTrace& trace,
                                              const Tensor& decoder_outputs,
                                              const std::vector<int>& labels) {
    const Eigen::Index L = trace.logits.rows();
    const Eigen::Index C = trace.logits.cols();
    const Eigen::Index H = decoder_outputs.cols();
    if (static_cast<Eigen::Index>(labels.size()) < L)
        throw Error("classifier_step_gradients: label shorter than trace");

    const Eigen::Index unit = C * H + C;
    std::vector<Eigen::VectorXd> per_step(static_cast<std::size_t>(L));
    Eigen::VectorXd mean_grad = Eigen::VectorXd::Zero(unit);
    for (Eigen::Index t = 0; t < L; ++t) {
        const Tensor p = softmax_vector(Tensor::from_vector(trace.logits.mat().row(t).transpose()));
        Eigen::VectorXd d = p.mat().col(0);
        d(labels[static_cast<std::size_t>(t)]) -= 1.0;
        const Eigen::VectorXd o = decoder_outputs.mat().row(t).transpose();
        Eigen::VectorXd u(unit);
        // d * o^T flattened row-major, then the bias part
        for (Eigen::Index i = 0; i < C; ++i) u.segment(i * H, H) = d(i) * o;
        u.segment(C * H, C) = d;
        per_step[static_cast<std::size_t>(t)] = u;
        mean_grad += u;
    }
    mean_grad *= 1.0 / static_cast<double>(L);

    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(L));
    for (Eigen::Index t = 0; t < L; ++t) {
        Eigen::VectorXd g(2 * unit);
        g.head(unit) = per_step[static_cast<std::size_t>(t)];
        g.tail(unit) = mean_grad;
        out.push_back(Tensor::from_vector(g));
    }
    return out;
}

std::vector<NodeId> predict_weight_nodes(Graph& g, const std::vector<NodeId>& gamma_nodes,
                                         const std::vector<Tensor>& G) {
    if (gamma_nodes.size() != 6) throw Error("weight net expects 6 tensors");
    const Eigen::Index width = g.value(gamma_nodes[0]).cols();
    std::vector<NodeId> out;
    out.reserve(G.size());
    for (const Tensor& gi : G) {
        if (gi.rank() != 1 || gi.rows() != width)
            throw ShapeError("weight net input " + gi.shape_str() + " does not match width " +
                             std::to_string(width));
        NodeId x = g.constant(gi);
        NodeId h1 = g.tanh(g.add(g.matmul(gamma_nodes[0], x), gamma_nodes[1]));
        NodeId h2 = g.tanh(g.add(g.matmul(gamma_nodes[2], h1), gamma_nodes[3]));
        NodeId y = g.sigmoid(g.add(g.matmul(gamma_nodes[4], h2), gamma_nodes[5]));
        out.push_back(y);
    }
    return out;
}

std::vector<double> predict_weights(const std::vector<Tensor>& G,
                                    const WeightNetParams& gamma) {
    Graph g;
    std::vector<NodeId> gn;
    gn.reserve(gamma.tensors.size());
    for (const Tensor& t : gamma.tensors) gn.push_back(g.constant(t));
    std::vector<NodeId> ids = predict_weight_nodes(g, gn, G);
    std::vector<double> out;
    out.reserve(ids.size());
    for (NodeId id : ids) out.push_back(g.value(id).item());
    return out;
}

double inner_loss(const Tensor& per_char_ce, const std::vector<double>& gamma) {
    if (per_char_ce.rank() != 1 ||
        per_char_ce.rows() != static_cast<Eigen::Index>(gamma.size()))
        throw ShapeError("inner_loss: lengths differ (" + std::to_string(per_char_ce.rows()) +
                         " vs " + std::to_string(gamma.size()) + ")");
    double s = 0.0;
    for (Eigen::Index t = 0; t < per_char_ce.rows(); ++t)
        s += gamma[static_cast<std::size_t>(t)] * per_char_ce(t);
    return s;
}

// ---------------------------------------------------------------------------
// Shared graph composition for the inner step.

namespace {

struct MetaNodes {
    ParamNodes theta;
    std::vector<NodeId> gamma;                  // bound for metahtr
    std::vector<NodeId> alpha;                  // per-layer scalars, metahtr
    std::vector<std::vector<NodeId>> alpha_pp;  // metasgd
};

bool uses_weight_net(VariantKind v, const MetaHyper& h) {
    return v == VariantKind::MetaHtr && !h.ablate_gamma;
}

bool uses_layer_alpha(VariantKind v, const MetaHyper& h) {
    return v == VariantKind::MetaHtr && !h.ablate_alpha;
}

MetaNodes bind_meta(Graph& g, const MetaParams& meta, VariantKind v, const MetaHyper& h,
                    bool learnable) {
    MetaNodes mn;
    mn.theta = bind(g, meta.theta, true);
    if (uses_weight_net(v, h))
        for (const Tensor& t : meta.gamma.tensors) mn.gamma.push_back(g.input(t, learnable));
    if (uses_layer_alpha(v, h)) {
        if (meta.alpha.rows() != static_cast<Eigen::Index>(meta.theta.layers.size()))
            throw Error("alpha length " + std::to_string(meta.alpha.rows()) +
                        " != layer count " + std::to_string(meta.theta.layers.size()));
        for (Eigen::Index i = 0; i < meta.alpha.rows(); ++i)
            mn.alpha.push_back(g.input(Tensor::scalar(meta.alpha(i)), learnable));
    }
    if (v == VariantKind::MetaSgd) {
        if (!meta.alpha_pp || !meta.alpha_pp->same_shapes(meta.theta))
            throw Error("metasgd requires per-parameter alpha mirroring theta");
        for (const auto& [name, ts] : meta.alpha_pp->layers) {
            std::vector<NodeId> ids;
            for (const Tensor& t : ts) ids.push_back(g.input(t, learnable));
            mn.alpha_pp.push_back(std::move(ids));
        }
    }
    return mn;
}

// Trace tensors assembled from the per-step nodes of a teacher-forced decode.
std::pair<DecodeTrace, Tensor> trace_from_nodes(const Graph& g, const DecodeNodes& dn,
                                                const ModelConfig& cfg) {
    const auto L = static_cast<Eigen::Index>(dn.ce.size());
    DecodeTrace trace;
    trace.logits = Tensor::zeros(L, cfg.charset);
    trace.attn = Tensor::zeros(L, cfg.patches());
    trace.per_char_ce = Tensor::zeros(L);
    Tensor outputs = Tensor::zeros(L, cfg.hidden);
    for (Eigen::Index t = 0; t < L; ++t) {
        trace.logits.mat().row(t) = g.value(dn.logits[t]).mat().col(0).transpose();
        trace.attn.mat().row(t) = g.value(dn.attn[t]).mat().col(0).transpose();
        trace.per_char_ce(t) = g.value(dn.ce[t]).item();
        outputs.mat().row(t) = g.value(dn.outputs[t]).mat().col(0).transpose();
    }
    trace.mean_ce = g.value(dn.mean_ce).item();
    return {std::move(trace), std::move(outputs)};
}

NodeId batch_inner_loss(Graph& g, const MetaNodes& mn, const std::vector<WordImage>& batch,
                        const ModelConfig& cfg, VariantKind v, const MetaHyper& h) {
    if (batch.empty()) throw Error("inner loss: empty support set");
    std::vector<NodeId> word_losses;
    word_losses.reserve(batch.size());
    for (const WordImage& word : batch) {
        DecodeNodes dn = decode_teacher(g, mn.theta, cfg, word);
        if (uses_weight_net(v, h)) {
            auto [trace, outputs] = trace_from_nodes(g, dn, cfg);
            const std::vector<Tensor> G = classifier_step_gradients(trace, outputs, word.label);
            const std::vector<NodeId> gammas = predict_weight_nodes(g, mn.gamma, G);
            NodeId gvec = g.concat(gammas, false);
            NodeId cevec = g.concat(dn.ce, false);
            word_losses.push_back(g.sum(g.mul(gvec, cevec)));
        } else {
            word_losses.push_back(dn.mean_ce);
        }
    }
    return g.mean(g.concat(word_losses, false));
}

NodeId batch_mean_ce(Graph& g, const ParamNodes& params, const std::vector<WordImage>& batch,
                     const ModelConfig& cfg) {
    if (batch.empty()) throw Error("loss over empty batch");
    std::vector<NodeId> word_losses;
    word_losses.reserve(batch.size());
    for (const WordImage& word : batch)
        word_losses.push_back(decode_teacher(g, params, cfg, word).mean_ce);
    return g.mean(g.concat(word_losses, false));
}

bool detaches_inner_grad(VariantKind v) {
    return v == VariantKind::MamlFo || v == VariantKind::Finetune;
}

// theta' = theta - step, with the step scaled per variant. For anil only the
// classifier moves; everything else keeps the identical node.
ParamNodes apply_inner_update(Graph& g, const MetaNodes& mn, NodeId inner, VariantKind v,
                              const MetaHyper& h) {
    const double loss_val = g.value(inner).item();
    if (!std::isfinite(loss_val)) throw TaskError("inner loss is non-finite");

    const std::size_t cls = mn.theta.layer_index("classifier");
    std::vector<NodeId> wrt;
    std::vector<std::pair<std::size_t, std::size_t>> slots; // (layer, tensor)
    for (std::size_t L = 0; L < mn.theta.layers.size(); ++L) {
        if (v == VariantKind::Anil && L != cls) continue;
        for (std::size_t i = 0; i < mn.theta.layers[L].second.size(); ++i) {
            wrt.push_back(mn.theta.layers[L].second[i]);
            slots.emplace_back(L, i);
        }
    }

    std::vector<NodeId> grads;
    if (detaches_inner_grad(v)) {
        GradMap gm = g.backward(inner, wrt);
        grads.reserve(wrt.size());
        for (NodeId id : wrt) grads.push_back(g.constant(gm.at(id)));
    } else {
        grads = g.backward_nodes(inner, wrt);
    }

    ParamNodes out = mn.theta;
    for (std::size_t j = 0; j < slots.size(); ++j) {
        const auto [L, i] = slots[j];
        NodeId scale;
        if (uses_layer_alpha(v, h)) {
            scale = mn.alpha[L];
        } else if (v == VariantKind::MetaSgd) {
            scale = mn.alpha_pp[L][i]; // elementwise rate
        } else if (v == VariantKind::Dg) {
            scale = g.const_scalar(h.dg_inner_lr);
        } else {
            scale = g.const_scalar(h.fixed_inner_lr);
        }
        NodeId step = g.mul(scale, grads[j]);
        out.layers[L].second[i] = g.add(mn.theta.layers[L].second[i], g.neg(step));
    }
    return out;
}

} // namespace

ParamSet inner_update(const MetaParams& meta, const std::vector<WordImage>& support,
                      const ModelConfig& cfg, VariantKind variant, const MetaHyper& hyper) {
    Graph g;
    MetaNodes mn = bind_meta(g, meta, variant, hyper, false);
    NodeId inner = batch_inner_loss(g, mn, support, cfg, variant, hyper);
    ParamNodes updated = apply_inner_update(g, mn, inner, variant, hyper);
    return extract(g, updated);
}

ParamSet adapt(const MetaParams& meta, const std::vector<WordImage>& support, int n_steps,
               VariantKind variant, const ModelConfig& cfg, const MetaHyper& hyper) {
    if (n_steps < 0) throw Error("adapt: n_steps must be >= 0");
    MetaParams cur = meta;
    for (int s = 0; s < n_steps; ++s) cur.theta = inner_update(cur, support, cfg, variant, hyper);
    return cur.theta;
}

ParamSet finetune(const ParamSet& theta, const std::vector<WordImage>& support, int steps,
                  double lr, const ModelConfig& cfg) {
    if (steps < 1) throw Error("finetune: steps must be >= 1");
    MetaParams meta;
    meta.theta = theta;
    MetaHyper hyper;
    hyper.fixed_inner_lr = lr;
    return adapt(meta, support, steps, VariantKind::Finetune, cfg, hyper);
}

ParamSet dg_step(const ParamSet& theta, const WriterTask& task, double lambda,
                 double inner_lr, double beta, const ModelConfig& cfg) {
    if (lambda < 0.0 || lambda > 1.0)
        throw Error("dg_step: lambda must lie in [0,1], got " + std::to_string(lambda));
    Graph g;
    ParamNodes tn = bind(g, theta, true);
    NodeId l_tr = batch_mean_ce(g, tn, task.support, cfg);
    if (!std::isfinite(g.value(l_tr).item())) throw TaskError("dg inner loss is non-finite");

    const std::vector<NodeId> flat = tn.flat();
    std::vector<NodeId> grads = g.backward_nodes(l_tr, flat);
    ParamNodes updated = tn;
    std::size_t at = 0;
    for (auto& [name, ids] : updated.layers)
        for (NodeId& id : ids)
            id = g.add(id, g.neg(g.mul(g.const_scalar(inner_lr), grads[at++])));

    NodeId l_val = batch_mean_ce(g, updated, task.val, cfg);
    NodeId total = g.add(g.mul(g.const_scalar(lambda), l_tr),
                         g.mul(g.const_scalar(1.0 - lambda), l_val));
    GradMap gm = g.backward(total, flat);

    ParamSet out = theta;
    std::vector<Tensor*> ptrs = out.flat();
    for (std::size_t i = 0; i < ptrs.size(); ++i) ptrs[i]->mat() -= beta * gm.at(flat[i]).mat();
    return out;
}

// ---------------------------------------------------------------------------

std::vector<Tensor*> meta_var_ptrs(MetaParams& meta, VariantKind variant,
                                   const MetaHyper& hyper) {
    std::vector<Tensor*> out = meta.theta.flat();
    if (uses_weight_net(variant, hyper))
        for (Tensor& t : meta.gamma.tensors) out.push_back(&t);
    if (uses_layer_alpha(variant, hyper)) out.push_back(&meta.alpha);
    if (variant == VariantKind::MetaSgd && meta.alpha_pp)
        for (Tensor* t : meta.alpha_pp->flat()) out.push_back(t);
    return out;
}

std::vector<const Tensor*> meta_var_ptrs(const MetaParams& meta, VariantKind variant,
                                         const MetaHyper& hyper) {
    std::vector<const Tensor*> out;
    for (const Tensor* t : meta.theta.flat()) out.push_back(t);
    if (uses_weight_net(variant, hyper))
        for (const Tensor& t : meta.gamma.tensors) out.push_back(&t);
    if (uses_layer_alpha(variant, hyper)) out.push_back(&meta.alpha);
    if (variant == VariantKind::MetaSgd && meta.alpha_pp)
        for (const Tensor* t : meta.alpha_pp->flat()) out.push_back(t);
    return out;
}

std::vector<std::string> meta_var_names(const MetaParams& meta, VariantKind variant,
                                        const MetaHyper& hyper) {
    std::vector<std::string> out;
    for (const auto& [name, ts] : meta.theta.layers)
        for (std::size_t i = 0; i < ts.size(); ++i)
            out.push_back("theta/" + name + "/" + std::to_string(i));
    if (uses_weight_net(variant, hyper))
        for (std::size_t i = 0; i < meta.gamma.tensors.size(); ++i)
            out.push_back("gamma/" + std::to_string(i));
    if (uses_layer_alpha(variant, hyper)) out.push_back("alpha");
    if (variant == VariantKind::MetaSgd && meta.alpha_pp)
        for (const auto& [name, ts] : meta.alpha_pp->layers)
            for (std::size_t i = 0; i < ts.size(); ++i)
                out.push_back("alpha_pp/" + name + "/" + std::to_string(i));
    return out;
}

TaskGradients meta_task_gradients(const MetaParams& meta, const WriterTask& task,
                                  VariantKind v, const ModelConfig& cfg,
                                  const MetaHyper& h) {
    TaskGradients res;
    Graph g;
    if (v == VariantKind::Finetune) {
        // no meta-structure: plain supervised gradients on the task data
        ParamNodes tn = bind(g, meta.theta, true);
        std::vector<WordImage> all = task.support;
        all.insert(all.end(), task.val.begin(), task.val.end());
        NodeId loss = batch_mean_ce(g, tn, all, cfg);
        if (!std::isfinite(g.value(loss).item())) throw TaskError("loss is non-finite");
        GradMap gm = g.backward(loss, tn.flat());
        for (NodeId id : tn.flat()) res.grads.push_back(gm.at(id));
        res.outer_loss = g.value(loss).item();
        return res;
    }

    MetaNodes mn = bind_meta(g, meta, v, h, true);
    NodeId outer;
    std::vector<NodeId> wrt = mn.theta.flat();
    if (v == VariantKind::Dg) {
        NodeId l_tr = batch_mean_ce(g, mn.theta, task.support, cfg);
        ParamNodes updated = apply_inner_update(g, mn, l_tr, v, h);
        NodeId l_val = batch_mean_ce(g, updated, task.val, cfg);
        outer = g.add(g.mul(g.const_scalar(h.dg_lambda), l_tr),
                      g.mul(g.const_scalar(1.0 - h.dg_lambda), l_val));
    } else {
        NodeId inner = batch_inner_loss(g, mn, task.support, cfg, v, h);
        ParamNodes updated = apply_inner_update(g, mn, inner, v, h);
        outer = batch_mean_ce(g, updated, task.val, cfg);
    }
    if (!std::isfinite(g.value(outer).item())) throw TaskError("outer loss is non-finite");

    wrt.insert(wrt.end(), mn.gamma.begin(), mn.gamma.end());
    wrt.insert(wrt.end(), mn.alpha.begin(), mn.alpha.end());
    for (const auto& ids : mn.alpha_pp) wrt.insert(wrt.end(), ids.begin(), ids.end());

    GradMap gm = g.backward(outer, wrt);
    const std::size_t theta_n = mn.theta.flat().size();
    const std::size_t gamma_n = mn.gamma.size();
    std::size_t at = 0;
    for (; at < theta_n + gamma_n; ++at) res.grads.push_back(gm.at(wrt[at]));
    if (!mn.alpha.empty()) {
        // collect per-layer scalars into one [num_layers] tensor
        Tensor a = Tensor::zeros(static_cast<Eigen::Index>(mn.alpha.size()));
        for (std::size_t i = 0; i < mn.alpha.size(); ++i, ++at)
            a(static_cast<Eigen::Index>(i)) = gm.at(wrt[at]).item();
        res.grads.push_back(std::move(a));
    }
    for (; at < wrt.size(); ++at) res.grads.push_back(gm.at(wrt[at]));
    res.outer_loss = g.value(outer).item();
    return res;
}

namespace {

struct TaskResult {
    std::vector<Tensor> grads;
    double outer_loss = 0.0;
    bool ok = false;
    std::string error;
};

TaskResult eval_task(const MetaParams& meta, const WriterTask& task, VariantKind v,
                     const ModelConfig& cfg, const MetaHyper& h) {
    TaskResult res;
    try {
        TaskGradients tg = meta_task_gradients(meta, task, v, cfg, h);
        res.grads = std::move(tg.grads);
        res.outer_loss = tg.outer_loss;
        res.ok = true;
    } catch (const std::exception& e) {
        res.ok = false;
        res.error = e.what();
    }
    return res;
}

void run_indexed(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    const int count = std::min<int>(workers, static_cast<int>(n));
    std::vector<std::thread> pool;
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

OuterStepResult outer_step(const MetaParams& meta, const std::vector<WriterTask>& tasks,
                           double beta, VariantKind variant, const ModelConfig& cfg,
                           const MetaHyper& hyper, AdamState& adam, int workers) {
    if (tasks.empty()) throw Error("outer_step: needs at least one task");

    // fixed reduction order: sorted by writer id, ties by position
    std::vector<std::size_t> order(tasks.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return tasks[a].writer_id < tasks[b].writer_id;
    });

    std::vector<TaskResult> results(tasks.size());
    run_indexed(tasks.size(), workers, [&](std::size_t i) {
        results[order[i]] = eval_task(meta, tasks[order[i]], variant, cfg, hyper);
    });

    OuterStepResult out;
    out.meta = meta;
    std::vector<Tensor> acc;
    int ok = 0;
    double loss_sum = 0.0;
    for (std::size_t i : order) {
        const TaskResult& r = results[i];
        if (!r.ok) {
            out.task_errors.push_back("writer " + std::to_string(tasks[i].writer_id) + ": " +
                                      r.error);
            continue;
        }
        if (acc.empty()) {
            acc = r.grads;
        } else {
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j].mat() += r.grads[j].mat();
        }
        loss_sum += r.outer_loss;
        ++ok;
    }
    if (ok == 0)
        throw TaskError("outer_step: every task failed" +
                        (out.task_errors.empty() ? std::string()
                                                 : "; first: " + out.task_errors.front()));
    for (Tensor& t : acc) t.mat() *= 1.0 / static_cast<double>(ok);

    std::vector<Tensor*> vars = meta_var_ptrs(out.meta, variant, hyper);
    if (vars.size() != acc.size()) throw Error("outer_step: gradient/variable count mismatch");
    if (!adam.initialized()) {
        std::vector<const Tensor*> cv;
        for (Tensor* t : vars) cv.push_back(t);
        adam.init_like(cv);
    }
    adam.update(vars, acc, beta);

    out.mean_outer_loss = loss_sum / static_cast<double>(ok);
    out.tasks_ok = ok;
    return out;
}

} // namespace handrec
