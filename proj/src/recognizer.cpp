#include "handrec/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

#include "handrec/rng.hpp"

namespace handrec {

int char_to_index(char c) {
    if (c < 'a' || c > 'z') throw Error(std::string("character out of charset: '") + c + "'");
    return c - 'a';
}

char index_to_char(int i) {
    if (i < 0 || i > 25) throw Error("index out of letter range: " + std::to_string(i));
    return static_cast<char>('a' + i);
}

std::vector<int> word_to_label(const std::string& word, const ModelConfig& cfg) {
    std::vector<int> label;
    label.reserve(word.size() + 1);
    for (char c : word) {
        const int idx = char_to_index(c);
        if (idx >= cfg.charset - 1)
            throw Error("character beyond configured charset: '" + std::string(1, c) + "'");
        label.push_back(idx);
    }
    label.push_back(cfg.eos());
    return label;
}

std::string label_to_word(const std::vector<int>& label, const ModelConfig& cfg) {
    std::string out;
    for (int idx : label) {
        if (idx == cfg.eos()) break;
        out.push_back(index_to_char(idx));
    }
    return out;
}

namespace {

struct CellNodes {
    NodeId Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh;
    static CellNodes at(const std::vector<NodeId>& ids, std::size_t base) {
        return {ids[base + 0], ids[base + 1], ids[base + 2], ids[base + 3], ids[base + 4],
                ids[base + 5], ids[base + 6], ids[base + 7], ids[base + 8]};
    }
};

// s' = s + z (.) (htil - s); gated cell shared by context and decoder.
NodeId cell_step(Graph& g, const CellNodes& c, NodeId x, NodeId s) {
    NodeId z = g.sigmoid(g.add(g.add(g.matmul(c.Wz, x), g.matmul(c.Uz, s)), c.bz));
    NodeId r = g.sigmoid(g.add(g.add(g.matmul(c.Wr, x), g.matmul(c.Ur, s)), c.br));
    NodeId htil = g.tanh(g.add(g.add(g.matmul(c.Wh, x), g.matmul(c.Uh, g.mul(r, s))), c.bh));
    return g.add(s, g.mul(z, g.add(htil, g.neg(s))));
}

void check_image(const ModelConfig& cfg, const WordImage& image) {
    if (image.pixels.rows() != cfg.img_h || image.pixels.cols() != cfg.img_w)
        throw ShapeError("image " + std::to_string(image.pixels.rows()) + "x" +
                         std::to_string(image.pixels.cols()) + " does not match config " +
                         std::to_string(cfg.img_h) + "x" + std::to_string(cfg.img_w));
}

// Patches in reading order, one per row, each flattened row-major.
Tensor patch_matrix(const ModelConfig& cfg, const WordImage& image) {
    const int ph = cfg.patch_h, pw = cfg.patch_w;
    const int py = cfg.img_h / ph, px = cfg.img_w / pw;
    Eigen::MatrixXd f(py * px, ph * pw);
    int q = 0;
    for (int by = 0; by < py; ++by) {
        for (int bx = 0; bx < px; ++bx, ++q) {
            int k = 0;
            for (int r = 0; r < ph; ++r)
                for (int c = 0; c < pw; ++c, ++k)
                    f(q, k) = image.pixels(by * ph + r, bx * pw + c);
        }
    }
    return Tensor::from_matrix(f);
}

// Numerically safe cross-entropy at one step: logsumexp(z) - z[target], with
// the max shift entering as a constant so the gradient path stays exact.
NodeId step_ce(Graph& g, NodeId logits, int target) {
    const Eigen::Index n = g.value(logits).rows();
    const double m = g.value(logits).mat().maxCoeff();
    NodeId shift = g.mul(g.const_scalar(m), g.const_ones(n));
    NodeId e = g.exp(g.add(logits, g.neg(shift)));
    NodeId lse = g.add(g.log(g.sum(e)), g.const_scalar(m));
    NodeId zy = g.slice(logits, target, 1);
    return g.add(lse, g.neg(zy));
}

int argmax_lowest(const Tensor& v) {
    int best = 0;
    for (Eigen::Index i = 1; i < v.rows(); ++i)
        if (v(i) > v(best)) best = static_cast<int>(i);
    return best;
}

struct StepIO {
    NodeId logits;
    NodeId attn;
    NodeId out;
    NodeId state;
};

struct DecoderCtx {
    NodeId H;
    NodeId HW; // H * W_h^T, hoisted out of the step loop
    CellNodes cell;
    NodeId Ws, ba, v, Wo, bo, E;
    int Q;
};

DecoderCtx make_decoder_ctx(Graph& g, const ParamNodes& params, NodeId H) {
    const auto& att = params.layer("attention");
    DecoderCtx ctx;
    ctx.H = H;
    ctx.Ws = att[0];
    ctx.ba = att[2];
    ctx.v = att[3];
    ctx.HW = g.matmul(H, att[1], false, true);
    ctx.cell = CellNodes::at(params.layer("decoder"), 0);
    ctx.Wo = params.layer("classifier")[0];
    ctx.bo = params.layer("classifier")[1];
    ctx.E = params.layer("embedding")[0];
    ctx.Q = static_cast<int>(g.value(H).rows());
    return ctx;
}

StepIO decode_step(Graph& g, const DecoderCtx& ctx, NodeId s_prev, int prev_char_row) {
    // attention over patch positions
    NodeId t = g.add(g.matmul(ctx.Ws, s_prev), ctx.ba);
    NodeId u = g.tanh(g.add(ctx.HW, g.matmul(g.const_ones(ctx.Q), t, false, true)));
    NodeId scores = g.matmul(u, ctx.v);
    NodeId a = g.softmax(scores);
    NodeId glimpse = g.matmul(ctx.H, a, true, false);

    NodeId emb = g.slice(ctx.E, prev_char_row, 1);
    const std::array<NodeId, 2> xs{emb, glimpse};
    NodeId x = g.concat(xs, false);
    NodeId s = cell_step(g, ctx.cell, x, s_prev);
    NodeId logits = g.add(g.matmul(ctx.Wo, s), ctx.bo);
    return {logits, a, s, s};
}

} // namespace

Var encode(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
           const WordImage& image) {
    check_image(cfg, image);
    const auto& enc = params.layer("encoder");
    const auto& ctx = params.layer("context");
    const int hc = cfg.hidden / 2;
    const int Q = cfg.patches();

    NodeId F = g.constant(patch_matrix(cfg, image));
    NodeId proj = g.add(g.matmul(F, enc[0], false, true),
                        g.matmul(g.const_ones(Q), enc[1], false, true));

    const CellNodes fwd = CellNodes::at(ctx, 0);
    const CellNodes bwd = CellNodes::at(ctx, 9);

    std::vector<NodeId> fs(Q), bs(Q);
    NodeId s = g.const_zeros(hc);
    for (int i = 0; i < Q; ++i) {
        s = cell_step(g, fwd, g.slice(proj, i, 1), s);
        fs[i] = s;
    }
    s = g.const_zeros(hc);
    for (int i = Q - 1; i >= 0; --i) {
        s = cell_step(g, bwd, g.slice(proj, i, 1), s);
        bs[i] = s;
    }

    std::vector<NodeId> rows(Q);
    for (int i = 0; i < Q; ++i) {
        const std::array<NodeId, 2> halves{fs[i], bs[i]};
        rows[i] = g.concat(halves, false);
    }
    return {g, g.concat(rows, true)};
}

std::pair<Var, Var> attend(Graph& g, const ParamNodes& params, Var s_prev, Var H) {
    const auto& att = params.layer("attention");
    NodeId HW = g.matmul(H.id, att[1], false, true);
    const int Q = static_cast<int>(g.value(H.id).rows());
    NodeId t = g.add(g.matmul(att[0], s_prev.id), att[2]);
    NodeId u = g.tanh(g.add(HW, g.matmul(g.const_ones(Q), t, false, true)));
    NodeId a = g.softmax(g.matmul(u, att[3]));
    NodeId glimpse = g.matmul(H.id, a, true, false);
    return {Var{g, a}, Var{g, glimpse}};
}

namespace {

DecodeNodes decode_impl(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
                        const WordImage& image, bool teacher, int max_len) {
    for (int idx : image.label)
        if (idx < 0 || idx >= cfg.charset)
            throw Error("label index " + std::to_string(idx) + " outside charset " +
                        std::to_string(cfg.charset));
    if (teacher && image.label.empty()) throw Error("teacher forcing requires a label");
    if (!teacher && max_len < 1) throw Error("greedy decode requires max_len >= 1");

    NodeId H = encode(g, params, cfg, image).id;
    DecoderCtx ctx = make_decoder_ctx(g, params, H);

    DecodeNodes out;
    NodeId s = g.const_zeros(cfg.hidden);
    int prev_row = cfg.sos_row();
    const int steps = teacher ? static_cast<int>(image.label.size()) : max_len;
    for (int t = 0; t < steps; ++t) {
        StepIO io = decode_step(g, ctx, s, prev_row);
        s = io.state;
        int target;
        if (teacher) {
            target = image.label[static_cast<std::size_t>(t)];
        } else {
            target = argmax_lowest(g.value(io.logits));
        }
        out.logits.push_back(io.logits);
        out.attn.push_back(io.attn);
        out.outputs.push_back(io.out);
        out.ce.push_back(step_ce(g, io.logits, target));
        out.chars.push_back(target);
        if (!teacher && target == cfg.eos()) break;
        prev_row = target;
    }
    out.mean_ce = g.mean(g.concat(out.ce, false));
    return out;
}

} // namespace

DecodeNodes decode_teacher(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
                           const WordImage& image) {
    return decode_impl(g, params, cfg, image, true, 0);
}

DecodeNodes decode_greedy(Graph& g, const ParamNodes& params, const ModelConfig& cfg,
                          const WordImage& image, int max_len) {
    return decode_impl(g, params, cfg, image, false, max_len);
}

DecodeResult decode_word(const ParamSet& params, const ModelConfig& cfg,
                         const WordImage& image, DecodeMode mode, int max_len) {
    Graph g;
    ParamNodes nodes = bind(g, params, false);
    const DecodeNodes dn = mode == DecodeMode::TeacherForced
                               ? decode_teacher(g, nodes, cfg, image)
                               : decode_greedy(g, nodes, cfg, image,
                                               max_len > 0 ? max_len : cfg.max_len);

    const auto L = static_cast<Eigen::Index>(dn.ce.size());
    DecodeResult res;
    res.trace.logits = Tensor::zeros(L, cfg.charset);
    res.trace.attn = Tensor::zeros(L, cfg.patches());
    res.trace.per_char_ce = Tensor::zeros(L);
    res.decoder_outputs = Tensor::zeros(L, cfg.hidden);
    for (Eigen::Index t = 0; t < L; ++t) {
        res.trace.logits.mat().row(t) = g.value(dn.logits[t]).mat().col(0).transpose();
        res.trace.attn.mat().row(t) = g.value(dn.attn[t]).mat().col(0).transpose();
        res.trace.per_char_ce(t) = g.value(dn.ce[t]).item();
        res.decoder_outputs.mat().row(t) = g.value(dn.outputs[t]).mat().col(0).transpose();
    }
    res.trace.mean_ce = g.value(dn.mean_ce).item();
    res.predicted = label_to_word(dn.chars, cfg);
    return res;
}

ParamSet pretrain(const std::vector<WordImage>& dataset, const ParamSet& start,
                  const ModelConfig& cfg, const PretrainOpts& opts,
                  std::vector<double>* curve) {
    if (dataset.empty()) throw Error("pretrain: empty dataset");
    ParamSet params = start;
    if (opts.epochs <= 0) return params;

    AdamState adam;
    adam.init_like(std::as_const(params).flat());

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        std::mt19937_64 rng(mix64(opts.seed, 0x70726574ull, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch)) {
            const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(opts.batch));
            Graph g;
            ParamNodes nodes = bind(g, params, true);
            std::vector<NodeId> word_losses;
            for (std::size_t i = at; i < end; ++i)
                word_losses.push_back(decode_teacher(g, nodes, cfg, dataset[order[i]]).mean_ce);
            NodeId loss = g.mean(g.concat(word_losses, false));
            const double loss_val = g.value(loss).item();
            if (!std::isfinite(loss_val)) throw Error("pretrain: loss diverged (non-finite)");
            epoch_loss += loss_val;
            ++batches;

            const std::vector<NodeId> flat_nodes = nodes.flat();
            GradMap gm = g.backward(loss, flat_nodes);
            std::vector<Tensor> grads;
            grads.reserve(flat_nodes.size());
            for (NodeId id : flat_nodes) grads.push_back(gm.at(id));
            adam.update(params.flat(), grads, opts.lr);
        }
        if (curve) curve->push_back(epoch_loss / std::max(1, batches));
    }
    return params;
}

} // namespace handrec
