#include "handrec/graph.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "handrec/rng.hpp"

namespace handrec {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Add: return "add";
        case Op::MatMul: return "matmul";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Softmax: return "softmax";
        case Op::Log: return "log";
        case Op::Mul: return "mul";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Exp: return "exp";
        case Op::Neg: return "neg";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
    throw ShapeError(std::string("op ") + op_name(op) + ": " + detail);
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Effective (rows, cols) of an operand under an optional transpose, with
// rank-1 treated as a column.
std::pair<Eigen::Index, Eigen::Index> eff_dims(const Tensor& t, bool trans) {
    if (trans) return {t.cols() == 0 ? 0 : t.cols(), t.rows()};
    return {t.rows(), t.cols()};
}

} // namespace

Tensor softmax_vector(const Tensor& x) {
    const Eigen::MatrixXd& v = x.mat();
    const double m = v.maxCoeff();
    Eigen::MatrixXd e = v.unaryExpr([m](double a) { return std::exp(a - m); });
    const double s = e.sum();
    return Tensor::from_vector(e.col(0) / s);
}

std::size_t Graph::check(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw Error("invalid node id " + std::to_string(id));
    return static_cast<std::size_t>(id);
}

NodeId Graph::append(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Tensor t, bool requires_grad) {
    if (t.empty()) throw ShapeError("op input: empty tensor");
    // An n x 1 matrix is a vector here; keeps gradient shapes canonical.
    if (t.rank() == 2 && t.cols() == 1) t = Tensor::from_vector(t.mat().col(0));
    Node n;
    n.op = Op::Input;
    n.requires_grad = requires_grad;
    n.value = std::move(t);
    return append(std::move(n));
}

void Graph::set_input(NodeId id, Tensor t) {
    Node& n = nodes_[check(id)];
    if (n.op != Op::Input) throw Error("set_input on non-input node");
    if (t.rank() == 2 && t.cols() == 1) t = Tensor::from_vector(t.mat().col(0));
    if (!t.same_shape(n.value))
        shape_fail(Op::Input, "rebind shape " + t.shape_str() + " != " + n.value.shape_str());
    n.value = std::move(t);
}

NodeId Graph::const_ones(Eigen::Index n) {
    const std::uint64_t key = mix64(1, static_cast<std::uint64_t>(n), 1);
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) {
        const Tensor& v = nodes_[static_cast<std::size_t>(it->second)].value;
        if (v.rank() == 1 && v.rows() == n) return it->second;
    }
    NodeId id = constant(Tensor::ones(n));
    const_cache_[key] = id;
    return id;
}

NodeId Graph::const_ones(Eigen::Index r, Eigen::Index c) {
    const std::uint64_t key = mix64(2, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c));
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) {
        const Tensor& v = nodes_[static_cast<std::size_t>(it->second)].value;
        if (v.rank() == 2 && v.rows() == r && v.cols() == c) return it->second;
    }
    NodeId id = constant(Tensor::ones(r, c));
    const_cache_[key] = id;
    return id;
}

NodeId Graph::const_zeros(Eigen::Index n) {
    const std::uint64_t key = mix64(3, static_cast<std::uint64_t>(n), 3);
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) {
        const Tensor& v = nodes_[static_cast<std::size_t>(it->second)].value;
        if (v.rank() == 1 && v.rows() == n) return it->second;
    }
    NodeId id = constant(Tensor::zeros(n));
    const_cache_[key] = id;
    return id;
}

NodeId Graph::const_zeros(Eigen::Index r, Eigen::Index c) {
    const std::uint64_t key = mix64(4, static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c));
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) {
        const Tensor& v = nodes_[static_cast<std::size_t>(it->second)].value;
        if (v.rank() == 2 && v.rows() == r && v.cols() == c) return it->second;
    }
    NodeId id = constant(Tensor::zeros(r, c));
    const_cache_[key] = id;
    return id;
}

NodeId Graph::const_scalar(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    const std::uint64_t key = mix64(5, bits, 5);
    auto it = const_cache_.find(key);
    if (it != const_cache_.end()) {
        const Tensor& t = nodes_[static_cast<std::size_t>(it->second)].value;
        if (t.is_scalar()) {
            double stored = t.item();
            std::uint64_t sb;
            std::memcpy(&sb, &stored, sizeof(sb));
            if (sb == bits) return it->second;
        }
    }
    NodeId id = constant(Tensor::scalar(v));
    const_cache_[key] = id;
    return id;
}

// ---------------------------------------------------------------------------
// Forward evaluation. Single source of truth for op semantics; used both at
// construction time and by forward().

Tensor Graph::eval(const Node& n) const {
    auto pv = [&](std::size_t k) -> const Tensor& {
        return nodes_[static_cast<std::size_t>(n.parents[k])].value;
    };
    switch (n.op) {
        case Op::Input:
            return n.value;
        case Op::Add: {
            const Tensor& a = pv(0);
            const Tensor& b = pv(1);
            Tensor out = a;
            out.mat() += b.mat();
            return out;
        }
        case Op::MatMul: {
            const Tensor& a = pv(0);
            const Tensor& b = pv(1);
            Eigen::MatrixXd r;
            if (!n.flag0 && !n.flag1) r.noalias() = a.mat() * b.mat();
            else if (n.flag0 && !n.flag1) r.noalias() = a.mat().transpose() * b.mat();
            else if (!n.flag0 && n.flag1) r.noalias() = a.mat() * b.mat().transpose();
            else r.noalias() = a.mat().transpose() * b.mat().transpose();
            if (r.cols() == 1) return Tensor::from_vector(r.col(0));
            return Tensor::from_matrix(r);
        }
        case Op::Tanh: {
            Tensor out = pv(0);
            out.mat() = out.mat().unaryExpr([](double x) { return std::tanh(x); });
            return out;
        }
        case Op::Sigmoid: {
            Tensor out = pv(0);
            out.mat() = out.mat().unaryExpr(&stable_sigmoid);
            return out;
        }
        case Op::Softmax:
            return softmax_vector(pv(0));
        case Op::Log: {
            Tensor out = pv(0);
            out.mat() = out.mat().unaryExpr([](double x) { return std::log(x); });
            return out;
        }
        case Op::Mul: {
            const Tensor& a = pv(0);
            const Tensor& b = pv(1);
            if (a.same_shape(b)) {
                Tensor out = a;
                out.mat() = a.mat().cwiseProduct(b.mat());
                return out;
            }
            if (a.is_scalar()) {
                Tensor out = b;
                out.mat() = b.mat() * a.item();
                return out;
            }
            Tensor out = a;
            out.mat() = a.mat() * b.item();
            return out;
        }
        case Op::Concat: {
            if (!n.flag0) {
                Eigen::Index total = 0;
                for (NodeId p : n.parents) total += nodes_[static_cast<std::size_t>(p)].value.size();
                Eigen::VectorXd v(total);
                Eigen::Index at = 0;
                for (NodeId p : n.parents) {
                    const Tensor& t = nodes_[static_cast<std::size_t>(p)].value;
                    v.segment(at, t.size()) = t.mat().col(0);
                    at += t.size();
                }
                return Tensor::from_vector(v);
            }
            Eigen::Index c = 0, total = 0;
            for (NodeId p : n.parents) {
                const Tensor& t = nodes_[static_cast<std::size_t>(p)].value;
                if (t.rank() == 1) {
                    c = t.rows();
                    total += 1;
                } else {
                    c = t.cols();
                    total += t.rows();
                }
            }
            Eigen::MatrixXd m(total, c);
            Eigen::Index at = 0;
            for (NodeId p : n.parents) {
                const Tensor& t = nodes_[static_cast<std::size_t>(p)].value;
                if (t.rank() == 1) {
                    m.row(at++) = t.mat().col(0).transpose();
                } else {
                    m.block(at, 0, t.rows(), c) = t.mat();
                    at += t.rows();
                }
            }
            return Tensor::from_matrix(m);
        }
        case Op::Slice: {
            const Tensor& x = pv(0);
            if (x.rank() == 1)
                return Tensor::from_vector(x.mat().col(0).segment(n.i0, n.i1));
            if (n.i1 == 1)
                return Tensor::from_vector(x.mat().row(n.i0).transpose());
            return Tensor::from_matrix(x.mat().middleRows(n.i0, n.i1));
        }
        case Op::Sum:
            return Tensor::scalar(pv(0).mat().sum());
        case Op::Mean:
            return Tensor::scalar(pv(0).mat().sum() *
                                  (1.0 / static_cast<double>(pv(0).size())));
        case Op::Exp: {
            Tensor out = pv(0);
            out.mat() = out.mat().unaryExpr([](double x) { return std::exp(x); });
            return out;
        }
        case Op::Neg: {
            Tensor out = pv(0);
            out.mat() = -out.mat();
            return out;
        }
    }
    throw Error("unreachable op");
}

// ---------------------------------------------------------------------------
// Builders: validate shapes, then evaluate eagerly.

NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[check(a)].value;
    const Tensor& tb = nodes_[check(b)].value;
    if (!ta.same_shape(tb))
        shape_fail(Op::Add, "shapes " + ta.shape_str() + " and " + tb.shape_str());
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    n.requires_grad = nodes_[check(a)].requires_grad || nodes_[check(b)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    const Tensor& ta = nodes_[check(a)].value;
    const Tensor& tb = nodes_[check(b)].value;
    auto [m, k1] = eff_dims(ta, trans_a);
    auto [k2, c] = eff_dims(tb, trans_b);
    if (k1 != k2)
        shape_fail(Op::MatMul, "inner dims " + ta.shape_str() + (trans_a ? "^T" : "") +
                                   " x " + tb.shape_str() + (trans_b ? "^T" : ""));
    Node n;
    n.op = Op::MatMul;
    n.flag0 = trans_a;
    n.flag1 = trans_b;
    n.parents = {a, b};
    n.requires_grad = nodes_[check(a)].requires_grad || nodes_[check(b)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::tanh(NodeId x) {
    Node n;
    n.op = Op::Tanh;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
    Node n;
    n.op = Op::Sigmoid;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
    const Tensor& t = nodes_[check(x)].value;
    if (t.rank() != 1)
        shape_fail(Op::Softmax, "expects a vector, got " + t.shape_str());
    Node n;
    n.op = Op::Softmax;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::log(NodeId x) {
    Node n;
    n.op = Op::Log;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& ta = nodes_[check(a)].value;
    const Tensor& tb = nodes_[check(b)].value;
    if (!ta.same_shape(tb) && !ta.is_scalar() && !tb.is_scalar())
        shape_fail(Op::Mul, "shapes " + ta.shape_str() + " and " + tb.shape_str() +
                                " (elementwise or scalar broadcast only)");
    Node n;
    n.op = Op::Mul;
    n.parents = {a, b};
    n.requires_grad = nodes_[check(a)].requires_grad || nodes_[check(b)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::concat(std::span<const NodeId> parts, bool rows) {
    if (parts.empty()) shape_fail(Op::Concat, "needs at least one part");
    Eigen::Index c = -1;
    for (NodeId p : parts) {
        const Tensor& t = nodes_[check(p)].value;
        if (!rows) {
            if (t.rank() != 1)
                shape_fail(Op::Concat, "vector mode expects vectors, got " + t.shape_str());
        } else {
            const Eigen::Index w = t.rank() == 1 ? t.rows() : t.cols();
            if (c >= 0 && w != c)
                shape_fail(Op::Concat, "row widths " + std::to_string(c) + " vs " +
                                           std::to_string(w));
            c = w;
        }
    }
    if (rows && c < 2)
        shape_fail(Op::Concat, "row mode needs width >= 2; use vector mode");
    Node n;
    n.op = Op::Concat;
    n.flag0 = rows;
    n.parents.assign(parts.begin(), parts.end());
    for (NodeId p : parts) n.requires_grad = n.requires_grad || nodes_[check(p)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::slice(NodeId x, std::int32_t begin, std::int32_t count) {
    const Tensor& t = nodes_[check(x)].value;
    const Eigen::Index extent = t.rank() == 1 ? t.rows() : t.rows();
    if (begin < 0 || count < 1 || begin + count > extent)
        shape_fail(Op::Slice, "range [" + std::to_string(begin) + "," +
                                  std::to_string(begin + count) + ") of " + t.shape_str());
    Node n;
    n.op = Op::Slice;
    n.flag0 = t.rank() == 2;
    n.i0 = begin;
    n.i1 = count;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::sum(NodeId x) {
    Node n;
    n.op = Op::Sum;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::mean(NodeId x) {
    Node n;
    n.op = Op::Mean;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::exp(NodeId x) {
    Node n;
    n.op = Op::Exp;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

NodeId Graph::neg(NodeId x) {
    Node n;
    n.op = Op::Neg;
    n.parents = {x};
    n.requires_grad = nodes_[check(x)].requires_grad;
    n.value = eval(n);
    return append(std::move(n));
}

std::vector<Tensor> Graph::forward(std::span<const NodeId> outputs) {
    NodeId last = 0;
    for (NodeId o : outputs) {
        check(o);
        last = std::max(last, o);
    }
    for (NodeId id = 0; id <= last; ++id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.op == Op::Input) continue;
        n.value = eval(n);
    }
    std::vector<Tensor> out;
    out.reserve(outputs.size());
    for (NodeId o : outputs) out.push_back(nodes_[static_cast<std::size_t>(o)].value);
    return out;
}

// ---------------------------------------------------------------------------
// Reverse pass.

std::vector<bool> Graph::influence_set(NodeId loss) const {
    std::vector<bool> seen(static_cast<std::size_t>(loss) + 1, false);
    if (!nodes_[static_cast<std::size_t>(loss)].requires_grad) return seen;
    std::vector<NodeId> stack{loss};
    seen[static_cast<std::size_t>(loss)] = true;
    while (!stack.empty()) {
        const NodeId id = stack.back();
        stack.pop_back();
        for (NodeId p : nodes_[static_cast<std::size_t>(id)].parents) {
            if (!seen[static_cast<std::size_t>(p)] &&
                nodes_[static_cast<std::size_t>(p)].requires_grad) {
                seen[static_cast<std::size_t>(p)] = true;
                stack.push_back(p);
            }
        }
    }
    return seen;
}

// Contribution of node `id` (with adjoint node `adj`) to its k-th parent,
// emitted as graph nodes. vjp_value below mirrors the same arithmetic.
NodeId Graph::vjp_node(NodeId id, NodeId adj, std::size_t k) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Op op = n.op;
    const bool f0 = n.flag0, f1 = n.flag1;
    const std::int32_t i0 = n.i0, i1 = n.i1;
    const NodeId self = id;
    const NodeId pa = n.parents.empty() ? kNoNode : n.parents[0];
    const NodeId pb = n.parents.size() > 1 ? n.parents[1] : kNoNode;
    // note: builder calls may reallocate nodes_, so no references are kept.
    switch (op) {
        case Op::Input:
            break;
        case Op::Add:
            return adj;
        case Op::MatMul: {
            if (k == 0) {
                if (!f0) return matmul(adj, pb, false, !f1);
                return matmul(pb, adj, f1, true);
            }
            if (!f1) return matmul(pa, adj, !f0, false);
            return matmul(adj, pa, true, f0);
        }
        case Op::Tanh: {
            const int yrank = value(self).rank();
            const Eigen::Index yr = value(self).rows(), yc = value(self).cols();
            NodeId ones = yrank == 1 ? const_ones(yr) : const_ones(yr, yc);
            return mul(adj, add(ones, neg(mul(self, self))));
        }
        case Op::Sigmoid: {
            const int yrank = value(self).rank();
            const Eigen::Index yr = value(self).rows(), yc = value(self).cols();
            NodeId ones = yrank == 1 ? const_ones(yr) : const_ones(yr, yc);
            return mul(adj, mul(self, add(ones, neg(self))));
        }
        case Op::Softmax: {
            const Eigen::Index yr = value(self).rows();
            NodeId s = sum(mul(self, adj));
            NodeId ones = const_ones(yr);
            return mul(self, add(adj, neg(mul(s, ones))));
        }
        case Op::Log:
            return mul(adj, exp(neg(self)));
        case Op::Mul: {
            const NodeId other = k == 0 ? pb : pa;
            const bool mine_is_tensor_side =
                value(n.parents[k]).same_shape(value(other)) || value(other).is_scalar();
            if (mine_is_tensor_side) {
                // elementwise, or my-side tensor scaled by their scalar
                return mul(adj, other);
            }
            // I'm the scalar side; reduce over the tensor side.
            return sum(mul(adj, other));
        }
        case Op::Concat: {
            std::int32_t at = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const Tensor& t = value(n.parents[j]);
                at += static_cast<std::int32_t>(!f0 ? t.size()
                                                    : (t.rank() == 1 ? 1 : t.rows()));
            }
            const Tensor& t = value(n.parents[k]);
            const std::int32_t len =
                static_cast<std::int32_t>(!f0 ? t.size() : (t.rank() == 1 ? 1 : t.rows()));
            return slice(adj, at, len);
        }
        case Op::Slice: {
            const auto xrows = static_cast<std::int32_t>(value(pa).rows());
            const Eigen::Index xcols = value(pa).cols();
            const std::int32_t after = xrows - (i0 + i1);
            std::vector<NodeId> parts;
            if (!f0) {
                if (i0 > 0) parts.push_back(const_zeros(i0));
                parts.push_back(adj);
                if (after > 0) parts.push_back(const_zeros(after));
                if (parts.size() == 1) return adj;
                return concat(parts, false);
            }
            if (i0 > 0) parts.push_back(const_zeros(i0, xcols));
            parts.push_back(adj);
            if (after > 0) parts.push_back(const_zeros(after, xcols));
            if (parts.size() == 1) return adj;
            return concat(parts, true);
        }
        case Op::Sum: {
            const int xrank = value(pa).rank();
            const Eigen::Index xr = value(pa).rows(), xc = value(pa).cols();
            NodeId ones = xrank == 1 ? const_ones(xr) : const_ones(xr, xc);
            return mul(adj, ones);
        }
        case Op::Mean: {
            const int xrank = value(pa).rank();
            const Eigen::Index xr = value(pa).rows(), xc = value(pa).cols();
            const double inv = 1.0 / static_cast<double>(value(pa).size());
            NodeId ones = xrank == 1 ? const_ones(xr) : const_ones(xr, xc);
            NodeId scaled = mul(adj, const_scalar(inv));
            return mul(scaled, ones);
        }
        case Op::Exp:
            return mul(adj, self);
        case Op::Neg:
            return neg(adj);
    }
    throw Error("vjp for op input");
}

Tensor Graph::vjp_value(NodeId id, const Tensor& adj, std::size_t k) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    auto pv = [&](NodeId p) -> const Tensor& { return nodes_[static_cast<std::size_t>(p)].value; };
    auto ew_mul = [](const Tensor& a, const Tensor& b) {
        // same semantics as Op::Mul eval
        if (a.same_shape(b)) {
            Tensor out = a;
            out.mat() = a.mat().cwiseProduct(b.mat());
            return out;
        }
        if (a.is_scalar()) {
            Tensor out = b;
            out.mat() = b.mat() * a.item();
            return out;
        }
        Tensor out = a;
        out.mat() = a.mat() * b.item();
        return out;
    };
    auto mm = [](const Tensor& a, const Tensor& b, bool ta, bool tb) {
        Eigen::MatrixXd r;
        if (!ta && !tb) r.noalias() = a.mat() * b.mat();
        else if (ta && !tb) r.noalias() = a.mat().transpose() * b.mat();
        else if (!ta && tb) r.noalias() = a.mat() * b.mat().transpose();
        else r.noalias() = a.mat().transpose() * b.mat().transpose();
        if (r.cols() == 1) return Tensor::from_vector(r.col(0));
        return Tensor::from_matrix(r);
    };
    switch (n.op) {
        case Op::Input:
            break;
        case Op::Add:
            return adj;
        case Op::MatMul: {
            if (k == 0) {
                if (!n.flag0) return mm(adj, pv(n.parents[1]), false, !n.flag1);
                return mm(pv(n.parents[1]), adj, n.flag1, true);
            }
            if (!n.flag1) return mm(pv(n.parents[0]), adj, !n.flag0, false);
            return mm(adj, pv(n.parents[0]), true, n.flag0);
        }
        case Op::Tanh: {
            const Tensor& y = n.value;
            Tensor t = y;
            t.mat() = (Eigen::MatrixXd::Ones(y.rows(), y.cols()) +
                       (-(y.mat().cwiseProduct(y.mat()))));
            return ew_mul(adj, t);
        }
        case Op::Sigmoid: {
            const Tensor& y = n.value;
            Tensor t = y;
            t.mat() = y.mat().cwiseProduct(Eigen::MatrixXd::Ones(y.rows(), y.cols()) +
                                           (-y.mat()));
            return ew_mul(adj, t);
        }
        case Op::Softmax: {
            const Tensor& y = n.value;
            const double s = y.mat().cwiseProduct(adj.mat()).sum();
            Tensor t = adj;
            t.mat() = adj.mat() + (-(Eigen::MatrixXd::Ones(y.rows(), 1) * s));
            return ew_mul(y, t);
        }
        case Op::Log: {
            Tensor e = n.value;
            e.mat() = (-n.value.mat()).unaryExpr([](double x) { return std::exp(x); });
            return ew_mul(adj, e);
        }
        case Op::Mul: {
            const Tensor& mine = pv(n.parents[k]);
            const Tensor& theirs = pv(n.parents[k == 0 ? 1 : 0]);
            if (mine.same_shape(theirs) || theirs.is_scalar()) return ew_mul(adj, theirs);
            return Tensor::scalar(ew_mul(adj, theirs).mat().sum());
        }
        case Op::Concat: {
            Eigen::Index at = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const Tensor& t = pv(n.parents[j]);
                at += !n.flag0 ? t.size() : (t.rank() == 1 ? 1 : t.rows());
            }
            const Tensor& t = pv(n.parents[k]);
            if (!n.flag0)
                return Tensor::from_vector(adj.mat().col(0).segment(at, t.size()));
            if (t.rank() == 1)
                return Tensor::from_vector(adj.mat().row(at).transpose());
            return Tensor::from_matrix(adj.mat().middleRows(at, t.rows()));
        }
        case Op::Slice: {
            const Tensor& x = pv(n.parents[0]);
            if (!n.flag0) {
                Tensor out = Tensor::zeros(x.rows());
                out.mat().col(0).segment(n.i0, n.i1) = adj.mat().col(0);
                return out;
            }
            Tensor out = Tensor::zeros(x.rows(), x.cols());
            if (n.i1 == 1) out.mat().row(n.i0) = adj.mat().col(0).transpose();
            else out.mat().middleRows(n.i0, n.i1) = adj.mat();
            return out;
        }
        case Op::Sum: {
            const Tensor& x = pv(n.parents[0]);
            Tensor ones = x.rank() == 1 ? Tensor::ones(x.rows()) : Tensor::ones(x.rows(), x.cols());
            return ew_mul(adj, ones);
        }
        case Op::Mean: {
            const Tensor& x = pv(n.parents[0]);
            Tensor ones = x.rank() == 1 ? Tensor::ones(x.rows()) : Tensor::ones(x.rows(), x.cols());
            Tensor scaled = ew_mul(adj, Tensor::scalar(1.0 / static_cast<double>(x.size())));
            return ew_mul(scaled, ones);
        }
        case Op::Exp:
            return ew_mul(adj, n.value);
        case Op::Neg: {
            Tensor out = adj;
            out.mat() = -adj.mat();
            return out;
        }
    }
    throw Error("vjp for op input");
}

GradMap Graph::backward(NodeId loss, std::span<const NodeId> wrt) {
    check(loss);
    if (!value(loss).is_scalar())
        throw ShapeError("backward: loss must be a scalar, got " + value(loss).shape_str());
    for (NodeId w : wrt)
        if (!nodes_[check(w)].requires_grad)
            throw Error("backward: wrt node " + std::to_string(w) + " does not require grad");

    const std::vector<bool> seen = influence_set(loss);
    std::vector<Tensor> adj(static_cast<std::size_t>(loss) + 1);
    if (nodes_[static_cast<std::size_t>(loss)].requires_grad)
        adj[static_cast<std::size_t>(loss)] = Tensor::scalar(1.0);

    for (NodeId id = loss; id >= 0; --id) {
        const auto ui = static_cast<std::size_t>(id);
        if (!seen[ui] || adj[ui].empty()) continue;
        const Node& n = nodes_[ui];
        if (n.op == Op::Input) continue;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            const NodeId p = n.parents[k];
            if (!nodes_[static_cast<std::size_t>(p)].requires_grad) continue;
            Tensor contrib = vjp_value(id, adj[ui], k);
            Tensor& slot = adj[static_cast<std::size_t>(p)];
            if (slot.empty()) slot = std::move(contrib);
            else slot.mat() += contrib.mat();
        }
    }

    GradMap out;
    for (NodeId w : wrt) {
        const auto uw = static_cast<std::size_t>(w);
        if (w <= loss && !adj[uw].empty()) {
            out[w] = adj[uw];
        } else {
            const Tensor& v = value(w);
            out[w] = v.rank() == 1 ? Tensor::zeros(v.rows()) : Tensor::zeros(v.rows(), v.cols());
        }
    }
    return out;
}

std::vector<NodeId> Graph::backward_nodes(NodeId loss, std::span<const NodeId> wrt) {
    check(loss);
    if (!value(loss).is_scalar())
        throw ShapeError("backward: loss must be a scalar, got " + value(loss).shape_str());
    for (NodeId w : wrt)
        if (!nodes_[check(w)].requires_grad)
            throw Error("backward: wrt node " + std::to_string(w) + " does not require grad");

    const std::vector<bool> seen = influence_set(loss);
    std::vector<NodeId> adj(static_cast<std::size_t>(loss) + 1, kNoNode);
    if (nodes_[static_cast<std::size_t>(loss)].requires_grad)
        adj[static_cast<std::size_t>(loss)] = const_scalar(1.0);

    for (NodeId id = loss; id >= 0; --id) {
        const auto ui = static_cast<std::size_t>(id);
        if (!seen[ui] || adj[ui] == kNoNode) continue;
        if (nodes_[ui].op == Op::Input) continue;
        const std::size_t arity = nodes_[ui].parents.size();
        for (std::size_t k = 0; k < arity; ++k) {
            const NodeId p = nodes_[ui].parents[k];
            if (!nodes_[static_cast<std::size_t>(p)].requires_grad) continue;
            NodeId contrib = vjp_node(id, adj[ui], k);
            NodeId& slot = adj[static_cast<std::size_t>(p)];
            slot = slot == kNoNode ? contrib : add(slot, contrib);
        }
    }

    std::vector<NodeId> out;
    out.reserve(wrt.size());
    for (NodeId w : wrt) {
        const auto uw = static_cast<std::size_t>(w);
        if (w <= loss && adj[uw] != kNoNode) {
            out.push_back(adj[uw]);
        } else {
            const Tensor& v = value(w);
            out.push_back(v.rank() == 1 ? const_zeros(v.rows())
                                        : const_zeros(v.rows(), v.cols()));
        }
    }
    return out;
}

GradMap backward_through_update(Graph& g, const UpdateSpec& spec,
                                const OuterLossBuilder& outer_loss_builder,
                                std::span<const NodeId> extra_wrt) {
    if (spec.alpha.size() != spec.theta_layers.size())
        throw Error("backward_through_update: alpha count " + std::to_string(spec.alpha.size()) +
                    " != layer count " + std::to_string(spec.theta_layers.size()));

    std::vector<NodeId> flat;
    for (const auto& layer : spec.theta_layers)
        flat.insert(flat.end(), layer.begin(), layer.end());

    std::vector<NodeId> grads;
    if (spec.first_order) {
        GradMap gm = g.backward(spec.inner_loss, flat);
        grads.reserve(flat.size());
        for (NodeId id : flat) grads.push_back(g.constant(gm.at(id)));
    } else {
        grads = g.backward_nodes(spec.inner_loss, flat);
    }

    std::vector<std::vector<NodeId>> updated(spec.theta_layers.size());
    std::size_t at = 0;
    for (std::size_t L = 0; L < spec.theta_layers.size(); ++L) {
        for (std::size_t i = 0; i < spec.theta_layers[L].size(); ++i, ++at) {
            NodeId step = g.mul(spec.alpha[L], grads[at]);
            updated[L].push_back(g.add(spec.theta_layers[L][i], g.neg(step)));
        }
    }

    NodeId outer = outer_loss_builder(g, updated);
    if (!g.value(outer).is_scalar())
        throw ShapeError("backward_through_update: outer loss must be scalar");

    std::vector<NodeId> wrt = flat;
    wrt.insert(wrt.end(), spec.alpha.begin(), spec.alpha.end());
    wrt.insert(wrt.end(), extra_wrt.begin(), extra_wrt.end());
    return g.backward(outer, wrt);
}

} // namespace handrec
