#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "handrec/tensor.hpp"

namespace handrec {

// Closed op set. Everything else is composed from these; matmul carries
// transpose flags, slice carries a range, concat a row-stacking flag.
enum class Op : std::uint8_t {
    Input,
    Add,
    MatMul,
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Mul,
    Concat,
    Slice,
    Sum,
    Mean,
    Exp,
    Neg,
};

const char* op_name(Op op);

// Max-shifted softmax of a vector; the same routine backs the softmax op.
Tensor softmax_vector(const Tensor& x);

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

struct Node {
    Op op = Op::Input;
    bool requires_grad = false;
    bool flag0 = false; // MatMul: transpose lhs.  Concat/Slice: row mode.
    bool flag1 = false; // MatMul: transpose rhs.
    std::int32_t i0 = 0; // Slice: begin
    std::int32_t i1 = 0; // Slice: count
    std::vector<NodeId> parents;
    Tensor value;
};

using GradMap = std::unordered_map<NodeId, Tensor>;

// Computation record for one task. Node ids are topological by construction
// (parents always precede children); values are computed eagerly as nodes are
// appended. Single-threaded; build one Graph per task.
class Graph {
public:
    Graph() { nodes_.reserve(1024); }

    NodeId input(Tensor t, bool requires_grad = false);
    NodeId constant(Tensor t) { return input(std::move(t), false); }

    // Cached all-ones / all-zeros constants (dedup keeps graphs small).
    NodeId const_ones(Eigen::Index n);
    NodeId const_ones(Eigen::Index r, Eigen::Index c);
    NodeId const_zeros(Eigen::Index n);
    NodeId const_zeros(Eigen::Index r, Eigen::Index c);
    NodeId const_scalar(double v);

    NodeId add(NodeId a, NodeId b);
    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    NodeId tanh(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId softmax(NodeId x); // rank-1 only
    NodeId log(NodeId x);
    NodeId mul(NodeId a, NodeId b); // elementwise, or scalar * tensor
    NodeId concat(std::span<const NodeId> parts, bool rows = false);
    NodeId slice(NodeId x, std::int32_t begin, std::int32_t count); // vector range / rows
    NodeId sum(NodeId x);
    NodeId mean(NodeId x);
    NodeId exp(NodeId x);
    NodeId neg(NodeId x);

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }
    const Node& node(NodeId id) const { return nodes_[check(id)]; }
    std::size_t size() const { return nodes_.size(); }

    // Rebind an input node, then call forward() to re-evaluate.
    void set_input(NodeId id, Tensor t);

    // Recomputes every node in topological order and returns the requested
    // values. Deterministic given the bound inputs.
    std::vector<Tensor> forward(std::span<const NodeId> outputs);

    // Reverse-mode gradients of a scalar loss, returned as plain tensors.
    // Every wrt node must be marked requires_grad; nodes that do not
    // influence the loss get zeros.
    GradMap backward(NodeId loss, std::span<const NodeId> wrt);

    // Same traversal, but gradients are emitted as graph nodes so they can be
    // differentiated again (second-order terms). Zero gradients come back as
    // zero constants.
    std::vector<NodeId> backward_nodes(NodeId loss, std::span<const NodeId> wrt);

private:
    std::size_t check(NodeId id) const;
    NodeId append(Node n);
    Tensor eval(const Node& n) const;

    // Emits the contribution of `id`'s adjoint to parent `k` as graph nodes.
    NodeId vjp_node(NodeId id, NodeId adj, std::size_t k);
    // Value-twin of vjp_node; mirrors the exact arithmetic so that both
    // backward modes agree bitwise.
    Tensor vjp_value(NodeId id, const Tensor& adj, std::size_t k) const;

    std::vector<bool> influence_set(NodeId loss) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::uint64_t, NodeId> const_cache_;
};

// ---------------------------------------------------------------------------
// Expression-style handles: free functions over (graph, id) pairs.

struct Var {
    Graph* g = nullptr;
    NodeId id = kNoNode;
    Var() = default;
    Var(Graph& graph, NodeId node) : g(&graph), id(node) {}
    const Tensor& value() const { return g->value(id); }
};

inline Var operator+(Var a, Var b) { return {*a.g, a.g->add(a.id, b.id)}; }
inline Var operator*(Var a, Var b) { return {*a.g, a.g->mul(a.id, b.id)}; }
inline Var operator-(Var x) { return {*x.g, x.g->neg(x.id)}; }
inline Var operator-(Var a, Var b) { return a + (-b); }
inline Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    return {*a.g, a.g->matmul(a.id, b.id, ta, tb)};
}
inline Var tanh(Var x) { return {*x.g, x.g->tanh(x.id)}; }
inline Var sigmoid(Var x) { return {*x.g, x.g->sigmoid(x.id)}; }
inline Var softmax(Var x) { return {*x.g, x.g->softmax(x.id)}; }
inline Var log(Var x) { return {*x.g, x.g->log(x.id)}; }
inline Var exp(Var x) { return {*x.g, x.g->exp(x.id)}; }
inline Var sum(Var x) { return {*x.g, x.g->sum(x.id)}; }
inline Var mean(Var x) { return {*x.g, x.g->mean(x.id)}; }
inline Var slice(Var x, std::int32_t begin, std::int32_t count) {
    return {*x.g, x.g->slice(x.id, begin, count)};
}
inline Var concat(Graph& g, std::span<const NodeId> parts, bool rows = false) {
    return {g, g.concat(parts, rows)};
}

// ---------------------------------------------------------------------------
// Differentiable one-step update: theta' = theta - alpha (x) grad(inner_loss),
// alpha one scalar per layer. outer_loss_builder maps the updated layers to a
// scalar node; the returned map holds d(outer)/d(theta, alpha, extra),
// including second-order terms unless first_order is set (then the inner
// gradient is treated as a constant).
struct UpdateSpec {
    std::vector<std::vector<NodeId>> theta_layers;
    std::vector<NodeId> alpha; // one per layer
    NodeId inner_loss = kNoNode;
    bool first_order = false;
};

using OuterLossBuilder =
    std::function<NodeId(Graph&, const std::vector<std::vector<NodeId>>&)>;

GradMap backward_through_update(Graph& g, const UpdateSpec& spec,
                                const OuterLossBuilder& outer_loss_builder,
                                std::span<const NodeId> extra_wrt = {});

} // namespace handrec
