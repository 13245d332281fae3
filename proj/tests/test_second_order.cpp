#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "handrec/graph.hpp"

using namespace handrec;

namespace {

Tensor rvec(std::mt19937_64& rng, Eigen::Index n) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return Tensor::from_vector(v);
}

Tensor rmat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
    return Tensor::from_matrix(m);
}

// Scalar toy: inner L = theta^2/2, outer L = theta'^2/2.
GradMap scalar_toy(double theta, double alpha, bool first_order, NodeId* t_out = nullptr,
                   NodeId* a_out = nullptr) {
    Graph g;
    NodeId t = g.input(Tensor::scalar(theta), true);
    NodeId a = g.input(Tensor::scalar(alpha), true);
    NodeId half = g.const_scalar(0.5);
    NodeId inner = g.mul(half, g.mul(t, t));
    UpdateSpec spec{{{t}}, {a}, inner, first_order};
    auto outer = [&](Graph& gg, const std::vector<std::vector<NodeId>>& upd) {
        return gg.mul(gg.const_scalar(0.5), gg.mul(upd[0][0], upd[0][0]));
    };
    if (t_out) *t_out = t;
    if (a_out) *a_out = a;
    return backward_through_update(g, spec, outer);
}

} // namespace

TEST_CASE("update: scalar toy closed forms") {
    NodeId t = kNoNode, a = kNoNode;
    GradMap full = scalar_toy(1.0, 0.1, false, &t, &a);
    // theta' = 0.9; d outer/d theta = theta' * (1 - alpha) = 0.81
    CHECK(std::abs(full.at(t).item() - 0.81) < 1e-10);
    // d outer/d alpha = theta' * (-grad_inner) = -0.9
    CHECK(std::abs(full.at(a).item() - (-0.9)) < 1e-10);

    GradMap fo = scalar_toy(1.0, 0.1, true, &t, &a);
    CHECK(std::abs(fo.at(t).item() - 0.9) < 1e-10);
}

TEST_CASE("update: alpha zero reduces to plain gradient") {
    NodeId t = kNoNode;
    GradMap gm = scalar_toy(1.7, 0.0, false, &t);
    // update is the identity, so the meta-gradient is d outer(theta)/d theta
    CHECK(std::abs(gm.at(t).item() - 1.7) < 1e-12);
}

TEST_CASE("update: scalar step arithmetic") {
    // L = theta^2 / 2 at theta=2 with rate 0.1: theta' = 2 - 0.1*2 = 1.8
    Graph g;
    NodeId t = g.input(Tensor::scalar(2.0), true);
    NodeId inner = g.mul(g.const_scalar(0.5), g.mul(t, t));
    std::vector<NodeId> grads = g.backward_nodes(inner, std::array{t});
    NodeId updated = g.add(t, g.neg(g.mul(g.const_scalar(0.1), grads[0])));
    CHECK(g.value(updated).item() == doctest::Approx(1.8).epsilon(1e-12));
}

TEST_CASE("update: alpha count must match layer count") {
    Graph g;
    NodeId t = g.input(Tensor::scalar(1.0), true);
    NodeId a1 = g.input(Tensor::scalar(0.1), true);
    NodeId a2 = g.input(Tensor::scalar(0.1), true);
    NodeId inner = g.mul(t, t);
    UpdateSpec spec{{{t}}, {a1, a2}, inner, false};
    auto outer = [](Graph& gg, const std::vector<std::vector<NodeId>>& upd) {
        return gg.mul(upd[0][0], upd[0][0]);
    };
    CHECK_THROWS_AS((void)backward_through_update(g, spec, outer), Error);
}

namespace {

// Two-layer toy net. Inner loss is MSE on (x_in, y_in); outer loss is MSE on
// (x_out, y_out) evaluated at theta' = theta - alpha (x) grad(inner).
struct ToyNet {
    Tensor w1, w2;       // (h, d), (1, h)
    double a1, a2;       // per-layer rates
    Tensor x_in, y_in;   // scalar target
    Tensor x_out, y_out;

    static ToyNet random(std::mt19937_64& rng, Eigen::Index d = 3, Eigen::Index h = 4) {
        ToyNet t;
        t.w1 = rmat(rng, h, d);
        t.w2 = rmat(rng, 1, h);
        t.a1 = 0.07;
        t.a2 = 0.11;
        t.x_in = rvec(rng, d);
        t.y_in = Tensor::scalar(0.3);
        t.x_out = rvec(rng, d);
        t.y_out = Tensor::scalar(-0.2);
        return t;
    }

    // Builds the composed outer loss and returns the meta-gradients.
    GradMap meta_grads(bool first_order, NodeId* w1n, NodeId* w2n, NodeId* a1n,
                       NodeId* a2n) const {
        Graph g;
        NodeId w1v = g.input(w1, true);
        NodeId w2v = g.input(w2, true);
        NodeId a1v = g.input(Tensor::scalar(a1), true);
        NodeId a2v = g.input(Tensor::scalar(a2), true);

        auto loss_at = [&](Graph& gg, NodeId l1, NodeId l2, const Tensor& x,
                           const Tensor& y) {
            NodeId h = gg.tanh(gg.matmul(l1, gg.constant(x)));
            NodeId out = gg.matmul(l2, h);
            NodeId err = gg.add(out, gg.neg(gg.constant(y)));
            return gg.mul(err, err);
        };

        NodeId inner = loss_at(g, w1v, w2v, x_in, y_in);
        UpdateSpec spec{{{w1v}, {w2v}}, {a1v, a2v}, inner, first_order};
        auto outer = [&](Graph& gg, const std::vector<std::vector<NodeId>>& upd) {
            return loss_at(gg, upd[0][0], upd[1][0], x_out, y_out);
        };
        if (w1n) *w1n = w1v;
        if (w2n) *w2n = w2v;
        if (a1n) *a1n = a1v;
        if (a2n) *a2n = a2v;
        return backward_through_update(g, spec, outer);
    }

    // Value of the composed function for finite differencing.
    double composed_outer() const {
        Graph g;
        NodeId w1v = g.input(w1, true);
        NodeId w2v = g.input(w2, true);
        auto loss_at = [&](NodeId l1, NodeId l2, const Tensor& x, const Tensor& y) {
            NodeId h = g.tanh(g.matmul(l1, g.constant(x)));
            NodeId out = g.matmul(l2, h);
            NodeId err = g.add(out, g.neg(g.constant(y)));
            return g.mul(err, err);
        };
        NodeId inner = loss_at(w1v, w2v, x_in, y_in);
        GradMap gm = g.backward(inner, std::array{w1v, w2v});
        Tensor u1 = w1, u2 = w2;
        u1.mat() -= a1 * gm.at(w1v).mat();
        u2.mat() -= a2 * gm.at(w2v).mat();
        NodeId l = loss_at(g.input(u1), g.input(u2), x_out, y_out);
        return g.value(l).item();
    }
};

double fd_of(const std::function<double(double)>& f, double x, double h = 1e-5) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

double rel(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

} // namespace

TEST_CASE("update: meta-gradients match finite differences on 2-layer nets") {
    std::mt19937_64 rng(2024);
    for (int rep = 0; rep < 5; ++rep) {
        ToyNet net = ToyNet::random(rng);
        NodeId w1n, w2n, a1n, a2n;
        GradMap gm = net.meta_grads(false, &w1n, &w2n, &a1n, &a2n);

        // every coordinate of both layers
        for (Eigen::Index i = 0; i < net.w1.size(); ++i) {
            const double got = gm.at(w1n).mat()(i);
            const double want = fd_of(
                [&](double v) {
                    ToyNet t = net;
                    t.w1.mat()(i) = v;
                    return t.composed_outer();
                },
                net.w1.mat()(i));
            CHECK(rel(got, want) < 1e-4);
        }
        for (Eigen::Index i = 0; i < net.w2.size(); ++i) {
            const double got = gm.at(w2n).mat()(i);
            const double want = fd_of(
                [&](double v) {
                    ToyNet t = net;
                    t.w2.mat()(i) = v;
                    return t.composed_outer();
                },
                net.w2.mat()(i));
            CHECK(rel(got, want) < 1e-4);
        }
        // and the per-layer rates
        CHECK(rel(gm.at(a1n).item(), fd_of(
                                         [&](double v) {
                                             ToyNet t = net;
                                             t.a1 = v;
                                             return t.composed_outer();
                                         },
                                         net.a1)) < 1e-4);
        CHECK(rel(gm.at(a2n).item(), fd_of(
                                         [&](double v) {
                                             ToyNet t = net;
                                             t.a2 = v;
                                             return t.composed_outer();
                                         },
                                         net.a2)) < 1e-4);
    }
}

TEST_CASE("update: first-order and full modes agree when the inner loss is linear") {
    std::mt19937_64 rng(5);
    Graph g;
    Tensor w0 = rvec(rng, 4);
    Tensor c = rvec(rng, 4);
    NodeId w_full = g.input(w0, true);
    NodeId a_full = g.input(Tensor::scalar(0.05), true);
    NodeId inner = g.sum(g.mul(w_full, g.constant(c))); // linear in w: zero Hessian
    UpdateSpec full{{{w_full}}, {a_full}, inner, false};
    auto outer = [&](Graph& gg, const std::vector<std::vector<NodeId>>& upd) {
        return gg.sum(gg.mul(upd[0][0], upd[0][0]));
    };
    GradMap gm_full = backward_through_update(g, full, outer);

    Graph h;
    NodeId w_fo = h.input(w0, true);
    NodeId a_fo = h.input(Tensor::scalar(0.05), true);
    NodeId inner2 = h.sum(h.mul(w_fo, h.constant(c)));
    UpdateSpec fo{{{w_fo}}, {a_fo}, inner2, true};
    GradMap gm_fo = backward_through_update(h, fo, outer);

    CHECK((gm_full.at(w_full).mat() - gm_fo.at(w_fo).mat()).cwiseAbs().maxCoeff() < 1e-12);
}
