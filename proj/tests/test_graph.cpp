#include <doctest.h>

#include <cmath>
#include <random>

#include "handrec/graph.hpp"

using namespace handrec;

namespace {

Tensor random_vec(std::mt19937_64& rng, Eigen::Index n, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
    return Tensor::from_vector(v);
}

Tensor random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0,
                  double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
    return Tensor::from_matrix(m);
}

// Central finite differences of value(loss) w.r.t. one input node.
Tensor fd_grad(Graph& g, NodeId loss, NodeId x, double h = 1e-5) {
    const Tensor base = g.value(x);
    Tensor out = base;
    Tensor work = base;
    for (Eigen::Index i = 0; i < base.size(); ++i) {
        work.mat()(i) = base.mat()(i) + h;
        g.set_input(x, work);
        const double fp = g.forward(std::array{loss})[0].item();
        work.mat()(i) = base.mat()(i) - h;
        g.set_input(x, work);
        const double fm = g.forward(std::array{loss})[0].item();
        work.mat()(i) = base.mat()(i);
        out.mat()(i) = (fp - fm) / (2.0 * h);
    }
    g.set_input(x, base);
    g.forward(std::array{loss});
    return out;
}

double rel_err(const Tensor& a, const Tensor& b) {
    const double na = a.mat().cwiseAbs().maxCoeff();
    const double nb = b.mat().cwiseAbs().maxCoeff();
    const double diff = (a.mat() - b.mat()).cwiseAbs().maxCoeff();
    return diff / std::max({1.0, na, nb});
}

// Checks one scalar-valued graph twice: analytic backward against central
// differences, and the node-emitting backward against the plain one.
void check_grads(Graph& g, NodeId loss, std::span<const NodeId> wrt, double tol = 1e-6) {
    GradMap gm = g.backward(loss, wrt);
    std::vector<NodeId> gn = g.backward_nodes(loss, wrt);
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        const Tensor& analytic = gm.at(wrt[i]);
        CHECK(analytic.bitwise_equal(g.value(gn[i])));
        const Tensor fd = fd_grad(g, loss, wrt[i]);
        CHECK(rel_err(analytic, fd) < tol);
    }
}

} // namespace

TEST_CASE("forward: softmax symmetry") {
    Graph g;
    NodeId x = g.input(Tensor::from_list({1.0, 1.0, 1.0}));
    NodeId p = g.softmax(x);
    for (int i = 0; i < 3; ++i) CHECK(g.value(p)(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("forward: matmul identity") {
    std::mt19937_64 rng(11);
    Graph g;
    NodeId eye = g.constant(Tensor::from_matrix(Eigen::MatrixXd::Identity(2, 2)));
    Tensor x = random_vec(rng, 2);
    NodeId xv = g.input(x);
    NodeId y = g.matmul(eye, xv);
    CHECK(g.value(y).bitwise_equal(x));
}

TEST_CASE("forward: tanh against library oracle") {
    Graph g;
    NodeId x = g.input(Tensor::scalar(0.5));
    NodeId y = g.tanh(x);
    // std::tanh(0.5) = 0.46211715726000974
    CHECK(std::abs(g.value(y).item() - std::tanh(0.5)) < 1e-12);
    CHECK(g.value(y).item() == doctest::Approx(0.46211715726).epsilon(1e-10));
}

TEST_CASE("forward: re-evaluation after set_input") {
    Graph g;
    NodeId x = g.input(Tensor::from_list({1.0, 2.0}));
    NodeId y = g.sum(g.mul(x, x));
    CHECK(g.value(y).item() == doctest::Approx(5.0));
    g.set_input(x, Tensor::from_list({3.0, 4.0}));
    CHECK(g.forward(std::array{y})[0].item() == doctest::Approx(25.0));
}

TEST_CASE("backward: sum of squares") {
    Graph g;
    NodeId x = g.input(Tensor::from_list({1.0, 2.0, 3.0}), true);
    NodeId loss = g.sum(g.mul(x, x));
    GradMap gm = g.backward(loss, std::array{x});
    CHECK(gm.at(x).bitwise_equal(Tensor::from_list({2.0, 4.0, 6.0})));
}

TEST_CASE("backward: constant loss gives zero gradient") {
    Graph g;
    NodeId w = g.input(Tensor::from_list({1.0, -2.0}), true);
    NodeId loss = g.sum(g.constant(Tensor::from_list({3.0})));
    GradMap gm = g.backward(loss, std::array{w});
    CHECK(gm.at(w).bitwise_equal(Tensor::zeros(2)));
}

TEST_CASE("backward: cross-entropy of softmax gives p minus one-hot") {
    std::mt19937_64 rng(42);
    Graph g;
    NodeId z = g.input(random_vec(rng, 5, -2.0, 2.0), true);
    const int k = 2;
    NodeId p = g.softmax(z);
    NodeId loss = g.neg(g.log(g.slice(p, k, 1)));
    GradMap gm = g.backward(loss, std::array{z});

    Tensor expected = g.value(p);
    expected.mat()(k) -= 1.0;
    CHECK(rel_err(gm.at(z), expected) < 1e-9);

    const Tensor fd = fd_grad(g, loss, z);
    CHECK(rel_err(gm.at(z), fd) < 1e-6);
}

TEST_CASE("backward: non-scalar loss rejected") {
    Graph g;
    NodeId x = g.input(Tensor::from_list({1.0, 2.0}), true);
    NodeId y = g.mul(x, x);
    CHECK_THROWS_AS((void)g.backward(y, std::array{x}), ShapeError);
}

TEST_CASE("errors: shape mismatch names the op and shapes") {
    Graph g;
    NodeId a = g.input(Tensor::zeros(2, 3));
    NodeId b = g.input(Tensor::zeros(2, 3));
    try {
        (void)g.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
    CHECK_THROWS_AS((void)g.add(a, g.input(Tensor::zeros(3, 2))), ShapeError);
}

TEST_CASE("backward: fan-out accumulation matches scaling") {
    Graph g;
    NodeId x1 = g.input(Tensor::from_list({0.3, -0.7}), true);
    NodeId y1 = g.sum(g.mul(g.add(x1, x1), g.add(x1, x1))); // (x+x)^2
    GradMap g1 = g.backward(y1, std::array{x1});

    Graph h;
    NodeId x2 = h.input(Tensor::from_list({0.3, -0.7}), true);
    NodeId two = h.const_scalar(2.0);
    NodeId y2 = h.sum(h.mul(h.mul(two, x2), h.mul(two, x2))); // (2x)^2
    GradMap g2 = h.backward(y2, std::array{x2});

    CHECK(rel_err(g1.at(x1), g2.at(x2)) < 1e-15);
}

TEST_CASE("backward: determinism is bit-exact") {
    auto run = [] {
        std::mt19937_64 rng(7);
        Graph g;
        NodeId w = g.input(random_mat(rng, 3, 4), true);
        NodeId x = g.input(random_vec(rng, 4));
        NodeId y = g.tanh(g.matmul(w, x));
        NodeId loss = g.mean(g.mul(y, y));
        GradMap gm = g.backward(loss, std::array{w});
        return std::pair{g.value(loss), gm.at(w)};
    };
    auto [l1, w1] = run();
    auto [l2, w2] = run();
    CHECK(l1.bitwise_equal(l2));
    CHECK(w1.bitwise_equal(w2));
}

TEST_CASE("property: finite differences across the op set") {
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<int> dim(1, 5);

    for (int rep = 0; rep < 50; ++rep) {
        const Eigen::Index n = dim(rng);
        const Eigen::Index m = dim(rng);

        {
            // add + neg + sum
            Graph g;
            NodeId a = g.input(random_vec(rng, n), true);
            NodeId b = g.input(random_vec(rng, n), true);
            NodeId r = g.constant(random_vec(rng, n));
            NodeId loss = g.sum(g.mul(g.add(a, g.neg(b)), r));
            check_grads(g, loss, std::array{a, b});
        }
        {
            // matmul, all transpose combinations
            Graph g;
            NodeId a = g.input(random_mat(rng, m, n), true);
            NodeId b = g.input(random_mat(rng, n, m), true);
            NodeId r1 = g.constant(random_mat(rng, m, m));
            NodeId l1 = g.sum(g.mul(g.matmul(a, b), r1));
            check_grads(g, l1, std::array{a, b});

            NodeId c = g.input(random_mat(rng, n, m), true); // c^T (m,n) x b^T (n,m)
            NodeId c2 = g.input(random_mat(rng, m, n), true);
            NodeId r3 = g.constant(random_mat(rng, m, m));
            NodeId l2 = g.sum(g.mul(g.matmul(c, c2, true, true), r3));
            check_grads(g, l2, std::array{c, c2});

            NodeId d = g.input(random_mat(rng, m, n), true);
            NodeId r2 = g.constant(random_mat(rng, n, n));
            NodeId l3 = g.sum(g.mul(g.matmul(d, d, true, false), r2));
            check_grads(g, l3, std::array{d});

            NodeId v = g.input(random_vec(rng, n), true);
            NodeId l4 = g.sum(g.mul(g.matmul(a, v), g.constant(random_vec(rng, m))));
            check_grads(g, l4, std::array{a, v});
        }
        {
            // tanh, sigmoid, exp on a matrix path
            Graph g;
            NodeId x = g.input(random_mat(rng, n, m), true);
            NodeId r = g.constant(random_mat(rng, n, m));
            NodeId loss = g.sum(g.mul(g.tanh(g.sigmoid(g.exp(x))), r));
            check_grads(g, loss, std::array{x});
        }
        {
            // softmax + log + slice on a vector
            Graph g;
            NodeId x = g.input(random_vec(rng, n + 1, -2.0, 2.0), true);
            NodeId p = g.softmax(x);
            NodeId r = g.constant(random_vec(rng, n + 1, 0.1, 1.0));
            NodeId loss = g.add(g.sum(g.mul(g.log(p), r)),
                                g.sum(g.slice(p, 0, static_cast<std::int32_t>(n))));
            check_grads(g, loss, std::array{x});
        }
        {
            // mul broadcast: scalar * tensor, both gradient sides
            Graph g;
            NodeId s = g.input(Tensor::scalar(0.7), true);
            NodeId t = g.input(random_vec(rng, n), true);
            NodeId r = g.constant(random_vec(rng, n));
            NodeId loss = g.sum(g.mul(g.mul(s, t), r));
            check_grads(g, loss, std::array{s, t});
        }
        {
            // concat (vector and row modes) + slice of rows + mean
            Graph g;
            NodeId u = g.input(random_vec(rng, n), true);
            NodeId v = g.input(random_vec(rng, m), true);
            NodeId cat = g.concat(std::array{u, v}, false);
            NodeId loss1 = g.mean(g.mul(cat, cat));
            check_grads(g, loss1, std::array{u, v});

            NodeId a = g.input(random_vec(rng, n + 1), true);
            NodeId b = g.input(random_vec(rng, n + 1), true);
            NodeId rows = g.concat(std::array{a, b}, true);
            NodeId loss2 = g.sum(g.mul(g.slice(rows, 1, 1), g.constant(random_vec(rng, n + 1))));
            check_grads(g, loss2, std::array{a, b});
        }
    }
}

TEST_CASE("property: backward modes agree bitwise on a composite graph") {
    std::mt19937_64 rng(99);
    Graph g;
    NodeId w1 = g.input(random_mat(rng, 4, 3), true);
    NodeId w2 = g.input(random_mat(rng, 2, 4), true);
    NodeId x = g.constant(random_vec(rng, 3));
    NodeId h = g.tanh(g.matmul(w1, x));
    NodeId z = g.matmul(w2, h);
    NodeId p = g.softmax(z);
    NodeId loss = g.neg(g.log(g.slice(p, 1, 1)));

    GradMap gm = g.backward(loss, std::array{w1, w2});
    std::vector<NodeId> gn = g.backward_nodes(loss, std::array{w1, w2});
    CHECK(gm.at(w1).bitwise_equal(g.value(gn[0])));
    CHECK(gm.at(w2).bitwise_equal(g.value(gn[1])));
}
