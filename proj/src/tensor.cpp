#include "handrec/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace handrec {

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.m_ = Eigen::MatrixXd::Constant(1, 1, v);
    t.rank_ = 1;
    return t;
}

Tensor Tensor::zeros(Eigen::Index n) {
    Tensor t;
    t.m_ = Eigen::MatrixXd::Zero(n, 1);
    t.rank_ = 1;
    return t;
}

Tensor Tensor::zeros(Eigen::Index r, Eigen::Index c) {
    Tensor t;
    t.m_ = Eigen::MatrixXd::Zero(r, c);
    t.rank_ = 2;
    return t;
}

Tensor Tensor::ones(Eigen::Index n) {
    Tensor t;
    t.m_ = Eigen::MatrixXd::Ones(n, 1);
    t.rank_ = 1;
    return t;
}

Tensor Tensor::ones(Eigen::Index r, Eigen::Index c) {
    Tensor t;
    t.m_ = Eigen::MatrixXd::Ones(r, c);
    t.rank_ = 2;
    return t;
}

Tensor Tensor::from_vector(const Eigen::VectorXd& v) {
    Tensor t;
    t.m_ = v;
    t.rank_ = 1;
    return t;
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
    Tensor t;
    t.m_ = m;
    t.rank_ = 2;
    return t;
}

Tensor Tensor::from_list(std::initializer_list<double> v) {
    Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x(i++) = d;
    return from_vector(x);
}

std::vector<Eigen::Index> Tensor::shape() const {
    if (rank_ == 1) return {m_.rows()};
    return {m_.rows(), m_.cols()};
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    if (rank_ == 1) {
        os << m_.rows();
    } else if (rank_ == 2) {
        os << m_.rows() << 'x' << m_.cols();
    }
    os << ']';
    return os.str();
}

bool Tensor::same_shape(const Tensor& o) const {
    return rank_ == o.rank_ && m_.rows() == o.m_.rows() && m_.cols() == o.m_.cols();
}

double Tensor::item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str());
    return m_(0, 0);
}

bool Tensor::all_finite() const {
    return m_.array().isFinite().all();
}

bool Tensor::bitwise_equal(const Tensor& o) const {
    if (!same_shape(o)) return false;
    return std::memcmp(m_.data(), o.m_.data(),
                       sizeof(double) * static_cast<std::size_t>(m_.size())) == 0;
}

void Tensor::append_row_major(std::vector<double>& out) const {
    for (Eigen::Index r = 0; r < m_.rows(); ++r)
        for (Eigen::Index c = 0; c < m_.cols(); ++c) out.push_back(m_(r, c));
}

Tensor Tensor::from_row_major(const std::vector<Eigen::Index>& shape,
                              const double* data, std::size_t n) {
    Tensor t;
    if (shape.size() == 1) {
        if (static_cast<std::size_t>(shape[0]) != n)
            throw ShapeError("tensor payload size mismatch");
        t.m_.resize(shape[0], 1);
        t.rank_ = 1;
        for (Eigen::Index i = 0; i < shape[0]; ++i) t.m_(i, 0) = data[i];
    } else if (shape.size() == 2) {
        if (static_cast<std::size_t>(shape[0] * shape[1]) != n)
            throw ShapeError("tensor payload size mismatch");
        t.m_.resize(shape[0], shape[1]);
        t.rank_ = 2;
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < shape[0]; ++r)
            for (Eigen::Index c = 0; c < shape[1]; ++c) t.m_(r, c) = data[k++];
    } else {
        throw ShapeError("unsupported tensor rank " + std::to_string(shape.size()));
    }
    return t;
}

} // namespace handrec
