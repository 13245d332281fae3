#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "handrec/errors.hpp"

namespace handrec {

// Dense rank-1 or rank-2 tensor of 64-bit floats. Vectors are column shaped;
// a scalar is a vector of length 1. Serialization order is row-major.
class Tensor {
public:
    Tensor() = default;

    static Tensor scalar(double v);
    static Tensor zeros(Eigen::Index n);              // rank 1
    static Tensor zeros(Eigen::Index r, Eigen::Index c); // rank 2
    static Tensor ones(Eigen::Index n);
    static Tensor ones(Eigen::Index r, Eigen::Index c);
    static Tensor from_vector(const Eigen::VectorXd& v);
    static Tensor from_matrix(const Eigen::MatrixXd& m);
    static Tensor from_list(std::initializer_list<double> v);

    int rank() const { return rank_; }
    Eigen::Index rows() const { return m_.rows(); }
    Eigen::Index cols() const { return m_.cols(); }
    Eigen::Index size() const { return m_.size(); }
    bool empty() const { return rank_ == 0; }
    bool is_scalar() const { return rank_ == 1 && m_.size() == 1; }

    std::vector<Eigen::Index> shape() const;
    std::string shape_str() const;
    bool same_shape(const Tensor& o) const;

    double item() const; // requires scalar
    double& operator()(Eigen::Index i) { return m_(i); }
    double operator()(Eigen::Index i) const { return m_(i); }
    double& operator()(Eigen::Index i, Eigen::Index j) { return m_(i, j); }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

    Eigen::MatrixXd& mat() { return m_; }
    const Eigen::MatrixXd& mat() const { return m_; }

    bool all_finite() const;
    bool bitwise_equal(const Tensor& o) const;

    // Row-major flat views, used by the checkpoint blob format.
    void append_row_major(std::vector<double>& out) const;
    static Tensor from_row_major(const std::vector<Eigen::Index>& shape,
                                 const double* data, std::size_t n);

private:
    Eigen::MatrixXd m_;
    int rank_ = 0;
};

} // namespace handrec
