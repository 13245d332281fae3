#include "handrec/optimizer.hpp"

#include <cmath>

namespace handrec {

void AdamState::init_like(const std::vector<const Tensor*>& params) {
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Tensor* p : params) {
        if (p->rank() == 1) {
            m.push_back(Tensor::zeros(p->rows()));
            v.push_back(Tensor::zeros(p->rows()));
        } else {
            m.push_back(Tensor::zeros(p->rows(), p->cols()));
            v.push_back(Tensor::zeros(p->rows(), p->cols()));
        }
    }
    step = 0;
}

void AdamState::update(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                       double lr) {
    if (params.size() != grads.size() || params.size() != m.size())
        throw Error("adam: parameter/gradient/moment count mismatch");
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Eigen::MatrixXd& g = grads[i].mat();
        m[i].mat() = beta1 * m[i].mat() + (1.0 - beta1) * g;
        v[i].mat() = beta2 * v[i].mat() + (1.0 - beta2) * g.cwiseProduct(g);
        const Eigen::MatrixXd mh = m[i].mat() / c1;
        const Eigen::MatrixXd vh = v[i].mat() / c2;
        params[i]->mat() -=
            lr * mh.cwiseQuotient(vh.cwiseSqrt() + Eigen::MatrixXd::Constant(
                                                       vh.rows(), vh.cols(), eps));
    }
}

} // namespace handrec
