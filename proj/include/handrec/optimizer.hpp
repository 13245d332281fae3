#pragma once

#include <vector>

#include "handrec/tensor.hpp"

namespace handrec {

// Adaptive moment estimation over a flat list of tensors. Moments persist
// across steps and are part of the checkpoint.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void init_like(const std::vector<const Tensor*>& params);
    bool initialized() const { return !m.empty(); }
    void update(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                double lr);
};

} // namespace handrec
