#pragma once

#include <vector>

#include "batmarl/tensor.hpp"

namespace batmarl {

struct RmsPropConfig {
    double learning_rate = 5e-4;
    double smoothing = 0.99;
    double epsilon = 1e-5;
};

// RMSProp over a fixed parameter set. step() consumes and zeroes the
// accumulated gradients; non-trainable parameters are left untouched.
class RmsProp {
public:
    RmsProp(std::vector<Parameter*> params, RmsPropConfig cfg);

    void step();
    const RmsPropConfig& config() const { return cfg_; }
    const Tensor& mean_square(const Parameter& p) const;
    const std::vector<Parameter*>& params() const { return params_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> mean_square_;
    RmsPropConfig cfg_;
};

}  // namespace batmarl
