#include "batmarl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace batmarl {

RmsProp::RmsProp(std::vector<Parameter*> params, RmsPropConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw std::invalid_argument("RmsProp: empty parameter set");
    if (!(cfg_.learning_rate > 0) || !(cfg_.smoothing > 0 && cfg_.smoothing < 1) || !(cfg_.epsilon > 0))
        throw std::invalid_argument("RmsProp: bad hyperparameters");
    for (Parameter* p : params_) {
        if (!p) throw std::invalid_argument("RmsProp: null parameter");
        mean_square_.push_back(Tensor::zeros(p->value.shape));
    }
}

void RmsProp::step() {
    for (size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        if (!p.value.same_shape(p.grad)) throw std::invalid_argument("RmsProp: grad shape drifted for " + p.name);
        if (!p.trainable) {
            p.grad.fill(0.0);
            continue;
        }
        Tensor& ms = mean_square_[k];
        for (size_t i = 0; i < p.value.values.size(); ++i) {
            double g = p.grad.values[i];
            ms.values[i] = cfg_.smoothing * ms.values[i] + (1.0 - cfg_.smoothing) * g * g;
            p.value.values[i] -= cfg_.learning_rate * g / (std::sqrt(ms.values[i]) + cfg_.epsilon);
            p.grad.values[i] = 0.0;
        }
    }
}

const Tensor& RmsProp::mean_square(const Parameter& p) const {
    for (size_t k = 0; k < params_.size(); ++k)
        if (params_[k] == &p) return mean_square_[k];
    throw std::invalid_argument("RmsProp: parameter not registered: " + p.name);
}

}  // namespace batmarl
