#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "batmarl/tensor.hpp"

namespace batmarl {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "param[i]" of the worst entry
    int entries_checked = 0;

    bool passed(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Central-difference verification of backward rules. `run(true)` must build a
// fresh graph, run backward and leave gradients in the parameters, returning
// the loss; `run(false)` must return the loss only. Entries are subsampled
// per parameter when max_entries_per_param is smaller than the tensor.
// Relative error: |analytic - numeric| / max(|numeric|, 1e-8).
GradCheckResult finite_diff_check(const std::vector<Parameter*>& params,
                                  const std::function<double(bool)>& run, int max_entries_per_param,
                                  std::mt19937_64& rng, double step = 1e-5);

}  // namespace batmarl
