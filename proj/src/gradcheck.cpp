#include "batmarl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace batmarl {

GradCheckResult finite_diff_check(const std::vector<Parameter*>& params,
                                  const std::function<double(bool)>& run, int max_entries_per_param,
                                  std::mt19937_64& rng, double step) {
    for (Parameter* p : params) p->zero_grad();
    run(true);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    GradCheckResult res;
    for (size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        if (!p.trainable) continue;
        size_t n = p.value.values.size();
        std::vector<size_t> entries(n);
        for (size_t i = 0; i < n; ++i) entries[i] = i;
        if (static_cast<size_t>(max_entries_per_param) < n) {
            std::shuffle(entries.begin(), entries.end(), rng);
            entries.resize(static_cast<size_t>(max_entries_per_param));
        }
        for (size_t i : entries) {
            double saved = p.value.values[i];
            p.value.values[i] = saved + step;
            double up = run(false);
            p.value.values[i] = saved - step;
            double down = run(false);
            p.value.values[i] = saved;
            double numeric = (up - down) / (2.0 * step);
            double a = analytic[k].values[i];
            double rel = std::abs(a - numeric) / std::max(std::abs(numeric), 1e-8);
            ++res.entries_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    for (Parameter* p : params) p->zero_grad();
    return res;
}

}  // namespace batmarl
