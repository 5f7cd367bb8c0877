#pragma once

#include <memory>
#include <random>
#include <vector>

#include "batmarl/episode.hpp"
#include "batmarl/nets.hpp"
#include "batmarl/optim.hpp"

namespace batmarl {

struct RndConfig {
    int hidden = 128;
    int out = 64;
    RmsPropConfig optim;
    bool finite_checks = true;
};

// Observation memorizer: a frozen random affine map next to a trainable
// three-layer predictor. The novelty of an observation is the L2 distance
// between the two encodings; observations the predictor has memorized score
// near zero, unseen ones stay high.
class RndModule {
public:
    RndModule(int obs_dim, const RndConfig& cfg, uint64_t seed);

    int obs_dim() const { return obs_dim_; }
    int out_dim() const { return cfg_.out; }

    // r_obs = ||E(o) - fixed(o)||_2, deterministic in the parameters.
    double observation_novelty(const std::vector<double>& obs) const;
    std::vector<double> novelty_batch(const Tensor& obs_rows) const;

    // Memorization step: loss = sum of per-row L2 distances; one optimizer
    // step on the predictor only, the fixed encoder never moves. An empty
    // batch is a zero loss and a no-op.
    double update(const std::vector<std::vector<double>>& observations);
    double update_rows(const Tensor& obs_rows);
    // Gradient sweep without the optimizer step, and plain evaluation (for
    // finite-difference checks).
    double update_backward_only(const Tensor& obs_rows);
    double loss_only(const Tensor& obs_rows);

    // All teammate observations (every agent except the adversary) drawn
    // from benign episodes; an abnormal episode is a contract violation.
    static Tensor benign_teammate_observations(const std::vector<const Episode*>& episodes,
                                               int adversary_index, int n_agents, int obs_dim);

    // Trainable predictor parameters followed by the frozen encoder's.
    std::vector<Parameter*> parameters();

private:
    Tensor fixed_encode(const Tensor& obs_rows) const;
    double run(const Tensor& obs_rows, bool do_backward);

    int obs_dim_;
    RndConfig cfg_;
    std::mt19937_64 init_rng_;
    Parameter fixed_w_, fixed_b_;
    Mlp3 predictor_;
    std::unique_ptr<RmsProp> opt_;
};

}  // namespace batmarl
