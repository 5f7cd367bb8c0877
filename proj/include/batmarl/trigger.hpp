#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "batmarl/episode.hpp"
#include "batmarl/nets.hpp"
#include "batmarl/optim.hpp"
#include "batmarl/rnd.hpp"

namespace batmarl {

struct TriggerConfig {
    int hidden = 64;
    int value_hidden = 128;
    int n_agents = 2;
    int adversary_index = 0;
    double discount = 0.99;
    RmsPropConfig policy_optim, value_optim;
    bool finite_checks = true;
    // Balance constant alpha: mean novelty over the current batch, or a
    // running mean across every batch seen so far.
    bool batch_alpha = true;
};

struct TriggerDecision {
    int d = 0;
    double log_prob = 0.0;
};

// Per-step rewards aligned with one abnormal episode, plus the balance
// constant used to build them.
struct TriggerRewardSeries {
    std::vector<double> rewards;
    double alpha = 0.0;
};

// Discounted suffix sums by backward recursion.
std::vector<double> discounted_returns(const std::vector<double>& rewards, double discount);

struct TriggerLosses {
    double policy_loss = 0.0;
    double value_loss = 0.0;
};

// The adversary's trigger head: a recurrent two-logit policy deciding when
// to trigger, trained by REINFORCE against a state-value baseline on the
// novelty-based rewards of the teammates' next observations.
class TriggerModule {
public:
    TriggerModule(int obs_dim, int state_dim, const TriggerConfig& cfg, uint64_t seed);

    // Sample d from the softmax over the two logits; hidden advances.
    TriggerDecision decide(const std::vector<double>& obs, std::vector<double>& hidden,
                           std::mt19937_64& rng, EvalScratch& scratch) const;
    // {p(d=0), p(d=1)} at this step; hidden advances.
    std::pair<double, double> probabilities(const std::vector<double>& obs, std::vector<double>& hidden,
                                            EvalScratch& scratch) const;

    // Influence reward minus the trigger cost for each step of each abnormal
    // episode: mean teammate novelty of the next observation, zero at the
    // final step, minus alpha for each step that triggered.
    std::vector<TriggerRewardSeries> compute_trigger_rewards(const std::vector<const Episode*>& episodes,
                                                             const RndModule& rnd);
    // Ablation variant: uniform(0,1) draws stand in for the novelty values,
    // the reward assembly is otherwise identical.
    std::vector<TriggerRewardSeries> compute_trigger_rewards_random(
        const std::vector<const Episode*>& episodes, std::mt19937_64& rng);

    // Policy gradient step (advantages constant), then value regression
    // step, then the freshness floor advances past this batch.
    TriggerLosses update(const std::vector<const Episode*>& episodes,
                         const std::vector<TriggerRewardSeries>& rewards);
    double reinforce_update(const std::vector<const Episode*>& episodes,
                            const std::vector<TriggerRewardSeries>& rewards);
    double value_update(const std::vector<const Episode*>& episodes,
                        const std::vector<TriggerRewardSeries>& rewards);
    // Gradient sweeps without the optimizer step, and plain evaluations (for
    // finite-difference checks).
    double reinforce_backward_only(const std::vector<const Episode*>& episodes,
                                   const std::vector<TriggerRewardSeries>& rewards);
    double reinforce_loss_only(const std::vector<const Episode*>& episodes,
                               const std::vector<TriggerRewardSeries>& rewards);
    double value_backward_only(const std::vector<const Episode*>& episodes,
                               const std::vector<TriggerRewardSeries>& rewards);
    double value_loss_only(const std::vector<const Episode*>& episodes,
                           const std::vector<TriggerRewardSeries>& rewards);

    double value_of(const std::vector<double>& state) const;

    RecurrentQNetwork& policy() { return policy_; }
    const RecurrentQNetwork& policy() const { return policy_; }
    Mlp3& value_net() { return value_net_; }
    const Mlp3& value_net() const { return value_net_; }
    uint64_t freshness_floor() const { return floor_; }
    const TriggerConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();

private:
    long novelty_row_count(const std::vector<const Episode*>& episodes) const;
    std::vector<TriggerRewardSeries> assemble_rewards(const std::vector<const Episode*>& episodes,
                                                      const std::vector<double>& novelty);
    void check_fresh(const std::vector<const Episode*>& episodes,
                     const std::vector<TriggerRewardSeries>& rewards) const;
    std::vector<std::vector<double>> advantages(const std::vector<const Episode*>& episodes,
                                                const std::vector<TriggerRewardSeries>& rewards) const;
    double run_policy(const std::vector<const Episode*>& episodes,
                      const std::vector<TriggerRewardSeries>& rewards, bool do_backward);
    double run_value(const std::vector<const Episode*>& episodes,
                     const std::vector<TriggerRewardSeries>& rewards, bool do_backward);

    TriggerConfig cfg_;
    std::mt19937_64 init_rng_;
    RecurrentQNetwork policy_;
    Mlp3 value_net_;
    std::unique_ptr<RmsProp> policy_opt_, value_opt_;
    uint64_t floor_ = 0;
    double alpha_sum_ = 0.0;
    long alpha_count_ = 0;
};

}  // namespace batmarl
