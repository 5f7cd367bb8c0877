#pragma once

#include <memory>
#include <random>

#include "batmarl/env.hpp"
#include "batmarl/episode.hpp"
#include "batmarl/nets.hpp"
#include "batmarl/optim.hpp"

namespace batmarl {

struct EpsilonSchedule {
    double start = 1.0;
    double finish = 0.05;
    long anneal_steps = 50000;

    double at(long step) const {
        if (step <= 0) return start;
        if (step >= anneal_steps) return finish;
        return start + (finish - start) * static_cast<double>(step) / static_cast<double>(anneal_steps);
    }
};

// With probability epsilon a uniform action, otherwise the argmax
// (ties broken toward the lowest index).
int epsilon_greedy(const std::vector<double>& q, double epsilon, std::mt19937_64& rng);

// A sampled batch of whole episodes from a single buffer, longest first.
// mask[e * max_len + t] is 1 within episode e and 0 beyond its termination.
struct TrainBatch {
    std::vector<const Episode*> episodes;
    std::vector<double> mask;
    int max_len = 0;
    bool abnormal = false;
};

// Validates buffer homogeneity: every episode's route (any effective trigger
// vs none) must match `abnormal`.
TrainBatch build_train_batch(std::vector<const Episode*> episodes, bool abnormal);

struct QmixConfig {
    int hidden = 64;
    int mixing_embed = 32;
    double discount = 0.99;
    RmsPropConfig optim;
    bool finite_checks = true;
    int adversary_index = 0;
};

// Per-agent recurrent Q networks (one of them the adversary's flagged
// variant), the monotone mixer, target copies and the TD update over whole
// episodes replayed from zero hidden state.
class QmixLearner {
public:
    QmixLearner(const DecPomdpSpec& spec, const QmixConfig& cfg, uint64_t seed);

    // One optimizer step on the squared TD error summed over unmasked steps;
    // bootstraps with the target copies' own greedy action, no bootstrap past
    // termination. Returns the loss.
    double update(const TrainBatch& batch);
    // Gradient sweep without the optimizer step (for finite-difference checks).
    double update_backward_only(const TrainBatch& batch);
    double loss_only(const TrainBatch& batch);
    void refresh_targets();

    // Live per-step mixed Q values along one recorded episode.
    std::vector<double> evaluate_q_totals(const Episode& ep);

    RecurrentQNetwork& teammate(int agent);
    AdversaryQNetwork& adversary() { return adversary_; }
    MixingNetwork& mixer() { return mixer_; }
    const RecurrentQNetwork& target_teammate(int agent) const;
    const AdversaryQNetwork& target_adversary() const { return tgt_adversary_; }
    const MixingNetwork& target_mixer() const { return tgt_mixer_; }
    int adversary_index() const { return cfg_.adversary_index; }
    const DecPomdpSpec& env_spec() const { return spec_; }
    const QmixConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();
    // Live plus target parameters, for checkpointing.
    std::vector<Parameter*> all_parameters();

private:
    DecPomdpSpec spec_;
    QmixConfig cfg_;
    std::mt19937_64 init_rng_;
    std::vector<RecurrentQNetwork> teammates_, tgt_teammates_;
    AdversaryQNetwork adversary_, tgt_adversary_;
    MixingNetwork mixer_, tgt_mixer_;
    std::unique_ptr<RmsProp> opt_;

    int slot(int agent) const;
    double run_update(const TrainBatch& batch, bool do_backward);
};

}  // namespace batmarl
