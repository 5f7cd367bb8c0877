#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "batmarl/env.hpp"
#include "batmarl/episode.hpp"
#include "batmarl/qmix.hpp"
#include "batmarl/rnd.hpp"
#include "batmarl/trigger.hpp"

namespace batmarl {

// Produces the adversary's per-step trigger decision d_t. Samplers and
// evaluators only see this interface, so the learned policy, forced
// schedules and the scripted baselines are interchangeable.
class TriggerDriver {
public:
    virtual ~TriggerDriver() = default;
    // Called once at episode start; episode_limit bounds the step count.
    virtual void begin_episode(int episode_limit, std::mt19937_64& rng) = 0;
    virtual int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) = 0;
};

// d_t sampled from the trigger policy, hidden state reset per episode.
class PolicyTriggerDriver : public TriggerDriver {
public:
    explicit PolicyTriggerDriver(const TriggerModule& trigger);
    void begin_episode(int episode_limit, std::mt19937_64& rng) override;
    int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) override;

private:
    const TriggerModule* trigger_;
    std::vector<double> hidden_;
    EvalScratch scratch_;
};

// Constant decision at every step.
class ForcedTriggerDriver : public TriggerDriver {
public:
    explicit ForcedTriggerDriver(int d);
    void begin_episode(int episode_limit, std::mt19937_64& rng) override;
    int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) override;

private:
    int d_;
};

// One uniformly random step carries the trigger; all others do not.
class RandomStepTriggerDriver : public TriggerDriver {
public:
    void begin_episode(int episode_limit, std::mt19937_64& rng) override;
    int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) override;

private:
    int trigger_step_ = -1;
    int t_ = 0;
};

// A fixed-length window of consecutive triggers starting at a uniformly
// random step (the window is clamped to start within the episode limit).
class SequenceTriggerDriver : public TriggerDriver {
public:
    explicit SequenceTriggerDriver(int length);
    void begin_episode(int episode_limit, std::mt19937_64& rng) override;
    int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) override;
    int start() const { return start_; }

private:
    int length_;
    int start_ = -1;
    int t_ = 0;
};

// The team's decentralized actors. Slots may come from different learners,
// so evaluation can mix checkpoints (benign teammates, backdoored adversary).
struct TeamPolicy {
    std::vector<const RecurrentQNetwork*> teammates;  // adversary slot unused
    const AdversaryQNetwork* adversary = nullptr;
    int adversary_index = 0;
};

TeamPolicy team_policy(QmixLearner& learner);

// Runs one episode to termination: at each step the driver picks d_t, the
// adversary acts on (observation, d_t & y) and teammates on their
// observations, all through epsilon-greedy selection. y, the decisions and
// the effective bits are recorded on the episode; serial is left to the
// caller.
Episode sample_episode(CoopGrid& env, const TeamPolicy& team, TriggerDriver& driver, int y,
                       double epsilon, uint64_t env_seed, std::mt19937_64& rng);

enum class Route { benign, abnormal };

// Benign/abnormal episode stores with the sum(d & y) routing rule.
class DualReplayBuffer {
public:
    explicit DualReplayBuffer(size_t capacity = 5000) : benign_(capacity), abnormal_(capacity) {}

    Route route(Episode ep);
    EpisodeBuffer& benign() { return benign_; }
    EpisodeBuffer& abnormal() { return abnormal_; }

private:
    EpisodeBuffer benign_, abnormal_;
};

// Negate every reward strictly after the first effective trigger; a benign
// episode is a contract violation. Applying it twice restores the original.
void flip_rewards(Episode& ep);

struct AttackConfig {
    long step_limit = 2000000;    // T_l
    long benign_period = 100000;  // T_b
    int batch_size = 32;
    size_t buffer_capacity = 5000;
    int target_refresh_episodes = 200;
    long eval_interval = 20000;
    double abnormal_probability = 0.5;
    EpsilonSchedule epsilon;
    // Ablation: uniform(0,1) draws replace the novelty values in the trigger
    // rewards.
    bool random_observation_rewards = false;

    void validate() const;
};

// What one training call did; skipped phases stay false with zero losses.
struct TrainReport {
    bool benign_trained = false;
    bool abnormal_trained = false;
    bool trigger_trained = false;
    double qmix_benign_loss = 0.0;
    double rnd_loss = 0.0;
    double qmix_abnormal_loss = 0.0;
    double trigger_loss = 0.0;
    double value_loss = 0.0;
};

// One interleaved training pass: if enough benign episodes are stored, a
// TD update on a benign batch plus a novelty-memorizer update on its
// teammate observations; if enough abnormal episodes are stored, a TD
// update on an abnormal batch with flipped rewards, then trigger policy and
// value updates on the fresh abnormal episodes (cleared once consumed).
TrainReport training_step(DualReplayBuffer& buffers, QmixLearner& learner, RndModule& rnd,
                          TriggerModule& trigger, std::vector<Episode>& fresh_abnormal,
                          const AttackConfig& cfg, std::mt19937_64& rng);

struct MetricsRow {
    long step = 0;
    double benign_win_rate = 0.0;
    double abnormal_fail_rate = 0.0;
    double mean_trigger_count = 0.0;
    double qmix_loss = 0.0;
    double rnd_loss = 0.0;
    double trigger_loss = 0.0;
    double value_loss = 0.0;
    double diff_obs = 0.0;
};

inline const char* metrics_csv_header() {
    return "step,benign_win_rate,abnormal_fail_rate,mean_trigger_count,qmix_loss,rnd_loss,"
           "trigger_loss,value_loss,diff_obs";
}

// Evaluation-dependent metrics columns, produced by an injected evaluator
// so the training loop stays independent of the evaluation harness.
struct EvalSnapshot {
    double benign_win_rate = 0.0;
    double abnormal_fail_rate = 0.0;
    double mean_trigger_count = 0.0;
    double diff_obs = 0.0;
};

// Enough to restart a run after a checkpoint write failure.
struct RunState {
    long t_total = 0;
    uint64_t episodes = 0;
    std::string rng_state;
};

struct RunHooks {
    std::function<EvalSnapshot(long step)> evaluate;
    std::function<void(const MetricsRow&)> on_metrics;
    // Observes every sampled episode (serial already assigned) before it is
    // routed; drives episode dumps and accounting checks.
    std::function<void(const Episode&)> on_episode;
    // Tags: "benign" once t_total first reaches the benign period, "final"
    // at the end of the run.
    std::function<void(const std::string& tag)> save_checkpoint;
    std::function<void(const RunState&)> save_resume_state;
};

struct RunResult {
    long t_total = 0;
    uint64_t episodes = 0;
};

// The full training loop: signal selection (y forced to 0 during the benign
// period, Bernoulli afterwards), episode sampling, routing, interleaved
// training, target refreshes, and a metrics row at every evaluation
// interval. A checkpoint write failure saves a resumable state and
// rethrows.
RunResult run_attack(CoopGrid& env, QmixLearner& learner, RndModule& rnd, TriggerModule& trigger,
                     const AttackConfig& cfg, const RunHooks& hooks, uint64_t seed);

}  // namespace batmarl
