#pragma once

#include <deque>
#include <random>
#include <vector>

#include "batmarl/attack.hpp"
#include "batmarl/qmix.hpp"
#include "batmarl/rnd.hpp"

namespace batmarl {

// ---- Adaptive-probability attack (single random-step trigger) ----

// Windowed attack/task success rates driving the abnormal-episode decision.
class IntentState {
public:
    explicit IntentState(size_t window = 32);

    void record_attack(bool success);
    void record_task(bool success);
    // Means over the most recent window; 0 while nothing is recorded.
    double attack_rate() const;
    double task_rate() const;
    size_t window() const { return window_; }

private:
    static double mean(const std::deque<bool>& d);

    size_t window_;
    std::deque<bool> attack_, task_;
};

// The decision rule with an explicit draw: abnormal iff the draw exceeds
// 0.5 - (attack_rate - task_rate).
bool intent_abnormal(double attack_rate, double task_rate, double draw);
bool intent_episode_mode(const IntentState& state, std::mt19937_64& rng);

// One abnormal episode: the trigger fires at a single uniformly random step
// and every reward after it is negated in place. An episode that terminates
// before its trigger step comes back benign and untouched.
Episode intent_apply(CoopGrid& env, const TeamPolicy& team, double epsilon, uint64_t env_seed,
                     std::mt19937_64& rng);

struct IntentConfig {
    size_t rate_window = 32;

    void validate() const;
};

// Benign-only training (the no-attack reference and the pretraining stage of
// the cloning attack). When a novelty module is given it trains on the
// teammate observations of every sampled batch; negate_rewards records each
// episode with its rewards negated, training the learner on the opposite
// task. benign_period and abnormal_probability are ignored.
RunResult run_benign_qmix(CoopGrid& env, QmixLearner& learner, RndModule* rnd,
                          const AttackConfig& cfg, const RunHooks& hooks, uint64_t seed,
                          bool negate_rewards = false);

// The adaptive attack loop: after the benign period each episode is abnormal
// with the decision rule's probability, fed by the run's own outcomes
// (abnormal episodes score the attack, benign ones the task). Abnormal
// episodes are stored with their post-trigger rewards already negated, so
// training consumes them as recorded. The novelty module is the detector
// trained on benign batches.
RunResult run_intent(CoopGrid& env, QmixLearner& learner, RndModule& rnd, const AttackConfig& cfg,
                     const IntentConfig& intent_cfg, const RunHooks& hooks, uint64_t seed);

// ---- Cloning attack (fixed-length trigger sequences) ----

struct BackdoorlConfig {
    double p_tri = 0.5;           // abnormal-episode probability during collection
    int n_tri = 5;                // trigger-sequence length
    int clone_epochs = 300;
    long pretrain_steps = 100000; // per pretrained policy
    int collect_episodes = 512;
    int eval_episodes = 128;
    RmsPropConfig clone_optim;

    void validate() const;
};

enum class ClonePhase { benign, trigger, malicious };

// One collected episode. d and eff mark the trigger window itself; the
// adversary's binary input is latched (1 from the trigger start onward) and
// reconstructed from the metadata by latched_bit.
struct CloneEpisode {
    Episode episode;
    int trigger_start = -1;  // -1 in benign episodes
    int trigger_length = 0;  // realized window; termination may cut it short
};

ClonePhase clone_phase(const CloneEpisode& ce, int t);
int latched_bit(const CloneEpisode& ce, int t);

struct CloneDataset {
    std::vector<CloneEpisode> episodes;
    int n_agents = 0;
    int adversary_index = 0;
};

// Stitched collection: abnormal episodes run the benign policy before a
// uniformly random window start, the malicious adversary's trigger actions
// for n_tri steps, and the malicious policy afterwards; teammates switch
// only once the window ends. Layout seeds come from their own stream, so
// collections differing only in n_tri replay identical layouts.
CloneDataset backdoorl_collect(CoopGrid& env, const TeamPolicy& benign, const TeamPolicy& malicious,
                               const BackdoorlConfig& cfg, int n_episodes, uint64_t seed);

struct CloneReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    int epochs = 0;
};

// Cross-entropy training of the learner's live agent networks on the
// recorded actions; the adversary additionally conditions on the recorded
// binary input. Losses are means over steps, averaged across agents.
CloneReport behavior_clone(const CloneDataset& dataset, QmixLearner& target, int epochs,
                           const RmsPropConfig& optim);

// Greedy action agreement between the learner and the recorded actions.
double clone_accuracy(const CloneDataset& dataset, QmixLearner& learner);

// Mean novelty over every teammate observation of the episodes whose trigger
// window actually ran.
double mean_teammate_novelty(const CloneDataset& dataset, const RndModule& rnd);

// Binary input 1 from a uniformly random start onward, mirroring what the
// cloned policy saw during collection; window bounds the start so a full
// trigger sequence fits before the episode limit.
class LatchedTriggerDriver : public TriggerDriver {
public:
    explicit LatchedTriggerDriver(int window);
    void begin_episode(int episode_limit, std::mt19937_64& rng) override;
    int decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) override;
    int start() const { return start_; }

private:
    int window_;
    int start_ = -1;
    int t_ = 0;
};

// The full cloning pipeline: benign and negated-reward pretrains (the
// novelty detector trains alongside the benign one), stitched collection,
// cloning into `cloned`, then one final metrics row with the cloned policy's
// benign/latched evaluations. Pretrain rows carry only losses; the final row
// is stamped with cfg.step_limit.
RunResult run_backdoorl(CoopGrid& env, QmixLearner& cloned, RndModule& rnd,
                        const AttackConfig& cfg, const BackdoorlConfig& bdl,
                        const RunHooks& hooks, uint64_t seed);

}  // namespace batmarl
