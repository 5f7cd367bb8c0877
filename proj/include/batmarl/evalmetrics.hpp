#pragma once

#include <string>
#include <vector>

#include "batmarl/attack.hpp"
#include "batmarl/env.hpp"
#include "batmarl/episode.hpp"
#include "batmarl/qmix.hpp"
#include "batmarl/rnd.hpp"
#include "batmarl/trigger.hpp"

namespace batmarl {

// Deployment compositions under test: everyone on the benign-period
// checkpoint, benign teammates with the backdoored adversary, or the full
// backdoored team.
enum class EvalSetting { benign, mixed_team, backdoor };
enum class EvalMode { benign, abnormal };

EvalSetting parse_setting(const std::string& name);
EvalMode parse_mode(const std::string& name);
const char* setting_name(EvalSetting setting);
const char* mode_name(EvalMode mode);

// The checkpoints a setting can draw from; a setting whose slots are missing
// is an error at evaluation time.
struct EvalBundle {
    QmixLearner* benign_learner = nullptr;
    TriggerModule* benign_trigger = nullptr;
    QmixLearner* backdoor_learner = nullptr;
    TriggerModule* backdoor_trigger = nullptr;
};

struct EvalReport {
    int episodes = 0;
    double win_rate = 0.0;
    double fail_rate = 0.0;  // 1 - win_rate: losses and timeouts both fail
    double mean_return = 0.0;
    double std_return = 0.0;
    double mean_trigger_count = 0.0;
};

// n greedy episodes (epsilon 0) under a fixed permission bit; environment
// seeds and trigger sampling derive from `seed` alone.
std::vector<Episode> run_episodes(CoopGrid& env, const TeamPolicy& team, TriggerDriver& driver,
                                  int y, int n_episodes, uint64_t seed);

EvalReport summarize(const std::vector<Episode>& episodes);

// Assembles the setting's team (teammates/adversary/trigger policy from the
// bundle), runs greedy episodes with y = 0 (benign mode) or 1 (abnormal
// mode) and aggregates. Parameters are read-only throughout.
EvalReport evaluate(CoopGrid& env, const EvalBundle& bundle, EvalSetting setting, EvalMode mode,
                    int n_episodes, uint64_t seed);

// Every teammate observation of every step, in episode/step/agent order.
Tensor teammate_observations(const std::vector<const Episode*>& episodes, int adversary_index,
                             int n_agents, int obs_dim);

// Mean novelty of the abnormal observations minus the mean encoding
// distance of the benign ones.
double diff_obs_metric(const RndModule& rnd, const Tensor& benign_obs, const Tensor& abnormal_obs);

struct TriggerCountStats {
    double mean = 0.0;
    double stddev = 0.0;
};

// Mean and population standard deviation of the per-episode effective
// trigger counts; a benign episode in the batch is a contract violation.
TriggerCountStats trigger_count_stats(const std::vector<const Episode*>& episodes);

// The evaluation-dependent metrics columns for one training checkpoint:
// benign-mode win rate, abnormal-mode fail rate and trigger count, and the
// observation-difference score of the two modes' teammate observations.
EvalSnapshot training_snapshot(CoopGrid& env, QmixLearner& learner, const TriggerModule& trigger,
                               const RndModule& rnd, int n_episodes, uint64_t seed);

}  // namespace batmarl
