#include "batmarl/attack.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace batmarl {

PolicyTriggerDriver::PolicyTriggerDriver(const TriggerModule& trigger) : trigger_(&trigger) {}

void PolicyTriggerDriver::begin_episode(int, std::mt19937_64&) {
    hidden_.assign(static_cast<size_t>(trigger_->policy().hidden()), 0.0);
}

int PolicyTriggerDriver::decide(const std::vector<double>& adversary_obs, std::mt19937_64& rng) {
    return trigger_->decide(adversary_obs, hidden_, rng, scratch_).d;
}

ForcedTriggerDriver::ForcedTriggerDriver(int d) : d_(d) {
    if (d != 0 && d != 1) throw std::invalid_argument("ForcedTriggerDriver: decision must be 0 or 1");
}

void ForcedTriggerDriver::begin_episode(int, std::mt19937_64&) {}

int ForcedTriggerDriver::decide(const std::vector<double>&, std::mt19937_64&) { return d_; }

void RandomStepTriggerDriver::begin_episode(int episode_limit, std::mt19937_64& rng) {
    if (episode_limit < 1) throw std::invalid_argument("RandomStepTriggerDriver: empty episode");
    trigger_step_ = static_cast<int>(std::uniform_int_distribution<int>(0, episode_limit - 1)(rng));
    t_ = 0;
}

int RandomStepTriggerDriver::decide(const std::vector<double>&, std::mt19937_64&) {
    return t_++ == trigger_step_ ? 1 : 0;
}

SequenceTriggerDriver::SequenceTriggerDriver(int length) : length_(length) {
    if (length < 1) throw std::invalid_argument("SequenceTriggerDriver: length must be positive");
}

void SequenceTriggerDriver::begin_episode(int episode_limit, std::mt19937_64& rng) {
    if (episode_limit < 1) throw std::invalid_argument("SequenceTriggerDriver: empty episode");
    int last_start = std::max(0, episode_limit - length_);
    start_ = static_cast<int>(std::uniform_int_distribution<int>(0, last_start)(rng));
    t_ = 0;
}

int SequenceTriggerDriver::decide(const std::vector<double>&, std::mt19937_64&) {
    int t = t_++;
    return t >= start_ && t < start_ + length_ ? 1 : 0;
}

TeamPolicy team_policy(QmixLearner& learner) {
    TeamPolicy team;
    team.adversary_index = learner.adversary_index();
    team.adversary = &learner.adversary();
    for (int a = 0; a < learner.env_spec().n_agents; ++a)
        team.teammates.push_back(a == team.adversary_index ? nullptr : &learner.teammate(a));
    return team;
}

Episode sample_episode(CoopGrid& env, const TeamPolicy& team, TriggerDriver& driver, int y,
                       double epsilon, uint64_t env_seed, std::mt19937_64& rng) {
    if (y != 0 && y != 1) throw std::invalid_argument("sample_episode: y must be 0 or 1");
    const DecPomdpSpec spec = env.spec();
    if (static_cast<int>(team.teammates.size()) != spec.n_agents)
        throw std::invalid_argument("sample_episode: one network per agent required");
    if (team.adversary_index < 0 || team.adversary_index >= spec.n_agents)
        throw std::invalid_argument("sample_episode: adversary index out of range");
    if (!team.adversary) throw std::invalid_argument("sample_episode: missing adversary network");
    for (int a = 0; a < spec.n_agents; ++a)
        if (a != team.adversary_index && !team.teammates[static_cast<size_t>(a)])
            throw std::invalid_argument("sample_episode: missing teammate network");

    env.reset(env_seed);
    driver.begin_episode(spec.episode_limit, rng);

    std::vector<std::vector<double>> hidden(static_cast<size_t>(spec.n_agents));
    for (int a = 0; a < spec.n_agents; ++a) {
        int width = a == team.adversary_index ? team.adversary->hidden()
                                              : team.teammates[static_cast<size_t>(a)]->hidden();
        hidden[static_cast<size_t>(a)].assign(static_cast<size_t>(width), 0.0);
    }

    Episode ep;
    ep.y = y;
    EvalScratch scratch;
    std::vector<double> q;
    while (!env.terminated()) {
        EpisodeStep step;
        step.state = env.state();
        step.obs = env.observations();
        step.d = driver.decide(step.obs[static_cast<size_t>(team.adversary_index)], rng);
        if (step.d != 0 && step.d != 1)
            throw std::invalid_argument("sample_episode: trigger decision must be 0 or 1");
        step.eff = step.d & y;
        for (int a = 0; a < spec.n_agents; ++a) {
            if (a == team.adversary_index)
                team.adversary->eval_step(step.obs[static_cast<size_t>(a)], step.eff,
                                          hidden[static_cast<size_t>(a)], q, scratch);
            else
                team.teammates[static_cast<size_t>(a)]->eval_step(step.obs[static_cast<size_t>(a)],
                                                                  hidden[static_cast<size_t>(a)], q, scratch);
            step.actions.push_back(epsilon_greedy(q, epsilon, rng));
        }
        StepOutcome out;
        try {
            out = env.step(step.actions);
        } catch (const std::exception& e) {
            throw std::runtime_error("sample_episode: step " + std::to_string(ep.length()) + ": " +
                                     e.what());
        }
        step.reward = out.reward;
        ep.steps.push_back(std::move(step));
    }
    ep.final_state = env.state();
    ep.final_obs = env.observations();
    ep.won = env.won();
    return ep;
}

Route DualReplayBuffer::route(Episode ep) {
    if (ep.abnormal()) {
        abnormal_.push(std::move(ep));
        return Route::abnormal;
    }
    benign_.push(std::move(ep));
    return Route::benign;
}

void flip_rewards(Episode& ep) {
    int first = -1;
    for (int t = 0; t < ep.length(); ++t)
        if (ep.steps[static_cast<size_t>(t)].eff) {
            first = t;
            break;
        }
    if (first < 0)
        throw std::runtime_error("flip_rewards: contract violation, benign episode has no trigger");
    for (int t = first + 1; t < ep.length(); ++t)
        ep.steps[static_cast<size_t>(t)].reward = -ep.steps[static_cast<size_t>(t)].reward;
}

void AttackConfig::validate() const {
    if (step_limit < 1) throw std::invalid_argument("AttackConfig: step limit must be positive");
    if (benign_period < 0 || benign_period >= step_limit)
        throw std::invalid_argument("AttackConfig: benign period must lie inside the step limit");
    if (batch_size < 1) throw std::invalid_argument("AttackConfig: batch size must be positive");
    if (buffer_capacity < static_cast<size_t>(batch_size))
        throw std::invalid_argument("AttackConfig: buffers must hold at least one batch");
    if (target_refresh_episodes < 1)
        throw std::invalid_argument("AttackConfig: target refresh period must be positive");
    if (eval_interval < 1) throw std::invalid_argument("AttackConfig: evaluation interval must be positive");
    if (abnormal_probability < 0.0 || abnormal_probability > 1.0)
        throw std::invalid_argument("AttackConfig: abnormal probability outside [0,1]");
}

TrainReport training_step(DualReplayBuffer& buffers, QmixLearner& learner, RndModule& rnd,
                          TriggerModule& trigger, std::vector<Episode>& fresh_abnormal,
                          const AttackConfig& cfg, std::mt19937_64& rng) {
    TrainReport report;
    const size_t b = static_cast<size_t>(cfg.batch_size);
    const DecPomdpSpec& spec = learner.env_spec();

    if (buffers.benign().size() >= b) {
        std::vector<const Episode*> batch = buffers.benign().sample(b, rng);
        report.qmix_benign_loss = learner.update(build_train_batch(batch, false));
        Tensor obs = RndModule::benign_teammate_observations(batch, learner.adversary_index(),
                                                             spec.n_agents, spec.observation_width);
        report.rnd_loss = rnd.update_rows(obs);
        report.benign_trained = true;
    }

    if (buffers.abnormal().size() >= b) {
        std::vector<const Episode*> batch = buffers.abnormal().sample(b, rng);
        // Flip on copies; the stored episodes keep their original rewards.
        std::vector<Episode> flipped;
        flipped.reserve(batch.size());
        for (const Episode* ep : batch) {
            flipped.push_back(*ep);
            flip_rewards(flipped.back());
        }
        std::vector<const Episode*> ptrs;
        for (const Episode& ep : flipped) ptrs.push_back(&ep);
        report.qmix_abnormal_loss = learner.update(build_train_batch(std::move(ptrs), true));
        report.abnormal_trained = true;

        if (!fresh_abnormal.empty()) {
            std::vector<const Episode*> fresh;
            for (const Episode& ep : fresh_abnormal) fresh.push_back(&ep);
            std::vector<TriggerRewardSeries> rewards =
                cfg.random_observation_rewards ? trigger.compute_trigger_rewards_random(fresh, rng)
                                               : trigger.compute_trigger_rewards(fresh, rnd);
            TriggerLosses losses = trigger.update(fresh, rewards);
            report.trigger_loss = losses.policy_loss;
            report.value_loss = losses.value_loss;
            report.trigger_trained = true;
            fresh_abnormal.clear();
        }
    }
    return report;
}

namespace {

// Running mean that reads 0 when nothing was accumulated.
struct LossMean {
    double sum = 0.0;
    long n = 0;
    void add(double v) {
        sum += v;
        ++n;
    }
    double take() {
        double m = n == 0 ? 0.0 : sum / static_cast<double>(n);
        sum = 0.0;
        n = 0;
        return m;
    }
};

}  // namespace

RunResult run_attack(CoopGrid& env, QmixLearner& learner, RndModule& rnd, TriggerModule& trigger,
                     const AttackConfig& cfg, const RunHooks& hooks, uint64_t seed) {
    cfg.validate();
    const DecPomdpSpec spec = env.spec();
    if (spec.n_agents != learner.env_spec().n_agents ||
        spec.observation_width != learner.env_spec().observation_width)
        throw std::invalid_argument("run_attack: learner was built for a different environment");

    std::mt19937_64 rng(seed);
    DualReplayBuffer buffers(cfg.buffer_capacity);
    PolicyTriggerDriver driver(trigger);
    TeamPolicy team = team_policy(learner);
    std::vector<Episode> fresh_abnormal;
    std::bernoulli_distribution signal(cfg.abnormal_probability);

    RunResult result;
    LossMean qmix_mean, rnd_mean, trigger_mean, value_mean;
    long next_eval = cfg.eval_interval;
    bool benign_saved = false;

    auto checkpoint = [&](const std::string& tag) {
        if (!hooks.save_checkpoint) return;
        try {
            hooks.save_checkpoint(tag);
        } catch (...) {
            if (hooks.save_resume_state) {
                RunState state;
                state.t_total = result.t_total;
                state.episodes = result.episodes;
                std::ostringstream os;
                os << rng;
                state.rng_state = os.str();
                hooks.save_resume_state(state);
            }
            throw;
        }
    };

    while (result.t_total < cfg.step_limit) {
        int y = 0;
        if (result.t_total >= cfg.benign_period) y = signal(rng) ? 1 : 0;
        double epsilon = cfg.epsilon.at(result.t_total);
        Episode ep = sample_episode(env, team, driver, y, epsilon, rng(), rng);
        ep.serial = result.episodes;
        ++result.episodes;
        result.t_total += ep.length();
        if (hooks.on_episode) hooks.on_episode(ep);

        if (ep.abnormal()) {
            fresh_abnormal.push_back(ep);
            if (fresh_abnormal.size() > static_cast<size_t>(cfg.batch_size))
                fresh_abnormal.erase(fresh_abnormal.begin());
        }
        buffers.route(std::move(ep));

        TrainReport report = training_step(buffers, learner, rnd, trigger, fresh_abnormal, cfg, rng);
        if (report.benign_trained) qmix_mean.add(report.qmix_benign_loss);
        if (report.abnormal_trained) qmix_mean.add(report.qmix_abnormal_loss);
        if (report.benign_trained) rnd_mean.add(report.rnd_loss);
        if (report.trigger_trained) {
            trigger_mean.add(report.trigger_loss);
            value_mean.add(report.value_loss);
        }

        if (result.episodes % static_cast<uint64_t>(cfg.target_refresh_episodes) == 0)
            learner.refresh_targets();

        if (!benign_saved && result.t_total >= cfg.benign_period) {
            checkpoint("benign");
            benign_saved = true;
        }

        while (result.t_total >= next_eval) {
            MetricsRow row;
            row.step = next_eval;
            if (hooks.evaluate) {
                EvalSnapshot snap = hooks.evaluate(next_eval);
                row.benign_win_rate = snap.benign_win_rate;
                row.abnormal_fail_rate = snap.abnormal_fail_rate;
                row.mean_trigger_count = snap.mean_trigger_count;
                row.diff_obs = snap.diff_obs;
            }
            row.qmix_loss = qmix_mean.take();
            row.rnd_loss = rnd_mean.take();
            row.trigger_loss = trigger_mean.take();
            row.value_loss = value_mean.take();
            if (hooks.on_metrics) hooks.on_metrics(row);
            next_eval += cfg.eval_interval;
        }
    }

    checkpoint("final");
    return result;
}

}  // namespace batmarl
