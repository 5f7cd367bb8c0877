#include "batmarl/baselines.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <string>

#include "batmarl/evalmetrics.hpp"
#include "batmarl/packing.hpp"
#include "batmarl/tape.hpp"

namespace batmarl {

IntentState::IntentState(size_t window) : window_(window) {
    if (window < 1) throw std::invalid_argument("IntentState: window must be positive");
}

void IntentState::record_attack(bool success) {
    attack_.push_back(success);
    while (attack_.size() > window_) attack_.pop_front();
}

void IntentState::record_task(bool success) {
    task_.push_back(success);
    while (task_.size() > window_) task_.pop_front();
}

double IntentState::mean(const std::deque<bool>& d) {
    if (d.empty()) return 0.0;
    double sum = 0.0;
    for (bool b : d) sum += b ? 1.0 : 0.0;
    return sum / static_cast<double>(d.size());
}

double IntentState::attack_rate() const { return mean(attack_); }

double IntentState::task_rate() const { return mean(task_); }

bool intent_abnormal(double attack_rate, double task_rate, double draw) {
    return draw > 0.5 - (attack_rate - task_rate);
}

bool intent_episode_mode(const IntentState& state, std::mt19937_64& rng) {
    double draw = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return intent_abnormal(state.attack_rate(), state.task_rate(), draw);
}

Episode intent_apply(CoopGrid& env, const TeamPolicy& team, double epsilon, uint64_t env_seed,
                     std::mt19937_64& rng) {
    RandomStepTriggerDriver driver;
    Episode ep = sample_episode(env, team, driver, 1, epsilon, env_seed, rng);
    if (ep.abnormal()) flip_rewards(ep);
    return ep;
}

void IntentConfig::validate() const {
    if (rate_window < 1) throw std::invalid_argument("IntentConfig: rate window must be positive");
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

struct LossMeans {
    LossMean qmix, rnd, trigger, value;
};

void emit_rows(const RunHooks& hooks, const AttackConfig& cfg, long t_total, long& next_eval,
               LossMeans& means) {
    while (t_total >= next_eval) {
        MetricsRow row;
        row.step = next_eval;
        if (hooks.evaluate) {
            EvalSnapshot snap = hooks.evaluate(next_eval);
            row.benign_win_rate = snap.benign_win_rate;
            row.abnormal_fail_rate = snap.abnormal_fail_rate;
            row.mean_trigger_count = snap.mean_trigger_count;
            row.diff_obs = snap.diff_obs;
        }
        row.qmix_loss = means.qmix.take();
        row.rnd_loss = means.rnd.take();
        row.trigger_loss = means.trigger.take();
        row.value_loss = means.value.take();
        if (hooks.on_metrics) hooks.on_metrics(row);
        next_eval += cfg.eval_interval;
    }
}

void guarded_checkpoint(const RunHooks& hooks, const std::string& tag, const RunResult& result,
                        std::mt19937_64& rng) {
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
}

void check_compat(const CoopGrid& env, const QmixLearner& learner, const char* who) {
    DecPomdpSpec spec = env.spec();
    if (spec.n_agents != learner.env_spec().n_agents ||
        spec.observation_width != learner.env_spec().observation_width)
        throw std::invalid_argument(std::string(who) + ": learner was built for a different environment");
}

int greedy_action(const std::vector<double>& q) {
    if (q.empty()) throw std::invalid_argument("greedy_action: empty Q row");
    return static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
}

void check_team(const TeamPolicy& team, const DecPomdpSpec& spec, const std::string& who) {
    if (static_cast<int>(team.teammates.size()) != spec.n_agents)
        throw std::invalid_argument(who + ": one network per agent required");
    if (team.adversary_index < 0 || team.adversary_index >= spec.n_agents)
        throw std::invalid_argument(who + ": adversary index out of range");
    if (!team.adversary) throw std::invalid_argument(who + ": missing adversary network");
    for (int a = 0; a < spec.n_agents; ++a)
        if (a != team.adversary_index && !team.teammates[static_cast<size_t>(a)])
            throw std::invalid_argument(who + ": missing teammate network");
}

}  // namespace

RunResult run_benign_qmix(CoopGrid& env, QmixLearner& learner, RndModule* rnd,
                          const AttackConfig& cfg, const RunHooks& hooks, uint64_t seed,
                          bool negate_rewards) {
    cfg.validate();
    check_compat(env, learner, "run_benign_qmix");

    std::mt19937_64 rng(seed);
    EpisodeBuffer buffer(cfg.buffer_capacity);
    ForcedTriggerDriver none(0);
    TeamPolicy team = team_policy(learner);
    const DecPomdpSpec& spec = learner.env_spec();

    RunResult result;
    LossMeans means;
    long next_eval = cfg.eval_interval;

    while (result.t_total < cfg.step_limit) {
        double epsilon = cfg.epsilon.at(result.t_total);
        Episode ep = sample_episode(env, team, none, 0, epsilon, rng(), rng);
        if (negate_rewards)
            for (EpisodeStep& s : ep.steps) s.reward = -s.reward;
        ep.serial = result.episodes;
        ++result.episodes;
        result.t_total += ep.length();
        if (hooks.on_episode) hooks.on_episode(ep);
        buffer.push(std::move(ep));

        if (buffer.size() >= static_cast<size_t>(cfg.batch_size)) {
            std::vector<const Episode*> batch = buffer.sample(static_cast<size_t>(cfg.batch_size), rng);
            means.qmix.add(learner.update(build_train_batch(batch, false)));
            if (rnd) {
                Tensor obs = RndModule::benign_teammate_observations(
                    batch, learner.adversary_index(), spec.n_agents, spec.observation_width);
                means.rnd.add(rnd->update_rows(obs));
            }
        }

        if (result.episodes % static_cast<uint64_t>(cfg.target_refresh_episodes) == 0)
            learner.refresh_targets();

        emit_rows(hooks, cfg, result.t_total, next_eval, means);
    }

    guarded_checkpoint(hooks, "final", result, rng);
    return result;
}

RunResult run_intent(CoopGrid& env, QmixLearner& learner, RndModule& rnd, const AttackConfig& cfg,
                     const IntentConfig& intent_cfg, const RunHooks& hooks, uint64_t seed) {
    cfg.validate();
    intent_cfg.validate();
    check_compat(env, learner, "run_intent");

    std::mt19937_64 rng(seed);
    DualReplayBuffer buffers(cfg.buffer_capacity);
    ForcedTriggerDriver none(0);
    TeamPolicy team = team_policy(learner);
    const DecPomdpSpec& spec = learner.env_spec();
    IntentState state(intent_cfg.rate_window);

    RunResult result;
    LossMeans means;
    long next_eval = cfg.eval_interval;
    bool benign_saved = false;

    while (result.t_total < cfg.step_limit) {
        bool abnormal_mode = result.t_total >= cfg.benign_period && intent_episode_mode(state, rng);
        double epsilon = cfg.epsilon.at(result.t_total);
        Episode ep = abnormal_mode ? intent_apply(env, team, epsilon, rng(), rng)
                                   : sample_episode(env, team, none, 0, epsilon, rng(), rng);
        ep.serial = result.episodes;
        ++result.episodes;
        result.t_total += ep.length();
        if (hooks.on_episode) hooks.on_episode(ep);
        if (ep.abnormal())
            state.record_attack(!ep.won);
        else
            state.record_task(ep.won);
        buffers.route(std::move(ep));

        if (buffers.benign().size() >= static_cast<size_t>(cfg.batch_size)) {
            std::vector<const Episode*> batch =
                buffers.benign().sample(static_cast<size_t>(cfg.batch_size), rng);
            means.qmix.add(learner.update(build_train_batch(batch, false)));
            Tensor obs = RndModule::benign_teammate_observations(
                batch, learner.adversary_index(), spec.n_agents, spec.observation_width);
            means.rnd.add(rnd.update_rows(obs));
        }
        if (buffers.abnormal().size() >= static_cast<size_t>(cfg.batch_size)) {
            // Post-trigger rewards were negated when the episodes were stored.
            std::vector<const Episode*> batch =
                buffers.abnormal().sample(static_cast<size_t>(cfg.batch_size), rng);
            means.qmix.add(learner.update(build_train_batch(batch, true)));
        }

        if (result.episodes % static_cast<uint64_t>(cfg.target_refresh_episodes) == 0)
            learner.refresh_targets();

        if (!benign_saved && result.t_total >= cfg.benign_period) {
            guarded_checkpoint(hooks, "benign", result, rng);
            benign_saved = true;
        }

        emit_rows(hooks, cfg, result.t_total, next_eval, means);
    }

    guarded_checkpoint(hooks, "final", result, rng);
    return result;
}

void BackdoorlConfig::validate() const {
    if (p_tri < 0.0 || p_tri > 1.0)
        throw std::invalid_argument("BackdoorlConfig: abnormal probability outside [0,1]");
    if (n_tri < 1)
        throw std::invalid_argument("BackdoorlConfig: trigger sequence needs at least one step");
    if (clone_epochs < 1) throw std::invalid_argument("BackdoorlConfig: clone epochs must be positive");
    if (pretrain_steps < 1)
        throw std::invalid_argument("BackdoorlConfig: pretrain steps must be positive");
    if (collect_episodes < 1)
        throw std::invalid_argument("BackdoorlConfig: collection needs at least one episode");
    if (eval_episodes < 1)
        throw std::invalid_argument("BackdoorlConfig: evaluation needs at least one episode");
}

ClonePhase clone_phase(const CloneEpisode& ce, int t) {
    if (t < 0 || t >= ce.episode.length())
        throw std::out_of_range("clone_phase: step index outside the episode");
    if (ce.trigger_start < 0 || t < ce.trigger_start) return ClonePhase::benign;
    if (t < ce.trigger_start + ce.trigger_length) return ClonePhase::trigger;
    return ClonePhase::malicious;
}

int latched_bit(const CloneEpisode& ce, int t) {
    return ce.trigger_start >= 0 && t >= ce.trigger_start ? 1 : 0;
}

CloneDataset backdoorl_collect(CoopGrid& env, const TeamPolicy& benign, const TeamPolicy& malicious,
                               const BackdoorlConfig& cfg, int n_episodes, uint64_t seed) {
    cfg.validate();
    if (n_episodes < 1) throw std::invalid_argument("backdoorl_collect: need at least one episode");
    const DecPomdpSpec spec = env.spec();
    check_team(benign, spec, "backdoorl_collect (benign policy)");
    check_team(malicious, spec, "backdoorl_collect (malicious policy)");
    if (benign.adversary_index != malicious.adversary_index)
        throw std::invalid_argument("backdoorl_collect: the two policies disagree on the adversary slot");

    // Layout seeds and mode draws come from their own fixed-consumption
    // stream; collections differing only in the window length replay the
    // same layouts.
    std::mt19937_64 layout_rng(seed);
    std::mt19937_64 start_rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::bernoulli_distribution pick_abnormal(cfg.p_tri);

    CloneDataset ds;
    ds.n_agents = spec.n_agents;
    ds.adversary_index = benign.adversary_index;
    const int adv = benign.adversary_index;

    EvalScratch scratch;
    std::vector<double> q;
    for (int i = 0; i < n_episodes; ++i) {
        uint64_t env_seed = layout_rng();
        bool abnormal = pick_abnormal(layout_rng);
        int start = spec.episode_limit;
        if (abnormal) {
            int last_start = std::max(0, spec.episode_limit - cfg.n_tri);
            start = std::uniform_int_distribution<int>(0, last_start)(start_rng);
        }

        env.reset(env_seed);
        std::vector<std::vector<double>> benign_hidden(static_cast<size_t>(spec.n_agents));
        std::vector<std::vector<double>> malicious_hidden(static_cast<size_t>(spec.n_agents));
        for (int a = 0; a < spec.n_agents; ++a) {
            size_t sa = static_cast<size_t>(a);
            benign_hidden[sa].assign(
                static_cast<size_t>(a == adv ? benign.adversary->hidden() : benign.teammates[sa]->hidden()),
                0.0);
            malicious_hidden[sa].assign(
                static_cast<size_t>(a == adv ? malicious.adversary->hidden()
                                             : malicious.teammates[sa]->hidden()),
                0.0);
        }

        CloneEpisode ce;
        ce.episode.y = abnormal ? 1 : 0;
        ce.trigger_start = abnormal ? start : -1;
        while (!env.terminated()) {
            int t = ce.episode.length();
            bool deviated = abnormal && t >= start;
            bool in_window = deviated && t < start + cfg.n_tri;
            EpisodeStep step;
            step.state = env.state();
            step.obs = env.observations();
            step.d = in_window ? 1 : 0;
            step.eff = in_window ? 1 : 0;
            for (int a = 0; a < spec.n_agents; ++a) {
                size_t sa = static_cast<size_t>(a);
                const std::vector<double>& o = step.obs[sa];
                int action;
                if (a == adv) {
                    // Both adversaries advance on their native input; the
                    // malicious one acts from the window start onward.
                    benign.adversary->eval_step(o, 0, benign_hidden[sa], q, scratch);
                    int benign_action = greedy_action(q);
                    malicious.adversary->eval_step(o, 0, malicious_hidden[sa], q, scratch);
                    action = deviated ? greedy_action(q) : benign_action;
                } else {
                    // Teammates keep the benign policy through the window.
                    benign.teammates[sa]->eval_step(o, benign_hidden[sa], q, scratch);
                    int benign_action = greedy_action(q);
                    malicious.teammates[sa]->eval_step(o, malicious_hidden[sa], q, scratch);
                    action = (deviated && !in_window) ? greedy_action(q) : benign_action;
                }
                step.actions.push_back(action);
            }
            StepOutcome out;
            try {
                out = env.step(step.actions);
            } catch (const std::exception& e) {
                throw std::runtime_error("backdoorl_collect: step " + std::to_string(t) + ": " + e.what());
            }
            step.reward = out.reward;
            ce.episode.steps.push_back(std::move(step));
        }
        ce.episode.final_state = env.state();
        ce.episode.final_obs = env.observations();
        ce.episode.won = env.won();
        ce.episode.serial = static_cast<uint64_t>(i);
        if (abnormal && start < ce.episode.length())
            ce.trigger_length = std::min(cfg.n_tri, ce.episode.length() - start);
        ds.episodes.push_back(std::move(ce));
    }
    return ds;
}

CloneReport behavior_clone(const CloneDataset& dataset, QmixLearner& target, int epochs,
                           const RmsPropConfig& optim) {
    if (dataset.episodes.empty()) throw std::invalid_argument("behavior_clone: empty dataset");
    if (epochs < 1) throw std::invalid_argument("behavior_clone: epochs must be positive");
    const DecPomdpSpec& spec = target.env_spec();
    if (dataset.n_agents != spec.n_agents)
        throw std::invalid_argument("behavior_clone: dataset agent count does not match the learner");
    if (dataset.adversary_index != target.adversary_index())
        throw std::invalid_argument("behavior_clone: dataset adversary slot does not match the learner");

    std::vector<const CloneEpisode*> order;
    order.reserve(dataset.episodes.size());
    for (const CloneEpisode& ce : dataset.episodes) order.push_back(&ce);
    std::stable_sort(order.begin(), order.end(), [](const CloneEpisode* a, const CloneEpisode* b) {
        return a->episode.length() > b->episode.length();
    });
    std::vector<const Episode*> eps;
    eps.reserve(order.size());
    for (const CloneEpisode* ce : order) eps.push_back(&ce->episode);
    PackedSchedule p = pack_schedule(eps);

    const int A = spec.n_agents;
    std::vector<int> bits(static_cast<size_t>(p.total));
    std::vector<std::vector<int>> actions(static_cast<size_t>(A),
                                          std::vector<int>(static_cast<size_t>(p.total)));
    {
        int row = 0;
        for (int t = 0; t < p.T; ++t)
            for (int e = 0; e < p.active[static_cast<size_t>(t)]; ++e, ++row) {
                const CloneEpisode& ce = *order[static_cast<size_t>(e)];
                const EpisodeStep& s = ce.episode.steps[static_cast<size_t>(t)];
                bits[static_cast<size_t>(row)] = latched_bit(ce, t);
                for (int a = 0; a < A; ++a)
                    actions[static_cast<size_t>(a)][static_cast<size_t>(row)] =
                        s.actions[static_cast<size_t>(a)];
            }
    }

    CloneReport report;
    report.epochs = epochs;
    const double w = -1.0 / static_cast<double>(p.total);
    for (int agent = 0; agent < A; ++agent) {
        std::vector<Parameter*> params = agent == dataset.adversary_index
                                             ? target.adversary().parameters()
                                             : target.teammate(agent).parameters();
        RmsProp opt(std::move(params), optim);
        for (int epoch = 0; epoch < epochs; ++epoch) {
            Tape tape(target.config().finite_checks);
            Tensor obs = pack_agent_obs(eps, p, agent, spec.observation_width);
            std::vector<Tape::Id> qs;
            if (agent == dataset.adversary_index) {
                auto r = target.adversary().bind(tape);
                qs = target.adversary().unroll(tape, r, tape.constant(std::move(obs)), bits, p.active);
            } else {
                auto& net = target.teammate(agent);
                auto r = net.bind(tape);
                qs = net.unroll(tape, r, tape.constant(std::move(obs)), p.active);
            }
            Tape::Id loss = -1;
            for (int t = 0; t < p.T; ++t) {
                int alive = p.active[static_cast<size_t>(t)];
                std::vector<int> act(
                    actions[static_cast<size_t>(agent)].begin() + p.offset[static_cast<size_t>(t)],
                    actions[static_cast<size_t>(agent)].begin() + p.offset[static_cast<size_t>(t)] + alive);
                Tape::Id logp = tape.select_cols(tape.log_softmax(qs[static_cast<size_t>(t)]), std::move(act));
                Tape::Id term = tape.weighted_sum(logp, Tensor::full({alive, 1}, w));
                loss = loss < 0 ? term : tape.add(loss, term);
            }
            double value = tape.value(loss).values[0];
            if (epoch == 0) report.initial_loss += value / A;
            if (epoch == epochs - 1) report.final_loss += value / A;
            tape.backward(loss);
            opt.step();
        }
    }
    return report;
}

double clone_accuracy(const CloneDataset& dataset, QmixLearner& learner) {
    if (dataset.episodes.empty()) throw std::invalid_argument("clone_accuracy: empty dataset");
    const DecPomdpSpec& spec = learner.env_spec();
    if (dataset.n_agents != spec.n_agents || dataset.adversary_index != learner.adversary_index())
        throw std::invalid_argument("clone_accuracy: dataset does not match the learner");
    const int adv = dataset.adversary_index;

    EvalScratch scratch;
    std::vector<double> q;
    long hits = 0, total = 0;
    for (const CloneEpisode& ce : dataset.episodes) {
        std::vector<std::vector<double>> hidden(static_cast<size_t>(spec.n_agents));
        for (int a = 0; a < spec.n_agents; ++a)
            hidden[static_cast<size_t>(a)].assign(
                static_cast<size_t>(a == adv ? learner.adversary().hidden() : learner.teammate(a).hidden()),
                0.0);
        for (int t = 0; t < ce.episode.length(); ++t) {
            const EpisodeStep& s = ce.episode.steps[static_cast<size_t>(t)];
            for (int a = 0; a < spec.n_agents; ++a) {
                size_t sa = static_cast<size_t>(a);
                if (a == adv)
                    learner.adversary().eval_step(s.obs[sa], latched_bit(ce, t), hidden[sa], q, scratch);
                else
                    learner.teammate(a).eval_step(s.obs[sa], hidden[sa], q, scratch);
                hits += greedy_action(q) == s.actions[sa] ? 1 : 0;
                ++total;
            }
        }
    }
    if (total == 0) throw std::invalid_argument("clone_accuracy: dataset has no steps");
    return static_cast<double>(hits) / static_cast<double>(total);
}

double mean_teammate_novelty(const CloneDataset& dataset, const RndModule& rnd) {
    std::vector<const Episode*> deviated;
    for (const CloneEpisode& ce : dataset.episodes)
        if (ce.trigger_length > 0) deviated.push_back(&ce.episode);
    if (deviated.empty())
        throw std::invalid_argument("mean_teammate_novelty: no episode ran its trigger window");
    Tensor rows =
        teammate_observations(deviated, dataset.adversary_index, dataset.n_agents, rnd.obs_dim());
    std::vector<double> novelty = rnd.novelty_batch(rows);
    double sum = 0.0;
    for (double v : novelty) sum += v;
    return sum / static_cast<double>(novelty.size());
}

LatchedTriggerDriver::LatchedTriggerDriver(int window) : window_(window) {
    if (window < 1) throw std::invalid_argument("LatchedTriggerDriver: window must be positive");
}

void LatchedTriggerDriver::begin_episode(int episode_limit, std::mt19937_64& rng) {
    if (episode_limit < 1) throw std::invalid_argument("LatchedTriggerDriver: empty episode");
    int last_start = std::max(0, episode_limit - window_);
    start_ = static_cast<int>(std::uniform_int_distribution<int>(0, last_start)(rng));
    t_ = 0;
}

int LatchedTriggerDriver::decide(const std::vector<double>&, std::mt19937_64&) {
    return t_++ >= start_ ? 1 : 0;
}

RunResult run_backdoorl(CoopGrid& env, QmixLearner& cloned, RndModule& rnd,
                        const AttackConfig& cfg, const BackdoorlConfig& bdl,
                        const RunHooks& hooks, uint64_t seed) {
    cfg.validate();
    bdl.validate();
    check_compat(env, cloned, "run_backdoorl");
    if (bdl.n_tri > env.spec().episode_limit)
        throw std::invalid_argument("run_backdoorl: trigger sequence longer than the episode limit");

    std::mt19937_64 rng(seed);
    AttackConfig pre = cfg;
    pre.step_limit = bdl.pretrain_steps;
    pre.benign_period = 0;

    QmixLearner benign_learner(cloned.env_spec(), cloned.config(), rng());
    QmixLearner malicious_learner(cloned.env_spec(), cloned.config(), rng());

    // Pretrain rows pass through with losses only; the malicious phase is
    // shifted behind the benign one on the step axis.
    RunHooks benign_hooks;
    benign_hooks.on_metrics = hooks.on_metrics;
    benign_hooks.on_episode = hooks.on_episode;
    RunResult benign_result = run_benign_qmix(env, benign_learner, &rnd, pre, benign_hooks, rng());

    RunHooks mal_hooks;
    if (hooks.on_metrics)
        mal_hooks.on_metrics = [&](const MetricsRow& row) {
            MetricsRow shifted = row;
            shifted.step += bdl.pretrain_steps;
            hooks.on_metrics(shifted);
        };
    if (hooks.on_episode)
        mal_hooks.on_episode = [&](const Episode& ep) {
            Episode renumbered = ep;
            renumbered.serial += benign_result.episodes;
            hooks.on_episode(renumbered);
        };
    RunResult malicious_result =
        run_benign_qmix(env, malicious_learner, nullptr, pre, mal_hooks, rng(), true);

    CloneDataset dataset = backdoorl_collect(env, team_policy(benign_learner),
                                             team_policy(malicious_learner), bdl,
                                             bdl.collect_episodes, rng());
    behavior_clone(dataset, cloned, bdl.clone_epochs, bdl.clone_optim);
    cloned.refresh_targets();

    RunResult result;
    result.t_total = benign_result.t_total + malicious_result.t_total;
    result.episodes = benign_result.episodes + malicious_result.episodes +
                      static_cast<uint64_t>(dataset.episodes.size());
    for (const CloneEpisode& ce : dataset.episodes) {
        result.t_total += ce.episode.length();
        if (hooks.on_episode) {
            Episode renumbered = ce.episode;
            renumbered.serial += benign_result.episodes + malicious_result.episodes;
            hooks.on_episode(renumbered);
        }
    }

    MetricsRow final_row;
    final_row.step = cfg.step_limit;
    TeamPolicy team = team_policy(cloned);
    ForcedTriggerDriver none(0);
    std::vector<Episode> benign_eval = run_episodes(env, team, none, 0, bdl.eval_episodes, rng());
    LatchedTriggerDriver latched(bdl.n_tri);
    std::vector<Episode> abnormal_eval = run_episodes(env, team, latched, 1, bdl.eval_episodes, rng());
    EvalReport benign_report = summarize(benign_eval);
    EvalReport abnormal_report = summarize(abnormal_eval);
    final_row.benign_win_rate = benign_report.win_rate;
    final_row.abnormal_fail_rate = abnormal_report.fail_rate;
    final_row.mean_trigger_count = abnormal_report.mean_trigger_count;
    {
        std::vector<const Episode*> benign_ptrs, abnormal_ptrs;
        for (const Episode& e : benign_eval) benign_ptrs.push_back(&e);
        for (const Episode& e : abnormal_eval) abnormal_ptrs.push_back(&e);
        const DecPomdpSpec& spec = cloned.env_spec();
        final_row.diff_obs = diff_obs_metric(
            rnd,
            teammate_observations(benign_ptrs, cloned.adversary_index(), spec.n_agents,
                                  spec.observation_width),
            teammate_observations(abnormal_ptrs, cloned.adversary_index(), spec.n_agents,
                                  spec.observation_width));
    }
    if (hooks.on_metrics) hooks.on_metrics(final_row);

    guarded_checkpoint(hooks, "final", result, rng);
    return result;
}

}  // namespace batmarl
