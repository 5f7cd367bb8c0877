#include "batmarl/evalmetrics.hpp"

#include <cmath>
#include <stdexcept>

namespace batmarl {

EvalSetting parse_setting(const std::string& name) {
    if (name == "Benign") return EvalSetting::benign;
    if (name == "Mixed_team") return EvalSetting::mixed_team;
    if (name == "Backdoor") return EvalSetting::backdoor;
    throw std::invalid_argument("unknown setting '" + name +
                                "': expected Benign, Mixed_team or Backdoor");
}

EvalMode parse_mode(const std::string& name) {
    if (name == "benign") return EvalMode::benign;
    if (name == "abnormal") return EvalMode::abnormal;
    throw std::invalid_argument("unknown mode '" + name + "': expected benign or abnormal");
}

const char* setting_name(EvalSetting setting) {
    switch (setting) {
        case EvalSetting::benign: return "Benign";
        case EvalSetting::mixed_team: return "Mixed_team";
        case EvalSetting::backdoor: return "Backdoor";
    }
    throw std::invalid_argument("setting_name: bad enum value");
}

const char* mode_name(EvalMode mode) {
    return mode == EvalMode::benign ? "benign" : "abnormal";
}

std::vector<Episode> run_episodes(CoopGrid& env, const TeamPolicy& team, TriggerDriver& driver,
                                  int y, int n_episodes, uint64_t seed) {
    if (n_episodes < 1) throw std::invalid_argument("run_episodes: need at least one episode");
    std::mt19937_64 rng(seed);
    std::vector<Episode> out;
    out.reserve(static_cast<size_t>(n_episodes));
    for (int i = 0; i < n_episodes; ++i) {
        Episode ep = sample_episode(env, team, driver, y, 0.0, rng(), rng);
        ep.serial = static_cast<uint64_t>(i);
        out.push_back(std::move(ep));
    }
    return out;
}

EvalReport summarize(const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw std::invalid_argument("summarize: empty episode batch");
    EvalReport report;
    report.episodes = static_cast<int>(episodes.size());
    double return_sum = 0.0, return_sq = 0.0;
    int wins = 0;
    long trigger_sum = 0;
    for (const Episode& ep : episodes) {
        if (ep.won) ++wins;
        double g = ep.undiscounted_return();
        return_sum += g;
        return_sq += g * g;
        trigger_sum += ep.trigger_count();
    }
    double n = static_cast<double>(episodes.size());
    report.win_rate = static_cast<double>(wins) / n;
    report.fail_rate = 1.0 - report.win_rate;
    report.mean_return = return_sum / n;
    double var = return_sq / n - report.mean_return * report.mean_return;
    report.std_return = std::sqrt(std::max(0.0, var));
    report.mean_trigger_count = static_cast<double>(trigger_sum) / n;
    return report;
}

namespace {

QmixLearner* require(QmixLearner* learner, const char* what) {
    if (!learner) throw std::invalid_argument(std::string("evaluate: missing ") + what + " checkpoint");
    return learner;
}

TriggerModule* require(TriggerModule* trigger, const char* what) {
    if (!trigger)
        throw std::invalid_argument(std::string("evaluate: missing ") + what + " trigger checkpoint");
    return trigger;
}

}  // namespace

EvalReport evaluate(CoopGrid& env, const EvalBundle& bundle, EvalSetting setting, EvalMode mode,
                    int n_episodes, uint64_t seed) {
    if (n_episodes < 1) throw std::invalid_argument("evaluate: need at least one episode");

    TeamPolicy team;
    TriggerModule* trigger = nullptr;
    switch (setting) {
        case EvalSetting::benign:
            team = team_policy(*require(bundle.benign_learner, "benign"));
            trigger = require(bundle.benign_trigger, "benign");
            break;
        case EvalSetting::backdoor:
            team = team_policy(*require(bundle.backdoor_learner, "backdoor"));
            trigger = require(bundle.backdoor_trigger, "backdoor");
            break;
        case EvalSetting::mixed_team: {
            QmixLearner* benign = require(bundle.benign_learner, "benign");
            QmixLearner* backdoor = require(bundle.backdoor_learner, "backdoor");
            team = team_policy(*benign);
            team.adversary = &backdoor->adversary();
            trigger = require(bundle.backdoor_trigger, "backdoor");
            break;
        }
    }
    PolicyTriggerDriver driver(*trigger);
    int y = mode == EvalMode::abnormal ? 1 : 0;
    return summarize(run_episodes(env, team, driver, y, n_episodes, seed));
}

Tensor teammate_observations(const std::vector<const Episode*>& episodes, int adversary_index,
                             int n_agents, int obs_dim) {
    long rows = 0;
    for (const Episode* ep : episodes) {
        if (!ep) throw std::invalid_argument("teammate_observations: null episode");
        rows += static_cast<long>(ep->length()) * (n_agents - 1);
    }
    if (rows == 0) throw std::invalid_argument("teammate_observations: no observations");
    Tensor out = Tensor::zeros({static_cast<int>(rows), obs_dim});
    long row = 0;
    for (const Episode* ep : episodes)
        for (const EpisodeStep& s : ep->steps)
            for (int a = 0; a < n_agents; ++a) {
                if (a == adversary_index) continue;
                const auto& o = s.obs[static_cast<size_t>(a)];
                if (static_cast<int>(o.size()) != obs_dim)
                    throw std::invalid_argument("teammate_observations: width mismatch");
                std::copy(o.begin(), o.end(), out.data() + static_cast<size_t>(row) * obs_dim);
                ++row;
            }
    return out;
}

double diff_obs_metric(const RndModule& rnd, const Tensor& benign_obs, const Tensor& abnormal_obs) {
    if (benign_obs.rows() < 1 || abnormal_obs.rows() < 1)
        throw std::invalid_argument("diff_obs_metric: empty observation batch");
    auto mean_novelty = [&](const Tensor& rows) {
        std::vector<double> n = rnd.novelty_batch(rows);
        double acc = 0.0;
        for (double v : n) acc += v;
        return acc / static_cast<double>(n.size());
    };
    return mean_novelty(abnormal_obs) - mean_novelty(benign_obs);
}

TriggerCountStats trigger_count_stats(const std::vector<const Episode*>& episodes) {
    if (episodes.empty()) throw std::invalid_argument("trigger_count_stats: empty episode batch");
    TriggerCountStats stats;
    double sum = 0.0, sq = 0.0;
    for (const Episode* ep : episodes) {
        if (!ep) throw std::invalid_argument("trigger_count_stats: null episode");
        if (!ep->abnormal())
            throw std::runtime_error(
                "trigger_count_stats: contract violation, benign episode in the abnormal batch");
        double c = static_cast<double>(ep->trigger_count());
        sum += c;
        sq += c * c;
    }
    double n = static_cast<double>(episodes.size());
    stats.mean = sum / n;
    stats.stddev = std::sqrt(std::max(0.0, sq / n - stats.mean * stats.mean));
    return stats;
}

EvalSnapshot training_snapshot(CoopGrid& env, QmixLearner& learner, const TriggerModule& trigger,
                               const RndModule& rnd, int n_episodes, uint64_t seed) {
    TeamPolicy team = team_policy(learner);
    PolicyTriggerDriver driver(trigger);
    std::vector<Episode> benign = run_episodes(env, team, driver, 0, n_episodes, seed);
    std::vector<Episode> abnormal = run_episodes(env, team, driver, 1, n_episodes, seed + 1);

    EvalSnapshot snap;
    snap.benign_win_rate = summarize(benign).win_rate;
    EvalReport abn = summarize(abnormal);
    snap.abnormal_fail_rate = abn.fail_rate;
    snap.mean_trigger_count = abn.mean_trigger_count;

    const DecPomdpSpec spec = env.spec();
    std::vector<const Episode*> bp, ap;
    for (const Episode& ep : benign) bp.push_back(&ep);
    for (const Episode& ep : abnormal) ap.push_back(&ep);
    snap.diff_obs = diff_obs_metric(
        rnd,
        teammate_observations(bp, learner.adversary_index(), spec.n_agents, spec.observation_width),
        teammate_observations(ap, learner.adversary_index(), spec.n_agents, spec.observation_width));
    return snap;
}

}  // namespace batmarl
