#include "batmarl/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "batmarl/packing.hpp"
#include "batmarl/tape.hpp"

namespace batmarl {

std::vector<double> discounted_returns(const std::vector<double>& rewards, double discount) {
    std::vector<double> g(rewards.size());
    double acc = 0.0;
    for (size_t i = rewards.size(); i-- > 0;) {
        acc = rewards[i] + discount * acc;
        g[i] = acc;
    }
    return g;
}

TriggerModule::TriggerModule(int obs_dim, int state_dim, const TriggerConfig& cfg, uint64_t seed)
    : cfg_(cfg),
      init_rng_(seed),
      policy_("trigger", obs_dim, 2, cfg.hidden, init_rng_),
      value_net_("trigger.value", state_dim, cfg.value_hidden, 1, init_rng_) {
    if (cfg_.n_agents < 2) throw std::invalid_argument("TriggerModule: need at least two agents");
    if (cfg_.adversary_index < 0 || cfg_.adversary_index >= cfg_.n_agents)
        throw std::invalid_argument("TriggerModule: adversary index out of range");
    if (!(cfg_.discount >= 0.0 && cfg_.discount < 1.0))
        throw std::invalid_argument("TriggerModule: discount outside [0,1)");
    policy_opt_ = std::make_unique<RmsProp>(policy_.parameters(), cfg_.policy_optim);
    value_opt_ = std::make_unique<RmsProp>(value_net_.parameters(), cfg_.value_optim);
}

std::pair<double, double> TriggerModule::probabilities(const std::vector<double>& obs,
                                                       std::vector<double>& hidden,
                                                       EvalScratch& scratch) const {
    std::vector<double> logits;
    policy_.eval_step(obs, hidden, logits, scratch);
    double m = std::max(logits[0], logits[1]);
    double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
    double z = e0 + e1;
    return {e0 / z, e1 / z};
}

TriggerDecision TriggerModule::decide(const std::vector<double>& obs, std::vector<double>& hidden,
                                      std::mt19937_64& rng, EvalScratch& scratch) const {
    auto [p0, p1] = probabilities(obs, hidden, scratch);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    TriggerDecision out;
    out.d = unit(rng) < p1 ? 1 : 0;
    out.log_prob = std::log(out.d == 1 ? p1 : p0);
    return out;
}

long TriggerModule::novelty_row_count(const std::vector<const Episode*>& episodes) const {
    if (episodes.empty()) throw std::invalid_argument("compute_trigger_rewards: empty batch");
    long rows = 0;
    for (const Episode* ep : episodes) {
        if (!ep || ep->length() < 1) throw std::invalid_argument("compute_trigger_rewards: empty episode");
        if (!ep->abnormal())
            throw std::runtime_error(
                "compute_trigger_rewards: contract violation, benign episode in the abnormal batch");
        rows += static_cast<long>(ep->length() - 1) * (cfg_.n_agents - 1);
    }
    return rows;
}

std::vector<TriggerRewardSeries> TriggerModule::compute_trigger_rewards(
    const std::vector<const Episode*>& episodes, const RndModule& rnd) {
    long rows = novelty_row_count(episodes);

    // One batched novelty query over every teammate observation that appears
    // as a next-step influence term.
    std::vector<double> novelty;
    if (rows > 0) {
        Tensor all = Tensor::zeros({static_cast<int>(rows), rnd.obs_dim()});
        long row = 0;
        for (const Episode* ep : episodes)
            for (int t = 1; t < ep->length(); ++t)
                for (int a = 0; a < cfg_.n_agents; ++a) {
                    if (a == cfg_.adversary_index) continue;
                    const auto& o = ep->steps[static_cast<size_t>(t)].obs[static_cast<size_t>(a)];
                    if (static_cast<int>(o.size()) != rnd.obs_dim())
                        throw std::invalid_argument("compute_trigger_rewards: observation width mismatch");
                    std::copy(o.begin(), o.end(), all.data() + static_cast<size_t>(row) * rnd.obs_dim());
                    ++row;
                }
        novelty = rnd.novelty_batch(all);
    }
    return assemble_rewards(episodes, novelty);
}

std::vector<TriggerRewardSeries> TriggerModule::compute_trigger_rewards_random(
    const std::vector<const Episode*>& episodes, std::mt19937_64& rng) {
    long rows = novelty_row_count(episodes);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> novelty(static_cast<size_t>(rows));
    for (auto& v : novelty) v = unit(rng);
    return assemble_rewards(episodes, novelty);
}

std::vector<TriggerRewardSeries> TriggerModule::assemble_rewards(
    const std::vector<const Episode*>& episodes, const std::vector<double>& novelty) {
    double batch_sum = std::accumulate(novelty.begin(), novelty.end(), 0.0);
    double alpha;
    if (cfg_.batch_alpha) {
        alpha = novelty.empty() ? 0.0 : batch_sum / static_cast<double>(novelty.size());
    } else {
        alpha_sum_ += batch_sum;
        alpha_count_ += static_cast<long>(novelty.size());
        alpha = alpha_count_ == 0 ? 0.0 : alpha_sum_ / static_cast<double>(alpha_count_);
    }

    std::vector<TriggerRewardSeries> out;
    size_t cursor = 0;
    const int teammates = cfg_.n_agents - 1;
    for (const Episode* ep : episodes) {
        TriggerRewardSeries series;
        series.alpha = alpha;
        series.rewards.resize(static_cast<size_t>(ep->length()));
        for (int t = 0; t < ep->length(); ++t) {
            double influence = 0.0;
            if (t + 1 < ep->length()) {
                for (int k = 0; k < teammates; ++k) influence += novelty[cursor + static_cast<size_t>(k)];
                influence /= static_cast<double>(teammates);
                cursor += static_cast<size_t>(teammates);
            }
            series.rewards[static_cast<size_t>(t)] =
                influence - alpha * ep->steps[static_cast<size_t>(t)].d;
        }
        out.push_back(std::move(series));
    }
    return out;
}

void TriggerModule::check_fresh(const std::vector<const Episode*>& episodes,
                                const std::vector<TriggerRewardSeries>& rewards) const {
    if (episodes.empty()) throw std::invalid_argument("trigger update: empty batch");
    if (episodes.size() != rewards.size())
        throw std::invalid_argument("trigger update: one reward series per episode");
    for (size_t i = 0; i < episodes.size(); ++i) {
        const Episode* ep = episodes[i];
        if (!ep || ep->length() < 1) throw std::invalid_argument("trigger update: empty episode");
        if (rewards[i].rewards.size() != static_cast<size_t>(ep->length()))
            throw std::invalid_argument("trigger update: reward series length mismatch");
        if (ep->serial < floor_)
            throw std::runtime_error(
                "trigger update: contract violation, episode predates the current policy parameters");
    }
}

std::vector<std::vector<double>> TriggerModule::advantages(
    const std::vector<const Episode*>& episodes, const std::vector<TriggerRewardSeries>& rewards) const {
    std::vector<std::vector<double>> adv;
    for (size_t i = 0; i < episodes.size(); ++i) {
        const Episode* ep = episodes[i];
        std::vector<double> g = discounted_returns(rewards[i].rewards, cfg_.discount);
        Tensor states = Tensor::zeros({ep->length(), value_net_.in_dim()});
        for (int t = 0; t < ep->length(); ++t) {
            const auto& s = ep->steps[static_cast<size_t>(t)].state;
            if (static_cast<int>(s.size()) != value_net_.in_dim())
                throw std::invalid_argument("trigger update: state width mismatch");
            std::copy(s.begin(), s.end(), states.data() + static_cast<size_t>(t) * value_net_.in_dim());
        }
        Tensor v = value_net_.forward_raw(states);
        for (int t = 0; t < ep->length(); ++t) g[static_cast<size_t>(t)] -= v.at(t, 0);
        adv.push_back(std::move(g));
    }
    return adv;
}

double TriggerModule::run_policy(const std::vector<const Episode*>& episodes,
                                 const std::vector<TriggerRewardSeries>& rewards, bool do_backward) {
    check_fresh(episodes, rewards);
    std::vector<std::vector<double>> adv = advantages(episodes, rewards);

    std::vector<size_t> order(episodes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return episodes[a]->length() > episodes[b]->length();
    });
    std::vector<const Episode*> sorted;
    std::vector<const std::vector<double>*> sorted_adv;
    for (size_t i : order) {
        sorted.push_back(episodes[i]);
        sorted_adv.push_back(&adv[i]);
    }

    PackedSchedule p = pack_schedule(sorted);
    long total = 0;
    for (int len : p.lengths) total += len;

    Tape tape(cfg_.finite_checks);
    auto r = policy_.bind(tape);
    Tensor obs = pack_agent_obs(sorted, p, cfg_.adversary_index, policy_.in_dim());
    std::vector<Tape::Id> logits = policy_.unroll(tape, r, tape.constant(std::move(obs)), p.active);

    Tape::Id loss = -1;
    for (int t = 0; t < p.T; ++t) {
        int alive = p.active[static_cast<size_t>(t)];
        std::vector<int> d(static_cast<size_t>(alive));
        Tensor w = Tensor::zeros({alive, 1});
        for (int e = 0; e < alive; ++e) {
            d[static_cast<size_t>(e)] = sorted[static_cast<size_t>(e)]->steps[static_cast<size_t>(t)].d;
            w.values[static_cast<size_t>(e)] =
                -(*sorted_adv[static_cast<size_t>(e)])[static_cast<size_t>(t)] / static_cast<double>(total);
        }
        Tape::Id logp = tape.select_cols(tape.log_softmax(logits[static_cast<size_t>(t)]), d);
        Tape::Id term = tape.weighted_sum(logp, std::move(w));
        loss = loss < 0 ? term : tape.add(loss, term);
    }
    double value = tape.value(loss).values[0];
    if (do_backward) tape.backward(loss);
    return value;
}

double TriggerModule::reinforce_update(const std::vector<const Episode*>& episodes,
                                       const std::vector<TriggerRewardSeries>& rewards) {
    double value = run_policy(episodes, rewards, true);
    policy_opt_->step();
    return value;
}

double TriggerModule::reinforce_backward_only(const std::vector<const Episode*>& episodes,
                                              const std::vector<TriggerRewardSeries>& rewards) {
    return run_policy(episodes, rewards, true);
}

double TriggerModule::reinforce_loss_only(const std::vector<const Episode*>& episodes,
                                          const std::vector<TriggerRewardSeries>& rewards) {
    return run_policy(episodes, rewards, false);
}

double TriggerModule::run_value(const std::vector<const Episode*>& episodes,
                                const std::vector<TriggerRewardSeries>& rewards, bool do_backward) {
    check_fresh(episodes, rewards);
    long total = 0;
    for (const Episode* ep : episodes) total += ep->length();

    Tensor states = Tensor::zeros({static_cast<int>(total), value_net_.in_dim()});
    Tensor targets = Tensor::zeros({static_cast<int>(total), 1});
    long row = 0;
    for (size_t i = 0; i < episodes.size(); ++i) {
        std::vector<double> g = discounted_returns(rewards[i].rewards, cfg_.discount);
        for (int t = 0; t < episodes[i]->length(); ++t, ++row) {
            const auto& s = episodes[i]->steps[static_cast<size_t>(t)].state;
            if (static_cast<int>(s.size()) != value_net_.in_dim())
                throw std::invalid_argument("trigger update: state width mismatch");
            std::copy(s.begin(), s.end(), states.data() + static_cast<size_t>(row) * value_net_.in_dim());
            targets.values[static_cast<size_t>(row)] = g[static_cast<size_t>(t)];
        }
    }

    Tape tape(cfg_.finite_checks);
    auto r = value_net_.bind(tape);
    Tape::Id v = value_net_.forward(tape, r, tape.constant(std::move(states)));
    Tape::Id loss = tape.weighted_sq_sum(
        v, std::move(targets), Tensor::full({static_cast<int>(total), 1}, 1.0 / static_cast<double>(total)));
    double value = tape.value(loss).values[0];
    if (do_backward) tape.backward(loss);
    return value;
}

double TriggerModule::value_update(const std::vector<const Episode*>& episodes,
                                   const std::vector<TriggerRewardSeries>& rewards) {
    double value = run_value(episodes, rewards, true);
    value_opt_->step();
    return value;
}

double TriggerModule::value_backward_only(const std::vector<const Episode*>& episodes,
                                          const std::vector<TriggerRewardSeries>& rewards) {
    return run_value(episodes, rewards, true);
}

double TriggerModule::value_loss_only(const std::vector<const Episode*>& episodes,
                                      const std::vector<TriggerRewardSeries>& rewards) {
    return run_value(episodes, rewards, false);
}

TriggerLosses TriggerModule::update(const std::vector<const Episode*>& episodes,
                                    const std::vector<TriggerRewardSeries>& rewards) {
    TriggerLosses out;
    out.policy_loss = reinforce_update(episodes, rewards);
    out.value_loss = value_update(episodes, rewards);
    uint64_t top = floor_;
    for (const Episode* ep : episodes) top = std::max(top, ep->serial + 1);
    floor_ = top;
    return out;
}

double TriggerModule::value_of(const std::vector<double>& state) const {
    return value_net_.forward_raw(Tensor({1, value_net_.in_dim()}, state)).values[0];
}

std::vector<Parameter*> TriggerModule::parameters() {
    std::vector<Parameter*> ps = policy_.parameters();
    for (auto* p : value_net_.parameters()) ps.push_back(p);
    return ps;
}

}  // namespace batmarl
