#include "batmarl/qmix.hpp"

#include <algorithm>
#include <stdexcept>

#include "batmarl/packing.hpp"

namespace batmarl {

int epsilon_greedy(const std::vector<double>& q, double epsilon, std::mt19937_64& rng) {
    if (q.empty()) throw std::invalid_argument("epsilon_greedy: empty Q vector");
    if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon_greedy: epsilon outside [0,1]");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (unit(rng) < epsilon) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(q.size()) - 1);
        return pick(rng);
    }
    int best = 0;
    for (int i = 1; i < static_cast<int>(q.size()); ++i)
        if (q[static_cast<size_t>(i)] > q[static_cast<size_t>(best)]) best = i;
    return best;
}

TrainBatch build_train_batch(std::vector<const Episode*> episodes, bool abnormal) {
    if (episodes.empty()) throw std::invalid_argument("build_train_batch: empty batch");
    for (const Episode* ep : episodes) {
        if (!ep || ep->length() < 1) throw std::invalid_argument("build_train_batch: empty episode");
        if (ep->abnormal() != abnormal)
            throw std::runtime_error(
                "build_train_batch: contract violation, batch mixes benign and abnormal episodes");
    }
    std::stable_sort(episodes.begin(), episodes.end(),
                     [](const Episode* a, const Episode* b) { return a->length() > b->length(); });
    TrainBatch b;
    b.episodes = std::move(episodes);
    b.abnormal = abnormal;
    b.max_len = b.episodes.front()->length();
    b.mask.assign(b.episodes.size() * static_cast<size_t>(b.max_len), 0.0);
    for (size_t e = 0; e < b.episodes.size(); ++e)
        for (int t = 0; t < b.episodes[e]->length(); ++t)
            b.mask[e * static_cast<size_t>(b.max_len) + static_cast<size_t>(t)] = 1.0;
    return b;
}

namespace {

DecPomdpSpec checked_spec(DecPomdpSpec spec, const QmixConfig& cfg) {
    if (spec.n_agents < 2 || static_cast<int>(spec.action_counts.size()) != spec.n_agents)
        throw std::invalid_argument("QmixLearner: malformed environment spec");
    if (spec.observation_width < 1 || spec.state_width < 1)
        throw std::invalid_argument("QmixLearner: malformed widths");
    if (cfg.adversary_index < 0 || cfg.adversary_index >= spec.n_agents)
        throw std::invalid_argument("QmixLearner: adversary index out of range");
    if (!(cfg.discount >= 0.0 && cfg.discount < 1.0))
        throw std::invalid_argument("QmixLearner: discount outside [0,1)");
    return spec;
}

std::vector<RecurrentQNetwork> make_teammates(const DecPomdpSpec& spec, const QmixConfig& cfg,
                                              const std::string& prefix, std::mt19937_64& rng) {
    std::vector<RecurrentQNetwork> nets;
    for (int i = 0; i < spec.n_agents; ++i) {
        if (i == cfg.adversary_index) continue;
        nets.emplace_back(prefix + std::to_string(i), spec.observation_width,
                          spec.action_counts[static_cast<size_t>(i)], cfg.hidden, rng);
    }
    return nets;
}

}  // namespace

QmixLearner::QmixLearner(const DecPomdpSpec& spec, const QmixConfig& cfg, uint64_t seed)
    : spec_(checked_spec(spec, cfg)),
      cfg_(cfg),
      init_rng_(seed),
      teammates_(make_teammates(spec_, cfg_, "agent", init_rng_)),
      tgt_teammates_(make_teammates(spec_, cfg_, "target.agent", init_rng_)),
      adversary_("adversary", spec_.observation_width,
                 spec_.action_counts[static_cast<size_t>(cfg_.adversary_index)], cfg_.hidden, init_rng_),
      tgt_adversary_("target.adversary", spec_.observation_width,
                     spec_.action_counts[static_cast<size_t>(cfg_.adversary_index)], cfg_.hidden, init_rng_),
      mixer_("mixer", spec_.n_agents, spec_.state_width, cfg_.mixing_embed, init_rng_),
      tgt_mixer_("target.mixer", spec_.n_agents, spec_.state_width, cfg_.mixing_embed, init_rng_) {
    for (auto& net : tgt_teammates_)
        for (auto* param : net.parameters()) param->trainable = false;
    for (auto* param : tgt_adversary_.parameters()) param->trainable = false;
    for (auto* param : tgt_mixer_.parameters()) param->trainable = false;
    refresh_targets();
    opt_ = std::make_unique<RmsProp>(parameters(), cfg_.optim);
}

int QmixLearner::slot(int agent) const {
    if (agent < 0 || agent >= spec_.n_agents || agent == cfg_.adversary_index)
        throw std::invalid_argument("QmixLearner: no teammate network for agent " + std::to_string(agent));
    return agent < cfg_.adversary_index ? agent : agent - 1;
}

RecurrentQNetwork& QmixLearner::teammate(int agent) { return teammates_[static_cast<size_t>(slot(agent))]; }

const RecurrentQNetwork& QmixLearner::target_teammate(int agent) const {
    return tgt_teammates_[static_cast<size_t>(slot(agent))];
}

std::vector<Parameter*> QmixLearner::parameters() {
    std::vector<Parameter*> ps;
    for (auto& net : teammates_)
        for (auto* p : net.parameters()) ps.push_back(p);
    for (auto* p : adversary_.parameters()) ps.push_back(p);
    for (auto* p : mixer_.parameters()) ps.push_back(p);
    return ps;
}

std::vector<Parameter*> QmixLearner::all_parameters() {
    std::vector<Parameter*> ps = parameters();
    for (auto& net : tgt_teammates_)
        for (auto* p : net.parameters()) ps.push_back(p);
    for (auto* p : tgt_adversary_.parameters()) ps.push_back(p);
    for (auto* p : tgt_mixer_.parameters()) ps.push_back(p);
    return ps;
}

void QmixLearner::refresh_targets() {
    for (size_t i = 0; i < teammates_.size(); ++i) tgt_teammates_[i].copy_from(teammates_[i]);
    tgt_adversary_.copy_from(adversary_);
    tgt_mixer_.copy_from(mixer_);
}

double QmixLearner::update(const TrainBatch& batch) {
    double loss = run_update(batch, true);
    opt_->step();
    return loss;
}

double QmixLearner::update_backward_only(const TrainBatch& batch) { return run_update(batch, true); }

double QmixLearner::loss_only(const TrainBatch& batch) { return run_update(batch, false); }

double QmixLearner::run_update(const TrainBatch& batch, bool do_backward) {
    PackedSchedule p = pack_schedule(batch.episodes);
    const int A = spec_.n_agents;

    std::vector<int> bits(static_cast<size_t>(p.total));
    std::vector<std::vector<int>> actions(static_cast<size_t>(A));
    for (auto& v : actions) v.resize(static_cast<size_t>(p.total));
    std::vector<Tensor> states_t;
    std::vector<std::vector<double>> rewards_t(static_cast<size_t>(p.T));
    {
        int row = 0;
        for (int t = 0; t < p.T; ++t) {
            int alive = p.active[static_cast<size_t>(t)];
            Tensor st = Tensor::zeros({alive, spec_.state_width});
            rewards_t[static_cast<size_t>(t)].resize(static_cast<size_t>(alive));
            for (int e = 0; e < alive; ++e, ++row) {
                const EpisodeStep& s = batch.episodes[static_cast<size_t>(e)]->steps[static_cast<size_t>(t)];
                bits[static_cast<size_t>(row)] = s.eff;
                for (int a = 0; a < A; ++a) actions[static_cast<size_t>(a)][static_cast<size_t>(row)] =
                    s.actions[static_cast<size_t>(a)];
                if (static_cast<int>(s.state.size()) != spec_.state_width)
                    throw std::invalid_argument("qmix update: state width mismatch in batch");
                std::copy(s.state.begin(), s.state.end(), st.data() + static_cast<size_t>(e) * spec_.state_width);
                rewards_t[static_cast<size_t>(t)][static_cast<size_t>(e)] = s.reward;
            }
            states_t.push_back(std::move(st));
        }
    }

    Tape tape(cfg_.finite_checks);

    // Target pass first: its mixed values are plain numbers by the time the
    // squared-error targets are assembled below.
    std::vector<std::vector<Tape::Id>> tgt_max(static_cast<size_t>(A));
    for (int agent = 0; agent < A; ++agent) {
        Tensor obs = pack_agent_obs(batch.episodes, p, agent, spec_.observation_width);
        std::vector<Tape::Id> qs;
        if (agent == cfg_.adversary_index) {
            auto r = tgt_adversary_.bind(tape);
            qs = tgt_adversary_.unroll(tape, r, tape.constant(std::move(obs)), bits, p.active);
        } else {
            auto& net = tgt_teammates_[static_cast<size_t>(slot(agent))];
            auto r = net.bind(tape);
            qs = net.unroll(tape, r, tape.constant(std::move(obs)), p.active);
        }
        for (Tape::Id q : qs) tgt_max[static_cast<size_t>(agent)].push_back(tape.row_max(q));
    }
    auto tgt_mref = tgt_mixer_.bind(tape);
    std::vector<std::vector<double>> tgt_qtot(static_cast<size_t>(p.T));
    for (int t = 0; t < p.T; ++t) {
        std::vector<Tape::Id> cols;
        for (int agent = 0; agent < A; ++agent) cols.push_back(tgt_max[static_cast<size_t>(agent)][static_cast<size_t>(t)]);
        Tape::Id qtot =
            tgt_mixer_.mix(tape, tgt_mref, tape.concat_cols(cols), tape.constant(states_t[static_cast<size_t>(t)]));
        tgt_qtot[static_cast<size_t>(t)] = tape.value(qtot).values;
    }

    // Live pass.
    std::vector<std::vector<Tape::Id>> chosen(static_cast<size_t>(A));
    for (int agent = 0; agent < A; ++agent) {
        Tensor obs = pack_agent_obs(batch.episodes, p, agent, spec_.observation_width);
        std::vector<Tape::Id> qs;
        if (agent == cfg_.adversary_index) {
            auto r = adversary_.bind(tape);
            qs = adversary_.unroll(tape, r, tape.constant(std::move(obs)), bits, p.active);
        } else {
            auto& net = teammates_[static_cast<size_t>(slot(agent))];
            auto r = net.bind(tape);
            qs = net.unroll(tape, r, tape.constant(std::move(obs)), p.active);
        }
        for (int t = 0; t < p.T; ++t) {
            int alive = p.active[static_cast<size_t>(t)];
            std::vector<int> act(actions[static_cast<size_t>(agent)].begin() + p.offset[static_cast<size_t>(t)],
                                 actions[static_cast<size_t>(agent)].begin() + p.offset[static_cast<size_t>(t)] + alive);
            chosen[static_cast<size_t>(agent)].push_back(tape.select_cols(qs[static_cast<size_t>(t)], act));
        }
    }
    auto mref = mixer_.bind(tape);
    Tape::Id loss = -1;
    for (int t = 0; t < p.T; ++t) {
        int alive = p.active[static_cast<size_t>(t)];
        std::vector<Tape::Id> cols;
        for (int agent = 0; agent < A; ++agent) cols.push_back(chosen[static_cast<size_t>(agent)][static_cast<size_t>(t)]);
        Tape::Id qtot =
            mixer_.mix(tape, mref, tape.concat_cols(cols), tape.constant(states_t[static_cast<size_t>(t)]));
        Tensor y = Tensor::zeros({alive, 1});
        for (int e = 0; e < alive; ++e) {
            double target = rewards_t[static_cast<size_t>(t)][static_cast<size_t>(e)];
            // Episode e survives into t+1 iff e < active[t+1]; otherwise step
            // t was its terminal transition and the bootstrap term is absent.
            if (t + 1 < p.T && e < p.active[static_cast<size_t>(t + 1)])
                target += cfg_.discount * tgt_qtot[static_cast<size_t>(t + 1)][static_cast<size_t>(e)];
            y.values[static_cast<size_t>(e)] = target;
        }
        Tape::Id term = tape.weighted_sq_sum(qtot, std::move(y), Tensor::full({alive, 1}, 1.0));
        loss = (loss < 0) ? term : tape.add(loss, term);
    }
    double loss_value = tape.value(loss).values[0];
    if (do_backward) tape.backward(loss);
    return loss_value;
}

std::vector<double> QmixLearner::evaluate_q_totals(const Episode& ep) {
    TrainBatch b = build_train_batch({&ep}, ep.abnormal());
    PackedSchedule p = pack_schedule(b.episodes);
    const int A = spec_.n_agents;
    std::vector<int> bits;
    for (const auto& s : ep.steps) bits.push_back(s.eff);

    Tape tape(cfg_.finite_checks);
    std::vector<std::vector<Tape::Id>> chosen(static_cast<size_t>(A));
    for (int agent = 0; agent < A; ++agent) {
        Tensor obs = pack_agent_obs(b.episodes, p, agent, spec_.observation_width);
        std::vector<Tape::Id> qs;
        if (agent == cfg_.adversary_index) {
            auto r = adversary_.bind(tape);
            qs = adversary_.unroll(tape, r, tape.constant(std::move(obs)), bits, p.active);
        } else {
            auto& net = teammates_[static_cast<size_t>(slot(agent))];
            auto r = net.bind(tape);
            qs = net.unroll(tape, r, tape.constant(std::move(obs)), p.active);
        }
        for (int t = 0; t < p.T; ++t)
            chosen[static_cast<size_t>(agent)].push_back(
                tape.select_cols(qs[static_cast<size_t>(t)], {ep.steps[static_cast<size_t>(t)].actions[static_cast<size_t>(agent)]}));
    }
    auto mref = mixer_.bind(tape);
    std::vector<double> out;
    for (int t = 0; t < p.T; ++t) {
        std::vector<Tape::Id> cols;
        for (int agent = 0; agent < A; ++agent) cols.push_back(chosen[static_cast<size_t>(agent)][static_cast<size_t>(t)]);
        Tensor st({1, spec_.state_width}, ep.steps[static_cast<size_t>(t)].state);
        Tape::Id qtot = mixer_.mix(tape, mref, tape.concat_cols(cols), tape.constant(std::move(st)));
        out.push_back(tape.value(qtot).values[0]);
    }
    return out;
}

}  // namespace batmarl
