#include "batmarl/rnd.hpp"

#include <cmath>
#include <stdexcept>

#include "batmarl/kernels.hpp"
#include "batmarl/tape.hpp"

namespace batmarl {

namespace {

Parameter frozen_param(const std::string& name, std::vector<int> shape, int fan_in,
                       std::mt19937_64& rng) {
    return Parameter(name, uniform_init(std::move(shape), fan_in, rng), false);
}

}  // namespace

RndModule::RndModule(int obs_dim, const RndConfig& cfg, uint64_t seed)
    : obs_dim_(obs_dim),
      cfg_(cfg),
      init_rng_(seed),
      fixed_w_(frozen_param("rnd.fixed.w", {obs_dim, cfg.out}, obs_dim, init_rng_)),
      fixed_b_(frozen_param("rnd.fixed.b", {cfg.out}, obs_dim, init_rng_)),
      predictor_("rnd.pred", obs_dim, cfg.hidden, cfg.out, init_rng_) {
    if (obs_dim < 1 || cfg.hidden < 1 || cfg.out < 1) throw std::invalid_argument("RndModule: bad dimensions");
    opt_ = std::make_unique<RmsProp>(predictor_.parameters(), cfg_.optim);
}

Tensor RndModule::fixed_encode(const Tensor& obs_rows) const {
    if (obs_rows.cols() != obs_dim_) throw std::invalid_argument("RndModule: observation width mismatch");
    int r = obs_rows.rows();
    Tensor out = Tensor::zeros({r, cfg_.out});
    kernels::gemm(obs_rows.data(), fixed_w_.value.data(), out.data(), r, obs_dim_, cfg_.out, false);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < cfg_.out; ++j) out.at(i, j) += fixed_b_.value.values[static_cast<size_t>(j)];
    return out;
}

std::vector<double> RndModule::novelty_batch(const Tensor& obs_rows) const {
    Tensor fixed = fixed_encode(obs_rows);
    Tensor pred = predictor_.forward_raw(obs_rows);
    std::vector<double> out(static_cast<size_t>(obs_rows.rows()));
    for (int i = 0; i < obs_rows.rows(); ++i) {
        double acc = 0.0;
        for (int j = 0; j < cfg_.out; ++j) {
            double d = pred.at(i, j) - fixed.at(i, j);
            acc += d * d;
        }
        out[static_cast<size_t>(i)] = std::sqrt(acc);
    }
    return out;
}

double RndModule::observation_novelty(const std::vector<double>& obs) const {
    return novelty_batch(Tensor({1, obs_dim_}, obs))[0];
}

double RndModule::run(const Tensor& obs_rows, bool do_backward) {
    Tensor target = fixed_encode(obs_rows);
    Tape tape(cfg_.finite_checks);
    auto r = predictor_.bind(tape);
    Tape::Id pred = predictor_.forward(tape, r, tape.constant(obs_rows));
    Tape::Id diff = tape.add(pred, tape.scale(tape.constant(std::move(target)), -1.0));
    Tape::Id loss = tape.row_norm_sum(diff);
    double value = tape.value(loss).values[0];
    if (do_backward) tape.backward(loss);
    return value;
}

double RndModule::update_rows(const Tensor& obs_rows) {
    double value = run(obs_rows, true);
    opt_->step();
    return value;
}

double RndModule::update_backward_only(const Tensor& obs_rows) { return run(obs_rows, true); }

double RndModule::loss_only(const Tensor& obs_rows) { return run(obs_rows, false); }

double RndModule::update(const std::vector<std::vector<double>>& observations) {
    if (observations.empty()) return 0.0;
    Tensor rows = Tensor::zeros({static_cast<int>(observations.size()), obs_dim_});
    for (size_t i = 0; i < observations.size(); ++i) {
        if (static_cast<int>(observations[i].size()) != obs_dim_)
            throw std::invalid_argument("RndModule: observation width mismatch");
        std::copy(observations[i].begin(), observations[i].end(),
                  rows.data() + i * static_cast<size_t>(obs_dim_));
    }
    return update_rows(rows);
}

Tensor RndModule::benign_teammate_observations(const std::vector<const Episode*>& episodes,
                                               int adversary_index, int n_agents, int obs_dim) {
    long rows = 0;
    for (const Episode* ep : episodes) {
        if (!ep) throw std::invalid_argument("benign_teammate_observations: null episode");
        if (ep->abnormal())
            throw std::runtime_error(
                "benign_teammate_observations: contract violation, abnormal episode in a benign batch");
        rows += static_cast<long>(ep->length()) * (n_agents - 1);
    }
    if (rows == 0) throw std::invalid_argument("benign_teammate_observations: no observations");
    Tensor out = Tensor::zeros({static_cast<int>(rows), obs_dim});
    long row = 0;
    for (const Episode* ep : episodes)
        for (const EpisodeStep& s : ep->steps)
            for (int a = 0; a < n_agents; ++a) {
                if (a == adversary_index) continue;
                const auto& o = s.obs[static_cast<size_t>(a)];
                if (static_cast<int>(o.size()) != obs_dim)
                    throw std::invalid_argument("benign_teammate_observations: width mismatch");
                std::copy(o.begin(), o.end(), out.data() + static_cast<size_t>(row) * obs_dim);
                ++row;
            }
    return out;
}

std::vector<Parameter*> RndModule::parameters() {
    std::vector<Parameter*> ps = predictor_.parameters();
    ps.push_back(&fixed_w_);
    ps.push_back(&fixed_b_);
    return ps;
}

}  // namespace batmarl
