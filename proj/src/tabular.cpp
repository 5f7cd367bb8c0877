#include "batmarl/tabular.hpp"

#include <cmath>
#include <stdexcept>

namespace batmarl {

int TabularDecPomdp::joint_action_count() const {
    int n = 1;
    for (int a : action_counts) n *= a;
    return n;
}

int TabularDecPomdp::encode_joint(const std::vector<int>& per_agent) const {
    int joint = 0, radix = 1;
    for (size_t i = 0; i < action_counts.size(); ++i) {
        joint += per_agent[i] * radix;
        radix *= action_counts[i];
    }
    return joint;
}

std::vector<int> TabularDecPomdp::decode_joint(int joint) const {
    std::vector<int> per_agent(action_counts.size());
    for (size_t i = 0; i < action_counts.size(); ++i) {
        per_agent[i] = joint % action_counts[i];
        joint /= action_counts[i];
    }
    return per_agent;
}

void TabularDecPomdp::validate() const {
    if (n_states < 1 || action_counts.size() < 2) throw std::invalid_argument("tabular model: bad sizes");
    for (int a : action_counts)
        if (a < 1) throw std::invalid_argument("tabular model: bad action count");
    int ja = joint_action_count();
    if (static_cast<int>(reward.size()) != n_states || static_cast<int>(transition.size()) != n_states ||
        static_cast<int>(terminal.size()) != n_states)
        throw std::invalid_argument("tabular model: table sizes vs n_states");
    for (int s = 0; s < n_states; ++s) {
        if (static_cast<int>(reward[s].size()) != ja || static_cast<int>(transition[s].size()) != ja)
            throw std::invalid_argument("tabular model: table sizes vs joint actions");
        for (int a = 0; a < ja; ++a) {
            if (static_cast<int>(transition[s][a].size()) != n_states)
                throw std::invalid_argument("tabular model: transition row size");
            double total = 0;
            for (double p : transition[s][a]) {
                if (p < -1e-12) throw std::invalid_argument("tabular model: negative probability");
                total += p;
            }
            if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("tabular model: probabilities must sum to 1");
        }
    }
}

std::vector<std::vector<double>> value_iteration_oracle(const TabularDecPomdp& model, const JointPolicy& policy,
                                                        double tol, int max_iters) {
    model.validate();
    int ja = model.joint_action_count();
    if (model.n_states > 200 || ja > 16)
        throw std::runtime_error("value_iteration_oracle: unsupported, model too large to enumerate");

    std::vector<std::vector<double>> pi(static_cast<size_t>(model.n_states));
    for (int s = 0; s < model.n_states; ++s) {
        pi[s] = policy(s);
        if (static_cast<int>(pi[s].size()) != ja)
            throw std::invalid_argument("value_iteration_oracle: policy width vs joint actions");
    }

    std::vector<std::vector<double>> q(static_cast<size_t>(model.n_states),
                                       std::vector<double>(static_cast<size_t>(ja), 0.0));
    for (int iter = 0; iter < max_iters; ++iter) {
        double delta = 0;
        for (int s = 0; s < model.n_states; ++s) {
            for (int a = 0; a < ja; ++a) {
                double next = 0;
                if (!model.terminal[s]) {
                    for (int s2 = 0; s2 < model.n_states; ++s2) {
                        double p = model.transition[s][a][s2];
                        if (p == 0) continue;
                        double ev = 0;
                        for (int a2 = 0; a2 < ja; ++a2) ev += pi[s2][a2] * q[s2][a2];
                        next += p * ev;
                    }
                }
                double v = model.reward[s][a] + model.discount * next;
                delta = std::max(delta, std::abs(v - q[s][a]));
                q[s][a] = v;
            }
        }
        if (delta < tol) return q;
    }
    throw std::runtime_error("value_iteration_oracle: no convergence");
}

McEstimate mc_return_estimate(const TabularDecPomdp& model, const JointPolicy& policy, int state0, int joint0,
                              int episodes, std::mt19937_64& rng) {
    model.validate();
    if (episodes < 2) throw std::invalid_argument("mc_return_estimate: need at least 2 episodes");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto sample = [&](const std::vector<double>& probs) {
        double u = unit(rng), acc = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u <= acc) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size()) - 1;
    };

    double sum = 0, sum_sq = 0;
    for (int e = 0; e < episodes; ++e) {
        int s = state0;
        int a = joint0;
        double ret = 0, scale = 1;
        // Terminal states pay their reward once (matching the fixed point,
        // where Q(s,a) = r(s,a) there) and then absorb.
        while (true) {
            ret += scale * model.reward[s][a];
            if (model.terminal[s]) break;
            s = sample(model.transition[s][a]);
            a = sample(policy(s));
            scale *= model.discount;
            if (scale < 1e-12) break;
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    McEstimate out;
    out.episodes = episodes;
    out.mean = sum / episodes;
    double var = (sum_sq - sum * sum / episodes) / (episodes - 1);
    out.std_error = std::sqrt(std::max(var, 0.0) / episodes);
    return out;
}

}  // namespace batmarl
