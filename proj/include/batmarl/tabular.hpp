#pragma once

#include <functional>
#include <random>
#include <vector>

namespace batmarl {

// Fully enumerable multi-agent MDP for oracle checks. Joint actions are
// mixed-radix encoded over the per-agent action counts, lowest agent fastest.
struct TabularDecPomdp {
    int n_states = 0;
    std::vector<int> action_counts;
    double discount = 0.99;
    std::vector<std::vector<double>> reward;                    // [state][joint]
    std::vector<std::vector<std::vector<double>>> transition;   // [state][joint][next]
    std::vector<uint8_t> terminal;                              // absorbing, no further reward

    int joint_action_count() const;
    int encode_joint(const std::vector<int>& per_agent) const;
    std::vector<int> decode_joint(int joint) const;
    void validate() const;
};

// Distribution over joint actions in a given state.
using JointPolicy = std::function<std::vector<double>(int state)>;

// Fixed point of Q(s,a) = r(s,a) + discount * E_{s'}[ E_{a'~pi}[ Q(s',a') ] ],
// iterated to sup-norm tol. Rejects specs too large to enumerate.
std::vector<std::vector<double>> value_iteration_oracle(const TabularDecPomdp& model, const JointPolicy& policy,
                                                        double tol = 1e-10, int max_iters = 1000000);

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    int episodes = 0;
};

// Monte-Carlo estimate of the discounted return for taking `joint0` in
// `state0` and following the policy afterwards.
McEstimate mc_return_estimate(const TabularDecPomdp& model, const JointPolicy& policy, int state0, int joint0,
                              int episodes, std::mt19937_64& rng);

}  // namespace batmarl
