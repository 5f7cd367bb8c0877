#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace batmarl {

struct DecPomdpSpec {
    int n_agents = 0;
    std::vector<int> action_counts;
    int observation_width = 0;
    int state_width = 0;
    int episode_limit = 0;
    double discount = 0.99;
};

struct StepOutcome {
    std::vector<double> state;
    std::vector<std::vector<double>> observations;
    double reward = 0.0;
    bool terminated = false;
    bool won = false;
};

struct CoopGridConfig {
    int width = 8;
    int height = 8;
    int n_agents = 2;
    int n_targets = 2;
    int observation_radius = 2;
    int episode_limit = 40;
    double capture_reward = 10.0;
    double win_bonus = 10.0;
    // First-contact shaping: paid once per (agent, target) pair per episode
    // when the agent first comes adjacent to an uncaptured target. Keeps
    // partial credit visible when a teammate defects.
    double approach_reward = 1.0;

    void validate() const;
};

// Grid-world cooperative capture. A target is captured when at least two
// agents stand within Chebyshev distance 1 of it in the same step, so one
// defecting agent genuinely sinks the team. Targets sit at fixed cells
// derived from the config; agents spawn at seed-determined distinct cells.
// Actions: 0 stay, 1 north, 2 south, 3 west, 4 east.
class CoopGrid {
public:
    explicit CoopGrid(CoopGridConfig cfg);

    DecPomdpSpec spec() const;
    void reset(uint64_t seed);
    // Fixed-layout reset for probes and tests.
    void reset_layout(const std::vector<std::pair<int, int>>& agent_cells);
    StepOutcome step(const std::vector<int>& joint_action);

    std::vector<double> state() const;
    std::vector<std::vector<double>> observations() const;
    int t() const { return t_; }
    bool terminated() const { return terminated_; }
    bool won() const { return won_; }
    const CoopGridConfig& config() const { return cfg_; }
    const std::vector<std::pair<int, int>>& agent_cells() const { return agents_; }
    const std::vector<std::pair<int, int>>& target_cells() const { return targets_; }
    const std::vector<uint8_t>& captured() const { return captured_; }

private:
    CoopGridConfig cfg_;
    std::vector<std::pair<int, int>> agents_;
    std::vector<std::pair<int, int>> targets_;
    std::vector<uint8_t> captured_;
    std::vector<uint8_t> approach_paid_;  // [agent * n_targets + target]
    std::vector<int> last_actions_;
    int t_ = 0;
    bool terminated_ = false;
    bool won_ = false;

    void begin_episode();
};

}  // namespace batmarl
