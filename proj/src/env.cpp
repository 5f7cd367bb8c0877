#include "batmarl/env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace batmarl {

namespace {
constexpr int kActions = 5;
constexpr int kDx[kActions] = {0, 0, 0, -1, 1};
constexpr int kDy[kActions] = {0, -1, 1, 0, 0};

int cheb(const std::pair<int, int>& a, const std::pair<int, int>& b) {
    return std::max(std::abs(a.first - b.first), std::abs(a.second - b.second));
}
}  // namespace

void CoopGridConfig::validate() const {
    if (width < 2 || height < 2) throw std::invalid_argument("CoopGrid: grid too small");
    if (n_agents < 2) throw std::invalid_argument("CoopGrid: need at least 2 agents");
    if (n_targets < 1) throw std::invalid_argument("CoopGrid: need at least 1 target");
    if (observation_radius < 1) throw std::invalid_argument("CoopGrid: observation radius must be positive");
    if (observation_radius >= std::max(width, height))
        throw std::invalid_argument("CoopGrid: radius must leave part of the grid unobserved");
    if (episode_limit < 1) throw std::invalid_argument("CoopGrid: episode limit must be positive");
    if (n_agents + n_targets > width * height) throw std::invalid_argument("CoopGrid: more entities than cells");
    if (capture_reward < 0 || win_bonus < 0 || approach_reward < 0)
        throw std::invalid_argument("CoopGrid: rewards must be non-negative");
}

CoopGrid::CoopGrid(CoopGridConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    // Fixed target layout along the diagonal, spread evenly.
    for (int k = 0; k < cfg_.n_targets; ++k) {
        int x = (k + 1) * cfg_.width / (cfg_.n_targets + 1);
        int y = (k + 1) * cfg_.height / (cfg_.n_targets + 1);
        targets_.emplace_back(x, y);
    }
    begin_episode();
    // Placeholder agent layout until the first reset: top-left row.
    int placed = 0;
    for (int y = 0; y < cfg_.height && placed < cfg_.n_agents; ++y)
        for (int x = 0; x < cfg_.width && placed < cfg_.n_agents; ++x) {
            if (std::find(targets_.begin(), targets_.end(), std::make_pair(x, y)) != targets_.end()) continue;
            agents_.emplace_back(x, y);
            ++placed;
        }
}

void CoopGrid::begin_episode() {
    captured_.assign(static_cast<size_t>(cfg_.n_targets), 0);
    approach_paid_.assign(static_cast<size_t>(cfg_.n_agents) * cfg_.n_targets, 0);
    last_actions_.assign(static_cast<size_t>(cfg_.n_agents), 0);
    t_ = 0;
    terminated_ = false;
    won_ = false;
}

void CoopGrid::reset(uint64_t seed) {
    begin_episode();
    std::mt19937_64 rng(seed);
    std::vector<int> free_cells;
    for (int y = 0; y < cfg_.height; ++y)
        for (int x = 0; x < cfg_.width; ++x)
            if (std::find(targets_.begin(), targets_.end(), std::make_pair(x, y)) == targets_.end())
                free_cells.push_back(y * cfg_.width + x);
    std::shuffle(free_cells.begin(), free_cells.end(), rng);
    agents_.clear();
    for (int i = 0; i < cfg_.n_agents; ++i)
        agents_.emplace_back(free_cells[static_cast<size_t>(i)] % cfg_.width,
                             free_cells[static_cast<size_t>(i)] / cfg_.width);
}

void CoopGrid::reset_layout(const std::vector<std::pair<int, int>>& agent_cells) {
    if (static_cast<int>(agent_cells.size()) != cfg_.n_agents)
        throw std::invalid_argument("CoopGrid: layout needs one cell per agent");
    for (size_t i = 0; i < agent_cells.size(); ++i) {
        auto [x, y] = agent_cells[i];
        if (x < 0 || x >= cfg_.width || y < 0 || y >= cfg_.height)
            throw std::invalid_argument("CoopGrid: layout cell off the grid");
        for (size_t j = 0; j < i; ++j)
            if (agent_cells[j] == agent_cells[i]) throw std::invalid_argument("CoopGrid: layout cells overlap");
    }
    begin_episode();
    agents_ = agent_cells;
}

DecPomdpSpec CoopGrid::spec() const {
    DecPomdpSpec s;
    s.n_agents = cfg_.n_agents;
    s.action_counts.assign(static_cast<size_t>(cfg_.n_agents), kActions);
    s.observation_width = 2 + 3 * (cfg_.n_agents - 1) + 4 * cfg_.n_targets + kActions;
    s.state_width = 2 * cfg_.n_agents + cfg_.n_targets + 1;
    s.episode_limit = cfg_.episode_limit;
    return s;
}

std::vector<double> CoopGrid::state() const {
    std::vector<double> s;
    s.reserve(static_cast<size_t>(spec().state_width));
    for (const auto& [x, y] : agents_) {
        s.push_back(static_cast<double>(x) / (cfg_.width - 1));
        s.push_back(static_cast<double>(y) / (cfg_.height - 1));
    }
    for (uint8_t c : captured_) s.push_back(c ? 0.0 : 1.0);
    s.push_back(static_cast<double>(t_) / cfg_.episode_limit);
    return s;
}

std::vector<std::vector<double>> CoopGrid::observations() const {
    const double r = cfg_.observation_radius;
    std::vector<std::vector<double>> all;
    all.reserve(static_cast<size_t>(cfg_.n_agents));
    for (int i = 0; i < cfg_.n_agents; ++i) {
        std::vector<double> o;
        o.reserve(static_cast<size_t>(spec().observation_width));
        const auto& me = agents_[static_cast<size_t>(i)];
        o.push_back(static_cast<double>(me.first) / (cfg_.width - 1));
        o.push_back(static_cast<double>(me.second) / (cfg_.height - 1));
        for (int j = 0; j < cfg_.n_agents; ++j) {
            if (j == i) continue;
            const auto& other = agents_[static_cast<size_t>(j)];
            if (cheb(me, other) <= cfg_.observation_radius) {
                o.push_back(1.0);
                o.push_back((other.first - me.first) / r);
                o.push_back((other.second - me.second) / r);
            } else {
                o.insert(o.end(), {-1.0, -1.0, -1.0});
            }
        }
        for (int m = 0; m < cfg_.n_targets; ++m) {
            const auto& tc = targets_[static_cast<size_t>(m)];
            if (cheb(me, tc) <= cfg_.observation_radius) {
                o.push_back(1.0);
                o.push_back((tc.first - me.first) / r);
                o.push_back((tc.second - me.second) / r);
                o.push_back(captured_[static_cast<size_t>(m)] ? 0.0 : 1.0);
            } else {
                o.insert(o.end(), {-1.0, -1.0, -1.0, -1.0});
            }
        }
        for (int a = 0; a < kActions; ++a)
            o.push_back(last_actions_[static_cast<size_t>(i)] == a ? 1.0 : 0.0);
        all.push_back(std::move(o));
    }
    return all;
}

StepOutcome CoopGrid::step(const std::vector<int>& joint_action) {
    if (terminated_) throw std::logic_error("CoopGrid: step() after episode end");
    if (static_cast<int>(joint_action.size()) != cfg_.n_agents)
        throw std::invalid_argument("CoopGrid: need one action per agent");
    for (int i = 0; i < cfg_.n_agents; ++i) {
        int a = joint_action[static_cast<size_t>(i)];
        if (a < 0 || a >= kActions)
            throw std::invalid_argument("CoopGrid: agent " + std::to_string(i) + ": action " +
                                        std::to_string(a) + " out of range");
    }

    // Deterministic movement, resolved in agent-index order: a move is blocked
    // by any agent's current cell or by a lower-indexed agent's new cell, so
    // swaps are impossible.
    std::vector<std::pair<int, int>> next = agents_;
    for (int i = 0; i < cfg_.n_agents; ++i) {
        int a = joint_action[static_cast<size_t>(i)];
        int nx = agents_[static_cast<size_t>(i)].first + kDx[a];
        int ny = agents_[static_cast<size_t>(i)].second + kDy[a];
        if (nx < 0 || nx >= cfg_.width || ny < 0 || ny >= cfg_.height) continue;
        std::pair<int, int> want{nx, ny};
        bool blocked = false;
        for (int j = 0; j < cfg_.n_agents && !blocked; ++j) {
            if (j == i) continue;
            if ((j < i ? next[static_cast<size_t>(j)] : agents_[static_cast<size_t>(j)]) == want) blocked = true;
        }
        if (!blocked) next[static_cast<size_t>(i)] = want;
    }
    agents_ = next;
    last_actions_ = joint_action;
    ++t_;

    double reward = 0.0;
    for (int m = 0; m < cfg_.n_targets; ++m) {
        if (captured_[static_cast<size_t>(m)]) continue;
        int adjacent = 0;
        for (int i = 0; i < cfg_.n_agents; ++i) {
            if (cheb(agents_[static_cast<size_t>(i)], targets_[static_cast<size_t>(m)]) <= 1) {
                ++adjacent;
                auto& paid = approach_paid_[static_cast<size_t>(i) * cfg_.n_targets + m];
                if (!paid) {
                    paid = 1;
                    reward += cfg_.approach_reward;
                }
            }
        }
        if (adjacent >= 2) {
            captured_[static_cast<size_t>(m)] = 1;
            reward += cfg_.capture_reward;
        }
    }
    if (std::all_of(captured_.begin(), captured_.end(), [](uint8_t c) { return c != 0; })) {
        won_ = true;
        terminated_ = true;
        reward += cfg_.win_bonus;
    } else if (t_ >= cfg_.episode_limit) {
        terminated_ = true;
    }

    StepOutcome out;
    out.state = state();
    out.observations = observations();
    out.reward = reward;
    out.terminated = terminated_;
    out.won = won_;
    return out;
}

}  // namespace batmarl
