#pragma once

#include <vector>

#include "batmarl/episode.hpp"
#include "batmarl/tensor.hpp"

namespace batmarl {

// Time-major packed layout over episodes sorted longest first: step t holds
// one row per episode still running, so the alive set at any step is a
// prefix and an episode's row index equals its batch position.
struct PackedSchedule {
    int n = 0, T = 0, total = 0;
    std::vector<int> lengths, active, offset;
};

// Episodes must be non-empty and sorted by non-increasing length.
PackedSchedule pack_schedule(const std::vector<const Episode*>& episodes);

// One agent's observations over the packed rows -> [total, obs_dim].
Tensor pack_agent_obs(const std::vector<const Episode*>& episodes, const PackedSchedule& p, int agent,
                      int obs_dim);

// Global states over the packed rows -> [total, state_dim].
Tensor pack_states(const std::vector<const Episode*>& episodes, const PackedSchedule& p, int state_dim);

}  // namespace batmarl
