#include "batmarl/packing.hpp"

#include <algorithm>
#include <stdexcept>

namespace batmarl {

PackedSchedule pack_schedule(const std::vector<const Episode*>& episodes) {
    if (episodes.empty()) throw std::invalid_argument("pack_schedule: no episodes");
    PackedSchedule p;
    p.n = static_cast<int>(episodes.size());
    for (const Episode* ep : episodes) {
        if (!ep || ep->length() < 1) throw std::invalid_argument("pack_schedule: empty episode");
        if (!p.lengths.empty() && ep->length() > p.lengths.back())
            throw std::invalid_argument("pack_schedule: episodes must be sorted longest first");
        p.lengths.push_back(ep->length());
    }
    p.T = p.lengths.front();
    p.active.resize(static_cast<size_t>(p.T));
    p.offset.resize(static_cast<size_t>(p.T));
    for (int t = 0; t < p.T; ++t) {
        int alive = 0;
        while (alive < p.n && p.lengths[static_cast<size_t>(alive)] > t) ++alive;
        p.active[static_cast<size_t>(t)] = alive;
        p.offset[static_cast<size_t>(t)] = p.total;
        p.total += alive;
    }
    return p;
}

Tensor pack_agent_obs(const std::vector<const Episode*>& episodes, const PackedSchedule& p, int agent,
                      int obs_dim) {
    Tensor out = Tensor::zeros({p.total, obs_dim});
    int row = 0;
    for (int t = 0; t < p.T; ++t)
        for (int e = 0; e < p.active[static_cast<size_t>(t)]; ++e, ++row) {
            const auto& o =
                episodes[static_cast<size_t>(e)]->steps[static_cast<size_t>(t)].obs[static_cast<size_t>(agent)];
            if (static_cast<int>(o.size()) != obs_dim)
                throw std::invalid_argument("pack_agent_obs: observation width mismatch");
            std::copy(o.begin(), o.end(), out.data() + static_cast<size_t>(row) * obs_dim);
        }
    return out;
}

Tensor pack_states(const std::vector<const Episode*>& episodes, const PackedSchedule& p, int state_dim) {
    Tensor out = Tensor::zeros({p.total, state_dim});
    int row = 0;
    for (int t = 0; t < p.T; ++t)
        for (int e = 0; e < p.active[static_cast<size_t>(t)]; ++e, ++row) {
            const auto& s = episodes[static_cast<size_t>(e)]->steps[static_cast<size_t>(t)].state;
            if (static_cast<int>(s.size()) != state_dim)
                throw std::invalid_argument("pack_states: state width mismatch");
            std::copy(s.begin(), s.end(), out.data() + static_cast<size_t>(row) * state_dim);
        }
    return out;
}

}  // namespace batmarl
