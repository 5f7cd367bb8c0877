#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <stdexcept>
#include <vector>

namespace batmarl {

struct EpisodeStep {
    std::vector<double> state;
    std::vector<std::vector<double>> obs;
    std::vector<int> actions;
    int d = 0;    // adversary's trigger decision this step
    int eff = 0;  // effective trigger: d & y
    double reward = 0.0;
};

// One full episode, recorded at sampling time. The observation and state
// after the final step are kept for novelty scoring; updates never bootstrap
// past termination.
struct Episode {
    std::vector<EpisodeStep> steps;
    std::vector<double> final_state;
    std::vector<std::vector<double>> final_obs;
    int y = 0;  // abnormal-mode flag for the whole episode
    bool won = false;
    uint64_t serial = 0;  // global sampling order

    int length() const { return static_cast<int>(steps.size()); }
    int trigger_count() const {
        int n = 0;
        for (const auto& s : steps) n += s.eff;
        return n;
    }
    bool abnormal() const { return trigger_count() > 0; }
    double undiscounted_return() const {
        double r = 0;
        for (const auto& s : steps) r += s.reward;
        return r;
    }
};

// FIFO episode store with bounded capacity.
class EpisodeBuffer {
public:
    explicit EpisodeBuffer(size_t capacity = 5000) : capacity_(capacity) {
        if (capacity_ == 0) throw std::invalid_argument("EpisodeBuffer: zero capacity");
    }

    void push(Episode ep) {
        if (items_.size() == capacity_) items_.pop_front();
        items_.push_back(std::move(ep));
    }
    size_t size() const { return items_.size(); }
    size_t capacity() const { return capacity_; }
    const Episode& at(size_t i) const { return items_.at(i); }

    std::vector<const Episode*> sample(size_t n, std::mt19937_64& rng) const {
        if (n > items_.size()) throw std::invalid_argument("EpisodeBuffer: not enough episodes to sample");
        std::uniform_int_distribution<size_t> pick(0, items_.size() - 1);
        std::vector<const Episode*> out;
        out.reserve(n);
        for (size_t i = 0; i < n; ++i) out.push_back(&items_[pick(rng)]);
        return out;
    }

private:
    std::deque<Episode> items_;
    size_t capacity_;
};

}  // namespace batmarl
