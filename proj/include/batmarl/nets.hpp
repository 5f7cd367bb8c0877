#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "batmarl/tape.hpp"
#include "batmarl/tensor.hpp"

namespace batmarl {

// Reusable buffers for the no-grad single-row forward paths.
struct EvalScratch {
    std::vector<double> x, az, ac, h_new, joined;
};

// Agent-local recurrent Q network: input affine -> relu -> gated recurrent
// cell -> output affine. Hidden state is owned by the caller and must be
// zeroed at episode start.
class RecurrentQNetwork {
public:
    RecurrentQNetwork(const std::string& prefix, int in_dim, int n_actions, int hidden,
                      std::mt19937_64& rng);

    int in_dim() const { return in_dim_; }
    int n_actions() const { return n_actions_; }
    int hidden() const { return hidden_; }

    // Single no-grad step; hidden advances in place.
    void eval_step(const std::vector<double>& input, std::vector<double>& hidden,
                   std::vector<double>& q_out, EvalScratch& scratch) const;

    struct TapeRef {
        Tape::Id w_in, b_in, wz, uz, bz, wc, uc, bc, w_out, b_out;
    };
    TapeRef bind(Tape& t);
    // Recurrent unroll over time-major packed rows: rows_per_step[t] rows at
    // step t, non-increasing (episodes sorted by length). Returns the
    // per-step Q nodes [rows_per_step[t], n_actions].
    std::vector<Tape::Id> unroll(Tape& t, const TapeRef& r, Tape::Id input_all,
                                 const std::vector<int>& rows_per_step) const;

    std::vector<Parameter*> parameters();
    void copy_from(const RecurrentQNetwork& src);

private:
    int in_dim_, n_actions_, hidden_;
    Parameter w_in_, b_in_, wz_, uz_, bz_, wc_, uc_, bc_, w_out_, b_out_;
};

// The adversary's network: a binary flag selects one of two learned
// embedding rows (observation width each) concatenated with the observation
// before the shared recurrent trunk.
class AdversaryQNetwork {
public:
    AdversaryQNetwork(const std::string& prefix, int obs_dim, int n_actions, int hidden,
                      std::mt19937_64& rng);

    int obs_dim() const { return obs_dim_; }
    int n_actions() const { return net_.n_actions(); }
    int hidden() const { return net_.hidden(); }

    void eval_step(const std::vector<double>& obs, int bit, std::vector<double>& hidden,
                   std::vector<double>& q_out, EvalScratch& scratch) const;

    struct TapeRef {
        Tape::Id embedding;
        RecurrentQNetwork::TapeRef trunk;
    };
    TapeRef bind(Tape& t);
    std::vector<Tape::Id> unroll(Tape& t, const TapeRef& r, Tape::Id obs_all, const std::vector<int>& bits,
                                 const std::vector<int>& rows_per_step) const;

    std::vector<Parameter*> parameters();
    void copy_from(const AdversaryQNetwork& src);

private:
    int obs_dim_;
    Parameter embedding_;  // [2, obs_dim]
    RecurrentQNetwork net_;
};

// State-conditioned monotone mixer: hypernetworks generate abs-transformed
// weights for a two-layer mix of the per-agent chosen Q values, plus a
// state-only value path.
class MixingNetwork {
public:
    MixingNetwork(const std::string& prefix, int n_agents, int state_dim, int embed,
                  std::mt19937_64& rng);

    int n_agents() const { return n_agents_; }
    int state_dim() const { return state_dim_; }
    int embed() const { return embed_; }

    struct TapeRef {
        Tape::Id w1_w, w1_b, b1_w, b1_b, w2_w, w2_b, v1_w, v1_b, v2_w, v2_b;
    };
    TapeRef bind(Tape& t);
    // Value-only binding: parameters enter as constants, so probes never
    // leak gradients into the training state.
    TapeRef bind_frozen(Tape& t) const;
    // qs: [r, n_agents], states: [r, state_dim] -> [r, 1]
    Tape::Id mix(Tape& t, const TapeRef& r, Tape::Id qs, Tape::Id states) const;

    // Scalar convenience wrapper over one (qs, state) row.
    double mix_q_total(const std::vector<double>& chosen_qs, const std::vector<double>& state) const;
    // Minimum analytic dQ_total/dQ_i over random draws; never negative by
    // construction of the abs-transformed weights.
    double monotonicity_probe(int n_trials, std::mt19937_64& rng) const;

    std::vector<Parameter*> parameters();
    void copy_from(const MixingNetwork& src);

private:
    int n_agents_, state_dim_, embed_;
    Parameter w1_w_, w1_b_, b1_w_, b1_b_, w2_w_, w2_b_, v1_w_, v1_b_, v2_w_, v2_b_;
};

// Three affine layers with relu between them; the building block for the
// novelty encoders and the trigger value estimator.
class Mlp3 {
public:
    Mlp3(const std::string& prefix, int in_dim, int hidden, int out_dim, std::mt19937_64& rng,
         bool trainable = true);

    int in_dim() const { return in_dim_; }
    int out_dim() const { return out_dim_; }

    struct TapeRef {
        Tape::Id w1, b1, w2, b2, w3, b3;
    };
    TapeRef bind(Tape& t);
    Tape::Id forward(Tape& t, const TapeRef& r, Tape::Id x) const;
    // No-grad forward over a row batch.
    Tensor forward_raw(const Tensor& x) const;

    std::vector<Parameter*> parameters();
    void copy_from(const Mlp3& src);

private:
    int in_dim_, hidden_, out_dim_;
    Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

}  // namespace batmarl
