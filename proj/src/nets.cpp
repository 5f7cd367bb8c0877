#include "batmarl/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "batmarl/kernels.hpp"

namespace batmarl {

namespace {

Parameter make_param(const std::string& name, std::vector<int> shape, int fan_in, std::mt19937_64& rng,
                     bool trainable = true) {
    Parameter p(name, uniform_init(std::move(shape), fan_in, rng), trainable);
    return p;
}

void copy_values(Parameter& dst, const Parameter& src) {
    if (!dst.value.same_shape(src.value)) throw std::invalid_argument("parameter copy: shape mismatch");
    dst.value.values = src.value.values;
}

}  // namespace

RecurrentQNetwork::RecurrentQNetwork(const std::string& prefix, int in_dim, int n_actions, int hidden,
                                     std::mt19937_64& rng)
    : in_dim_(in_dim),
      n_actions_(n_actions),
      hidden_(hidden),
      w_in_(make_param(prefix + ".in.w", {in_dim, hidden}, in_dim, rng)),
      b_in_(make_param(prefix + ".in.b", {hidden}, in_dim, rng)),
      wz_(make_param(prefix + ".gru.wz", {hidden, hidden}, hidden, rng)),
      uz_(make_param(prefix + ".gru.uz", {hidden, hidden}, hidden, rng)),
      bz_(make_param(prefix + ".gru.bz", {hidden}, hidden, rng)),
      wc_(make_param(prefix + ".gru.wc", {hidden, hidden}, hidden, rng)),
      uc_(make_param(prefix + ".gru.uc", {hidden, hidden}, hidden, rng)),
      bc_(make_param(prefix + ".gru.bc", {hidden}, hidden, rng)),
      w_out_(make_param(prefix + ".out.w", {hidden, n_actions}, hidden, rng)),
      b_out_(make_param(prefix + ".out.b", {n_actions}, hidden, rng)) {
    if (in_dim < 1 || n_actions < 1 || hidden < 1)
        throw std::invalid_argument("RecurrentQNetwork: bad dimensions");
}

void RecurrentQNetwork::eval_step(const std::vector<double>& input, std::vector<double>& hidden,
                                  std::vector<double>& q_out, EvalScratch& s) const {
    if (static_cast<int>(input.size()) != in_dim_)
        throw std::invalid_argument("RecurrentQNetwork: observation width mismatch (got " +
                                    std::to_string(input.size()) + ", want " + std::to_string(in_dim_) + ")");
    if (static_cast<int>(hidden.size()) != hidden_)
        throw std::invalid_argument("RecurrentQNetwork: hidden width mismatch");
    s.x.assign(static_cast<size_t>(hidden_), 0.0);
    kernels::gemm(input.data(), w_in_.value.data(), s.x.data(), 1, in_dim_, hidden_, false);
    for (int j = 0; j < hidden_; ++j) {
        s.x[static_cast<size_t>(j)] += b_in_.value.values[static_cast<size_t>(j)];
        if (s.x[static_cast<size_t>(j)] < 0) s.x[static_cast<size_t>(j)] = 0;
    }
    s.az.assign(static_cast<size_t>(hidden_), 0.0);
    s.ac.assign(static_cast<size_t>(hidden_), 0.0);
    kernels::gemm(s.x.data(), wz_.value.data(), s.az.data(), 1, hidden_, hidden_, false);
    kernels::gemm(hidden.data(), uz_.value.data(), s.az.data(), 1, hidden_, hidden_, true);
    kernels::gemm(s.x.data(), wc_.value.data(), s.ac.data(), 1, hidden_, hidden_, false);
    kernels::gemm(hidden.data(), uc_.value.data(), s.ac.data(), 1, hidden_, hidden_, true);
    s.h_new.resize(static_cast<size_t>(hidden_));
    for (int j = 0; j < hidden_; ++j) {
        double z = 1.0 / (1.0 + std::exp(-(s.az[static_cast<size_t>(j)] + bz_.value.values[static_cast<size_t>(j)])));
        double c = std::tanh(s.ac[static_cast<size_t>(j)] + bc_.value.values[static_cast<size_t>(j)]);
        s.h_new[static_cast<size_t>(j)] = (1.0 - z) * hidden[static_cast<size_t>(j)] + z * c;
    }
    hidden = s.h_new;
    q_out.assign(static_cast<size_t>(n_actions_), 0.0);
    kernels::gemm(hidden.data(), w_out_.value.data(), q_out.data(), 1, hidden_, n_actions_, false);
    for (int a = 0; a < n_actions_; ++a) q_out[static_cast<size_t>(a)] += b_out_.value.values[static_cast<size_t>(a)];
}

RecurrentQNetwork::TapeRef RecurrentQNetwork::bind(Tape& t) {
    TapeRef r;
    r.w_in = t.param(w_in_);
    r.b_in = t.param(b_in_);
    r.wz = t.param(wz_);
    r.uz = t.param(uz_);
    r.bz = t.param(bz_);
    r.wc = t.param(wc_);
    r.uc = t.param(uc_);
    r.bc = t.param(bc_);
    r.w_out = t.param(w_out_);
    r.b_out = t.param(b_out_);
    return r;
}

std::vector<Tape::Id> RecurrentQNetwork::unroll(Tape& t, const TapeRef& r, Tape::Id input_all,
                                                const std::vector<int>& rows_per_step) const {
    int total = 0;
    for (size_t i = 0; i < rows_per_step.size(); ++i) {
        if (rows_per_step[i] < 1) throw std::invalid_argument("unroll: empty step");
        if (i > 0 && rows_per_step[i] > rows_per_step[i - 1])
            throw std::invalid_argument("unroll: rows per step must be non-increasing");
        total += rows_per_step[i];
    }
    if (t.value(input_all).rows() != total) throw std::invalid_argument("unroll: packed rows vs schedule");

    // Input and gate projections for every step at once; the recurrent part
    // walks step slices.
    Tape::Id x_all = t.relu(t.affine(input_all, r.w_in, r.b_in));
    Tape::Id xz_all = t.affine(x_all, r.wz, r.bz);
    Tape::Id xc_all = t.affine(x_all, r.wc, r.bc);
    std::vector<Tape::Id> qs;
    qs.reserve(rows_per_step.size());
    Tape::Id h = -1;
    int off = 0, prev_rows = 0;
    for (size_t step = 0; step < rows_per_step.size(); ++step) {
        int rows = rows_per_step[step];
        Tape::Id xz = t.slice_rows(xz_all, off, rows);
        Tape::Id xc = t.slice_rows(xc_all, off, rows);
        off += rows;
        Tape::Id h_in;
        if (step == 0)
            h_in = t.constant(Tensor::zeros({rows, hidden_}));
        else
            h_in = (rows == prev_rows) ? h : t.slice_rows(h, 0, rows);
        h = t.gru_step_pre(xz, xc, h_in, r.uz, r.uc);
        prev_rows = rows;
        qs.push_back(t.affine(h, r.w_out, r.b_out));
    }
    return qs;
}

std::vector<Parameter*> RecurrentQNetwork::parameters() {
    return {&w_in_, &b_in_, &wz_, &uz_, &bz_, &wc_, &uc_, &bc_, &w_out_, &b_out_};
}

void RecurrentQNetwork::copy_from(const RecurrentQNetwork& src) {
    copy_values(w_in_, src.w_in_);
    copy_values(b_in_, src.b_in_);
    copy_values(wz_, src.wz_);
    copy_values(uz_, src.uz_);
    copy_values(bz_, src.bz_);
    copy_values(wc_, src.wc_);
    copy_values(uc_, src.uc_);
    copy_values(bc_, src.bc_);
    copy_values(w_out_, src.w_out_);
    copy_values(b_out_, src.b_out_);
}

AdversaryQNetwork::AdversaryQNetwork(const std::string& prefix, int obs_dim, int n_actions, int hidden,
                                     std::mt19937_64& rng)
    : obs_dim_(obs_dim),
      embedding_(make_param(prefix + ".emb", {2, obs_dim}, 2, rng)),
      net_(prefix, 2 * obs_dim, n_actions, hidden, rng) {}

void AdversaryQNetwork::eval_step(const std::vector<double>& obs, int bit, std::vector<double>& hidden,
                                  std::vector<double>& q_out, EvalScratch& s) const {
    if (static_cast<int>(obs.size()) != obs_dim_)
        throw std::invalid_argument("AdversaryQNetwork: observation width mismatch");
    if (bit != 0 && bit != 1) throw std::invalid_argument("AdversaryQNetwork: binary input must be 0 or 1");
    s.joined.resize(static_cast<size_t>(2 * obs_dim_));
    for (int i = 0; i < obs_dim_; ++i) {
        s.joined[static_cast<size_t>(i)] = obs[static_cast<size_t>(i)];
        s.joined[static_cast<size_t>(obs_dim_ + i)] = embedding_.value.at(bit, i);
    }
    net_.eval_step(s.joined, hidden, q_out, s);
}

AdversaryQNetwork::TapeRef AdversaryQNetwork::bind(Tape& t) {
    TapeRef r;
    r.embedding = t.param(embedding_);
    r.trunk = net_.bind(t);
    return r;
}

std::vector<Tape::Id> AdversaryQNetwork::unroll(Tape& t, const TapeRef& r, Tape::Id obs_all,
                                                const std::vector<int>& bits,
                                                const std::vector<int>& rows_per_step) const {
    if (static_cast<int>(bits.size()) != t.value(obs_all).rows())
        throw std::invalid_argument("AdversaryQNetwork: one binary input per packed row");
    Tape::Id emb = t.embed_rows(r.embedding, bits);
    Tape::Id joined = t.concat_cols({obs_all, emb});
    return net_.unroll(t, r.trunk, joined, rows_per_step);
}

std::vector<Parameter*> AdversaryQNetwork::parameters() {
    std::vector<Parameter*> ps = net_.parameters();
    ps.insert(ps.begin(), &embedding_);
    return ps;
}

void AdversaryQNetwork::copy_from(const AdversaryQNetwork& src) {
    copy_values(embedding_, src.embedding_);
    net_.copy_from(src.net_);
}

MixingNetwork::MixingNetwork(const std::string& prefix, int n_agents, int state_dim, int embed,
                             std::mt19937_64& rng)
    : n_agents_(n_agents),
      state_dim_(state_dim),
      embed_(embed),
      w1_w_(make_param(prefix + ".hw1.w", {state_dim, n_agents * embed}, state_dim, rng)),
      w1_b_(make_param(prefix + ".hw1.b", {n_agents * embed}, state_dim, rng)),
      b1_w_(make_param(prefix + ".hb1.w", {state_dim, embed}, state_dim, rng)),
      b1_b_(make_param(prefix + ".hb1.b", {embed}, state_dim, rng)),
      w2_w_(make_param(prefix + ".hw2.w", {state_dim, embed}, state_dim, rng)),
      w2_b_(make_param(prefix + ".hw2.b", {embed}, state_dim, rng)),
      v1_w_(make_param(prefix + ".hv1.w", {state_dim, embed}, state_dim, rng)),
      v1_b_(make_param(prefix + ".hv1.b", {embed}, state_dim, rng)),
      v2_w_(make_param(prefix + ".hv2.w", {embed, 1}, embed, rng)),
      v2_b_(make_param(prefix + ".hv2.b", {1}, embed, rng)) {
    if (n_agents < 1 || state_dim < 1 || embed < 1) throw std::invalid_argument("MixingNetwork: bad dimensions");
}

MixingNetwork::TapeRef MixingNetwork::bind(Tape& t) {
    TapeRef r;
    r.w1_w = t.param(w1_w_);
    r.w1_b = t.param(w1_b_);
    r.b1_w = t.param(b1_w_);
    r.b1_b = t.param(b1_b_);
    r.w2_w = t.param(w2_w_);
    r.w2_b = t.param(w2_b_);
    r.v1_w = t.param(v1_w_);
    r.v1_b = t.param(v1_b_);
    r.v2_w = t.param(v2_w_);
    r.v2_b = t.param(v2_b_);
    return r;
}

MixingNetwork::TapeRef MixingNetwork::bind_frozen(Tape& t) const {
    TapeRef r;
    r.w1_w = t.constant(w1_w_.value);
    r.w1_b = t.constant(w1_b_.value);
    r.b1_w = t.constant(b1_w_.value);
    r.b1_b = t.constant(b1_b_.value);
    r.w2_w = t.constant(w2_w_.value);
    r.w2_b = t.constant(w2_b_.value);
    r.v1_w = t.constant(v1_w_.value);
    r.v1_b = t.constant(v1_b_.value);
    r.v2_w = t.constant(v2_w_.value);
    r.v2_b = t.constant(v2_b_.value);
    return r;
}

Tape::Id MixingNetwork::mix(Tape& t, const TapeRef& r, Tape::Id qs, Tape::Id states) const {
    if (t.value(qs).cols() != n_agents_) throw std::invalid_argument("MixingNetwork: one chosen Q per agent");
    if (t.value(states).cols() != state_dim_) throw std::invalid_argument("MixingNetwork: state width mismatch");
    Tape::Id w1 = t.abs_(t.affine(states, r.w1_w, r.w1_b));
    Tape::Id b1 = t.affine(states, r.b1_w, r.b1_b);
    Tape::Id hid = t.elu(t.add(t.bmm_rows(qs, w1, n_agents_, embed_), b1));
    Tape::Id w2 = t.abs_(t.affine(states, r.w2_w, r.w2_b));
    Tape::Id head = t.bmm_rows(hid, w2, embed_, 1);
    Tape::Id v = t.affine(t.relu(t.affine(states, r.v1_w, r.v1_b)), r.v2_w, r.v2_b);
    return t.add(head, v);
}

double MixingNetwork::mix_q_total(const std::vector<double>& chosen_qs,
                                  const std::vector<double>& state) const {
    Tape t;
    auto r = bind_frozen(t);
    Tape::Id qs = t.constant(Tensor({1, n_agents_}, chosen_qs));
    Tape::Id st = t.constant(Tensor({1, state_dim_}, state));
    return t.value(mix(t, r, qs, st)).values[0];
}

double MixingNetwork::monotonicity_probe(int n_trials, std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> qdist(-5.0, 5.0), sdist(-2.0, 2.0);
    double worst = std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < n_trials; ++trial) {
        Tape t;
        auto r = bind_frozen(t);
        Tensor qs = Tensor::zeros({1, n_agents_});
        for (auto& v : qs.values) v = qdist(rng);
        Tensor st = Tensor::zeros({1, state_dim_});
        for (auto& v : st.values) v = sdist(rng);
        Tape::Id q_in = t.input(std::move(qs));
        Tape::Id qtot = mix(t, r, q_in, t.constant(std::move(st)));
        t.backward(qtot);
        for (double g : t.grad_of(q_in).values) worst = std::min(worst, g);
    }
    return worst;
}

std::vector<Parameter*> MixingNetwork::parameters() {
    return {&w1_w_, &w1_b_, &b1_w_, &b1_b_, &w2_w_, &w2_b_, &v1_w_, &v1_b_, &v2_w_, &v2_b_};
}

void MixingNetwork::copy_from(const MixingNetwork& src) {
    copy_values(w1_w_, src.w1_w_);
    copy_values(w1_b_, src.w1_b_);
    copy_values(b1_w_, src.b1_w_);
    copy_values(b1_b_, src.b1_b_);
    copy_values(w2_w_, src.w2_w_);
    copy_values(w2_b_, src.w2_b_);
    copy_values(v1_w_, src.v1_w_);
    copy_values(v1_b_, src.v1_b_);
    copy_values(v2_w_, src.v2_w_);
    copy_values(v2_b_, src.v2_b_);
}

Mlp3::Mlp3(const std::string& prefix, int in_dim, int hidden, int out_dim, std::mt19937_64& rng,
           bool trainable)
    : in_dim_(in_dim),
      hidden_(hidden),
      out_dim_(out_dim),
      w1_(make_param(prefix + ".l1.w", {in_dim, hidden}, in_dim, rng, trainable)),
      b1_(make_param(prefix + ".l1.b", {hidden}, in_dim, rng, trainable)),
      w2_(make_param(prefix + ".l2.w", {hidden, hidden}, hidden, rng, trainable)),
      b2_(make_param(prefix + ".l2.b", {hidden}, hidden, rng, trainable)),
      w3_(make_param(prefix + ".l3.w", {hidden, out_dim}, hidden, rng, trainable)),
      b3_(make_param(prefix + ".l3.b", {out_dim}, hidden, rng, trainable)) {
    if (in_dim < 1 || hidden < 1 || out_dim < 1) throw std::invalid_argument("Mlp3: bad dimensions");
}

Mlp3::TapeRef Mlp3::bind(Tape& t) {
    TapeRef r;
    r.w1 = t.param(w1_);
    r.b1 = t.param(b1_);
    r.w2 = t.param(w2_);
    r.b2 = t.param(b2_);
    r.w3 = t.param(w3_);
    r.b3 = t.param(b3_);
    return r;
}

Tape::Id Mlp3::forward(Tape& t, const TapeRef& r, Tape::Id x) const {
    Tape::Id h1 = t.relu(t.affine(x, r.w1, r.b1));
    Tape::Id h2 = t.relu(t.affine(h1, r.w2, r.b2));
    return t.affine(h2, r.w3, r.b3);
}

Tensor Mlp3::forward_raw(const Tensor& x) const {
    if (x.cols() != in_dim_) throw std::invalid_argument("Mlp3: input width mismatch");
    int r = x.rows();
    Tensor h1 = Tensor::zeros({r, hidden_});
    kernels::gemm(x.data(), w1_.value.data(), h1.data(), r, in_dim_, hidden_, false);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < hidden_; ++j) {
            double& v = h1.at(i, j);
            v += b1_.value.values[static_cast<size_t>(j)];
            if (v < 0) v = 0;
        }
    Tensor h2 = Tensor::zeros({r, hidden_});
    kernels::gemm(h1.data(), w2_.value.data(), h2.data(), r, hidden_, hidden_, false);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < hidden_; ++j) {
            double& v = h2.at(i, j);
            v += b2_.value.values[static_cast<size_t>(j)];
            if (v < 0) v = 0;
        }
    Tensor out = Tensor::zeros({r, out_dim_});
    kernels::gemm(h2.data(), w3_.value.data(), out.data(), r, hidden_, out_dim_, false);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < out_dim_; ++j) out.at(i, j) += b3_.value.values[static_cast<size_t>(j)];
    return out;
}

std::vector<Parameter*> Mlp3::parameters() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

void Mlp3::copy_from(const Mlp3& src) {
    copy_values(w1_, src.w1_);
    copy_values(b1_, src.b1_);
    copy_values(w2_, src.w2_);
    copy_values(b2_, src.b2_);
    copy_values(w3_, src.w3_);
    copy_values(b3_, src.b3_);
}

}  // namespace batmarl
