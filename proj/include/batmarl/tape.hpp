#pragma once

#include <string>
#include <vector>

#include "batmarl/tensor.hpp"

namespace batmarl {

// Raised when a forward value comes out non-finite.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Reverse-mode tape over 2-D tensors. Ops execute eagerly on creation, so
// intermediate values can be read back while a graph is still being built
// (the bootstrap targets of a TD update depend on values computed earlier on
// the same tape). backward() walks the recorded ops once, newest first, and
// accumulates into bound Parameter grads; it may be called once per tape.
class Tape {
public:
    using Id = int;

    struct Node {
        enum class Op {
            Input,
            Constant,
            Param,
            Affine,
            Relu,
            Tanh,
            Sigmoid,
            Elu,
            Abs,
            Add,
            Mul,
            Scale,
            Softmax,
            LogSoftmax,
            ConcatCols,
            SliceRows,
            SelectCols,
            EmbedRows,
            BmmRows,
            RowMax,
            RowNormSum,
            WeightedSqSum,
            WeightedSum,
            GruStepPre,
            Reshape,
        };

        Op op;
        std::vector<Id> in;
        Tensor value;
        Tensor grad;  // allocated lazily in backward()
        bool needs_grad = false;
        bool visited = false;
        Parameter* bound = nullptr;
        double factor = 0.0;
        std::vector<int> idx;   // select/embed row indices, slice {off,k}, bmm {n,m}, rowmax argmax
        Tensor aux1, aux2;      // saved forward intermediates
        Tensor target, weight;  // reducer payloads
    };

    explicit Tape(bool finite_checks = true) : finite_checks_(finite_checks) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. input() participates in the gradient sweep, constant() does not.
    Id input(Tensor v);
    Id constant(Tensor v);
    Id param(Parameter& p);

    // y = x*W + b with x:[r,n], W:[n,m], b:[m].
    Id affine(Id x, Id w, Id b);
    Id relu(Id x);
    Id tanh_(Id x);
    Id sigmoid(Id x);
    Id elu(Id x);
    Id abs_(Id x);
    Id add(Id a, Id b);
    Id mul(Id a, Id b);
    Id scale(Id x, double s);
    Id softmax(Id x);
    Id log_softmax(Id x);
    // Column-wise concatenation of [r,ci] blocks.
    Id concat_cols(const std::vector<Id>& xs);
    // Rows [off, off+k) of x.
    Id slice_rows(Id x, int off, int k);
    // y[i,0] = x[i, idx[i]].
    Id select_cols(Id x, std::vector<int> idx);
    // y[i,:] = table[rows[i],:].
    Id embed_rows(Id table, std::vector<int> rows);
    // Per-row matmul: x:[r,n], w:[r,n*m] (each row a row-major [n,m] block) -> [r,m].
    Id bmm_rows(Id x, Id w, int n, int m);
    // Per-row max over columns -> [r,1].
    Id row_max(Id x);
    // sum_i ||row_i||_2 -> scalar. Zero rows get zero subgradient.
    Id row_norm_sum(Id x);
    // sum_i weight_i * (x_i - target_i)^2 -> scalar.
    Id weighted_sq_sum(Id x, Tensor target, Tensor weight);
    // sum_i weight_i * x_i -> scalar.
    Id weighted_sum(Id x, Tensor weight);
    // One gated recurrent step from precomputed input projections:
    //   z = sigmoid(xz + h*Uz), c = tanh(xc + h*Uc), h' = (1-z).h + z.c
    Id gru_step_pre(Id xz, Id xc, Id h, Id uz, Id uc);
    Id reshape(Id x, std::vector<int> shape);

    const Tensor& value(Id id) const;
    // Gradient of the last backward() w.r.t. node id (zeros if unreachable).
    Tensor grad_of(Id id) const;
    void backward(Id loss);
    // Recompute every node from its recorded inputs, in order. Leaves keep
    // their stored values. Used to check replay determinism.
    void forward_replay();
    size_t node_count() const { return nodes_.size(); }

    // Fault injection for gradient-check tooling: scales the backward rule of
    // the named op so finite differences no longer match. Empty disables.
    static void corrupt_backward(const std::string& op_name);

private:
    std::vector<Node> nodes_;
    bool finite_checks_;
    bool swept_ = false;

    Id push(Node n);
    void compute(Node& n);
    void check_finite(const Node& n) const;
    const Node& at(Id id) const;
};

}  // namespace batmarl
