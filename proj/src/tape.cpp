#include "batmarl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "batmarl/kernels.hpp"

namespace batmarl {

namespace {

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::string g_corrupt_op;  // see Tape::corrupt_backward

}  // namespace

namespace {

const char* op_name(Tape::Node::Op op) {
    using Op = Tape::Node::Op;
    switch (op) {
        case Op::Input: return "input";
        case Op::Constant: return "constant";
        case Op::Param: return "param";
        case Op::Affine: return "affine";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Sigmoid: return "sigmoid";
        case Op::Elu: return "elu";
        case Op::Abs: return "abs";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceRows: return "slice_rows";
        case Op::SelectCols: return "select_cols";
        case Op::EmbedRows: return "embed_rows";
        case Op::BmmRows: return "bmm_rows";
        case Op::RowMax: return "row_max";
        case Op::RowNormSum: return "row_norm_sum";
        case Op::WeightedSqSum: return "weighted_sq_sum";
        case Op::WeightedSum: return "weighted_sum";
        case Op::GruStepPre: return "gru_step";
        case Op::Reshape: return "reshape";
    }
    return "?";
}

[[noreturn]] void shape_fail(Tape::Node::Op op, const std::string& detail) {
    throw std::invalid_argument(std::string("tape op '") + op_name(op) + "': " + detail);
}

void require(bool ok, Tape::Node::Op op, const std::string& detail) {
    if (!ok) shape_fail(op, detail);
}

}  // namespace

void Tape::corrupt_backward(const std::string& name) { g_corrupt_op = name; }

const Tape::Node& Tape::at(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size()))
        throw std::invalid_argument("tape: node id out of range");
    return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(Id id) const { return at(id).value; }

Tensor Tape::grad_of(Id id) const {
    const Node& n = at(id);
    if (n.grad.size() > 0) return n.grad;
    return Tensor::zeros(n.value.shape);
}

void Tape::check_finite(const Node& n) const {
    if (!finite_checks_) return;
    for (double v : n.value.values)
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value in forward op '") + op_name(n.op) + "'");
}

Tape::Id Tape::push(Node n) {
    compute(n);
    check_finite(n);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(Tensor v) {
    Node n;
    n.op = Node::Op::Input;
    n.value = std::move(v);
    n.needs_grad = true;
    return push(std::move(n));
}

Tape::Id Tape::constant(Tensor v) {
    Node n;
    n.op = Node::Op::Constant;
    n.value = std::move(v);
    return push(std::move(n));
}

Tape::Id Tape::param(Parameter& p) {
    Node n;
    n.op = Node::Op::Param;
    n.value = p.value;
    n.bound = &p;
    n.needs_grad = p.trainable;
    return push(std::move(n));
}

namespace {
// Mixed-rank helpers: rank-1 tensors act as a single row.
int nrows(const Tensor& t) { return t.rows(); }
int ncols(const Tensor& t) { return t.cols(); }
}  // namespace

Tape::Id Tape::affine(Id x, Id w, Id b) {
    Node n;
    n.op = Node::Op::Affine;
    n.in = {x, w, b};
    return push(std::move(n));
}

Tape::Id Tape::relu(Id x) {
    Node n;
    n.op = Node::Op::Relu;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::tanh_(Id x) {
    Node n;
    n.op = Node::Op::Tanh;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::sigmoid(Id x) {
    Node n;
    n.op = Node::Op::Sigmoid;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::elu(Id x) {
    Node n;
    n.op = Node::Op::Elu;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::abs_(Id x) {
    Node n;
    n.op = Node::Op::Abs;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
    Node n;
    n.op = Node::Op::Add;
    n.in = {a, b};
    return push(std::move(n));
}

Tape::Id Tape::mul(Id a, Id b) {
    Node n;
    n.op = Node::Op::Mul;
    n.in = {a, b};
    return push(std::move(n));
}

Tape::Id Tape::scale(Id x, double s) {
    Node n;
    n.op = Node::Op::Scale;
    n.in = {x};
    n.factor = s;
    return push(std::move(n));
}

Tape::Id Tape::softmax(Id x) {
    Node n;
    n.op = Node::Op::Softmax;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::log_softmax(Id x) {
    Node n;
    n.op = Node::Op::LogSoftmax;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::concat_cols(const std::vector<Id>& xs) {
    Node n;
    n.op = Node::Op::ConcatCols;
    n.in = xs;
    return push(std::move(n));
}

Tape::Id Tape::slice_rows(Id x, int off, int k) {
    Node n;
    n.op = Node::Op::SliceRows;
    n.in = {x};
    n.idx = {off, k};
    return push(std::move(n));
}

Tape::Id Tape::select_cols(Id x, std::vector<int> idx) {
    Node n;
    n.op = Node::Op::SelectCols;
    n.in = {x};
    n.idx = std::move(idx);
    return push(std::move(n));
}

Tape::Id Tape::embed_rows(Id table, std::vector<int> rows) {
    Node n;
    n.op = Node::Op::EmbedRows;
    n.in = {table};
    n.idx = std::move(rows);
    return push(std::move(n));
}

Tape::Id Tape::bmm_rows(Id x, Id w, int in_dim, int out_dim) {
    Node n;
    n.op = Node::Op::BmmRows;
    n.in = {x, w};
    n.idx = {in_dim, out_dim};
    return push(std::move(n));
}

Tape::Id Tape::row_max(Id x) {
    Node n;
    n.op = Node::Op::RowMax;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::row_norm_sum(Id x) {
    Node n;
    n.op = Node::Op::RowNormSum;
    n.in = {x};
    return push(std::move(n));
}

Tape::Id Tape::weighted_sq_sum(Id x, Tensor target, Tensor weight) {
    Node n;
    n.op = Node::Op::WeightedSqSum;
    n.in = {x};
    n.target = std::move(target);
    n.weight = std::move(weight);
    return push(std::move(n));
}

Tape::Id Tape::weighted_sum(Id x, Tensor weight) {
    Node n;
    n.op = Node::Op::WeightedSum;
    n.in = {x};
    n.weight = std::move(weight);
    return push(std::move(n));
}

Tape::Id Tape::gru_step_pre(Id xz, Id xc, Id h, Id uz, Id uc) {
    Node n;
    n.op = Node::Op::GruStepPre;
    n.in = {xz, xc, h, uz, uc};
    return push(std::move(n));
}

Tape::Id Tape::reshape(Id x, std::vector<int> shape) {
    Node n;
    n.op = Node::Op::Reshape;
    n.in = {x};
    n.idx = std::move(shape);
    return push(std::move(n));
}

void Tape::compute(Node& n) {
    using Op = Node::Op;
    auto& N = nodes_;
    auto val = [&](int i) -> const Tensor& { return N[static_cast<size_t>(n.in[static_cast<size_t>(i)])].value; };
    for (Id id : n.in) {
        if (id < 0 || id >= static_cast<Id>(N.size())) shape_fail(n.op, "input id out of range");
        if (N[static_cast<size_t>(id)].needs_grad) n.needs_grad = true;
    }
    switch (n.op) {
        case Op::Input:
        case Op::Constant:
        case Op::Param:
            if (n.bound) n.value = n.bound->value;  // leaves keep snapshots otherwise
            return;
        case Op::Affine: {
            const Tensor &x = val(0), &w = val(1), &b = val(2);
            int r = nrows(x), k = ncols(x), m = ncols(w);
            require(w.shape.size() == 2 && w.shape[0] == k, n.op,
                    "x " + shape_str(x.shape) + " vs w " + shape_str(w.shape));
            require(static_cast<int>(b.size()) == m, n.op, "bias " + shape_str(b.shape) + " vs width " + std::to_string(m));
            n.value = Tensor::zeros({r, m});
            kernels::gemm(x.data(), w.data(), n.value.data(), r, k, m, false);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < m; ++j) n.value.at(i, j) += b.values[static_cast<size_t>(j)];
            return;
        }
        case Op::Relu: {
            const Tensor& x = val(0);
            n.value = x;
            for (auto& v : n.value.values) v = v > 0 ? v : 0.0;
            return;
        }
        case Op::Tanh: {
            const Tensor& x = val(0);
            n.value = x;
            for (auto& v : n.value.values) v = std::tanh(v);
            return;
        }
        case Op::Sigmoid: {
            const Tensor& x = val(0);
            n.value = x;
            for (auto& v : n.value.values) v = 1.0 / (1.0 + std::exp(-v));
            return;
        }
        case Op::Elu: {
            const Tensor& x = val(0);
            n.value = x;
            for (auto& v : n.value.values) v = v > 0 ? v : std::expm1(v);
            return;
        }
        case Op::Abs: {
            const Tensor& x = val(0);
            n.value = x;
            for (auto& v : n.value.values) v = std::abs(v);
            return;
        }
        case Op::Add: {
            const Tensor &a = val(0), &b = val(1);
            require(a.same_shape(b), n.op, shape_str(a.shape) + " vs " + shape_str(b.shape));
            n.value = a;
            for (size_t i = 0; i < n.value.values.size(); ++i) n.value.values[i] += b.values[i];
            return;
        }
        case Op::Mul: {
            const Tensor &a = val(0), &b = val(1);
            require(a.same_shape(b), n.op, shape_str(a.shape) + " vs " + shape_str(b.shape));
            n.value = a;
            for (size_t i = 0; i < n.value.values.size(); ++i) n.value.values[i] *= b.values[i];
            return;
        }
        case Op::Scale: {
            n.value = val(0);
            for (auto& v : n.value.values) v *= n.factor;
            return;
        }
        case Op::Softmax:
        case Op::LogSoftmax: {
            const Tensor& x = val(0);
            int r = nrows(x), m = ncols(x);
            n.value = Tensor::zeros({r, m});
            if (n.op == Op::LogSoftmax) n.aux1 = Tensor::zeros({r, m});
            for (int i = 0; i < r; ++i) {
                double mx = x.values[static_cast<size_t>(i) * m];
                for (int j = 1; j < m; ++j) mx = std::max(mx, x.values[static_cast<size_t>(i) * m + j]);
                double z = 0;
                for (int j = 0; j < m; ++j) z += std::exp(x.values[static_cast<size_t>(i) * m + j] - mx);
                double lz = std::log(z);
                for (int j = 0; j < m; ++j) {
                    double sh = x.values[static_cast<size_t>(i) * m + j] - mx;
                    if (n.op == Op::Softmax) {
                        n.value.at(i, j) = std::exp(sh) / z;
                    } else {
                        n.value.at(i, j) = sh - lz;
                        n.aux1.at(i, j) = std::exp(sh) / z;
                    }
                }
            }
            return;
        }
        case Op::ConcatCols: {
            require(!n.in.empty(), n.op, "no inputs");
            int r = nrows(val(0)), total = 0;
            for (size_t i = 0; i < n.in.size(); ++i) {
                require(nrows(val(static_cast<int>(i))) == r, n.op, "row mismatch");
                total += ncols(val(static_cast<int>(i)));
            }
            n.value = Tensor::zeros({r, total});
            int off = 0;
            for (size_t i = 0; i < n.in.size(); ++i) {
                const Tensor& x = val(static_cast<int>(i));
                int c = ncols(x);
                for (int row = 0; row < r; ++row)
                    std::memcpy(&n.value.at(row, off), &x.values[static_cast<size_t>(row) * c],
                                static_cast<size_t>(c) * sizeof(double));
                off += c;
            }
            return;
        }
        case Op::SliceRows: {
            const Tensor& x = val(0);
            int off = n.idx[0], k = n.idx[1], c = ncols(x);
            require(off >= 0 && k > 0 && off + k <= nrows(x), n.op,
                    "rows [" + std::to_string(off) + "," + std::to_string(off + k) + ") of " + shape_str(x.shape));
            n.value = Tensor::zeros({k, c});
            std::memcpy(n.value.data(), x.data() + static_cast<size_t>(off) * c,
                        static_cast<size_t>(k) * c * sizeof(double));
            return;
        }
        case Op::SelectCols: {
            const Tensor& x = val(0);
            int r = nrows(x), c = ncols(x);
            require(static_cast<int>(n.idx.size()) == r, n.op, "index count vs rows");
            n.value = Tensor::zeros({r, 1});
            for (int i = 0; i < r; ++i) {
                require(n.idx[static_cast<size_t>(i)] >= 0 && n.idx[static_cast<size_t>(i)] < c, n.op,
                        "column index out of range");
                n.value.at(i, 0) = x.at(i, n.idx[static_cast<size_t>(i)]);
            }
            return;
        }
        case Op::EmbedRows: {
            const Tensor& t = val(0);
            require(t.shape.size() == 2, n.op, "table must be rank 2");
            int k = t.shape[0], c = t.shape[1], r = static_cast<int>(n.idx.size());
            n.value = Tensor::zeros({r, c});
            for (int i = 0; i < r; ++i) {
                int row = n.idx[static_cast<size_t>(i)];
                require(row >= 0 && row < k, n.op, "row index out of range");
                std::memcpy(&n.value.at(i, 0), t.data() + static_cast<size_t>(row) * c,
                            static_cast<size_t>(c) * sizeof(double));
            }
            return;
        }
        case Op::BmmRows: {
            const Tensor &x = val(0), &w = val(1);
            int r = nrows(x), in_dim = n.idx[0], out_dim = n.idx[1];
            require(ncols(x) == in_dim, n.op, "x " + shape_str(x.shape) + " vs in_dim " + std::to_string(in_dim));
            require(nrows(w) == r && ncols(w) == in_dim * out_dim, n.op,
                    "w " + shape_str(w.shape) + " vs blocks [" + std::to_string(in_dim) + "," + std::to_string(out_dim) + "]");
            n.value = Tensor::zeros({r, out_dim});
            for (int i = 0; i < r; ++i) {
                const double* xi = &x.values[static_cast<size_t>(i) * in_dim];
                const double* wi = &w.values[static_cast<size_t>(i) * in_dim * out_dim];
                double* yi = &n.value.at(i, 0);
                for (int a = 0; a < in_dim; ++a) {
                    double xv = xi[a];
                    const double* wrow = wi + static_cast<size_t>(a) * out_dim;
                    for (int j = 0; j < out_dim; ++j) yi[j] += xv * wrow[j];
                }
            }
            return;
        }
        case Op::RowMax: {
            const Tensor& x = val(0);
            int r = nrows(x), c = ncols(x);
            n.value = Tensor::zeros({r, 1});
            n.idx.assign(static_cast<size_t>(r), 0);
            for (int i = 0; i < r; ++i) {
                int best = 0;
                for (int j = 1; j < c; ++j)
                    if (x.at(i, j) > x.at(i, best)) best = j;
                n.idx[static_cast<size_t>(i)] = best;
                n.value.at(i, 0) = x.at(i, best);
            }
            return;
        }
        case Op::RowNormSum: {
            const Tensor& x = val(0);
            int r = nrows(x), c = ncols(x);
            n.aux1 = Tensor::zeros({r});
            double total = 0;
            for (int i = 0; i < r; ++i) {
                double s = 0;
                for (int j = 0; j < c; ++j) s += x.at(i, j) * x.at(i, j);
                double norm = std::sqrt(s);
                n.aux1.values[static_cast<size_t>(i)] = norm;
                total += norm;
            }
            n.value = Tensor({1}, {total});
            return;
        }
        case Op::WeightedSqSum: {
            const Tensor& x = val(0);
            require(x.same_shape(n.target) && x.same_shape(n.weight), n.op,
                    "x " + shape_str(x.shape) + " vs payload");
            double total = 0;
            for (size_t i = 0; i < x.values.size(); ++i) {
                double d = x.values[i] - n.target.values[i];
                total += n.weight.values[i] * d * d;
            }
            n.value = Tensor({1}, {total});
            return;
        }
        case Op::WeightedSum: {
            const Tensor& x = val(0);
            require(x.same_shape(n.weight), n.op, "x " + shape_str(x.shape) + " vs weight");
            double total = 0;
            for (size_t i = 0; i < x.values.size(); ++i) total += x.values[i] * n.weight.values[i];
            n.value = Tensor({1}, {total});
            return;
        }
        case Op::GruStepPre: {
            const Tensor &xz = val(0), &xc = val(1), &h = val(2), &uz = val(3), &uc = val(4);
            int r = nrows(h), hd = ncols(h);
            require(nrows(xz) == r && ncols(xz) == hd && nrows(xc) == r && ncols(xc) == hd, n.op,
                    "projection shape vs hidden " + shape_str(h.shape));
            require(uz.shape == std::vector<int>({hd, hd}) && uc.shape == uz.shape, n.op, "recurrent weight shape");
            n.aux1 = Tensor::zeros({r, hd});  // z
            n.aux2 = Tensor::zeros({r, hd});  // c
            kernels::gemm(h.data(), uz.data(), n.aux1.data(), r, hd, hd, false);
            kernels::gemm(h.data(), uc.data(), n.aux2.data(), r, hd, hd, false);
            n.value = Tensor::zeros({r, hd});
            for (size_t i = 0; i < n.value.values.size(); ++i) {
                double z = 1.0 / (1.0 + std::exp(-(n.aux1.values[i] + xz.values[i])));
                double c = std::tanh(n.aux2.values[i] + xc.values[i]);
                n.aux1.values[i] = z;
                n.aux2.values[i] = c;
                n.value.values[i] = (1.0 - z) * h.values[i] + z * c;
            }
            return;
        }
        case Op::Reshape: {
            const Tensor& x = val(0);
            require(Tensor::element_count(n.idx) == x.size(), n.op, "element count mismatch");
            n.value = Tensor(n.idx, x.values);
            return;
        }
    }
    shape_fail(n.op, "unhandled op");
}

void Tape::forward_replay() {
    for (auto& n : nodes_) {
        if (n.op == Node::Op::Input || n.op == Node::Op::Constant || n.op == Node::Op::Param) continue;
        compute(n);
        check_finite(n);
    }
}

void Tape::backward(Id loss) {
    if (swept_) throw std::logic_error("tape: backward() may run once per tape");
    swept_ = true;
    Node& top = nodes_.at(static_cast<size_t>(loss));
    if (top.value.size() != 1) throw std::invalid_argument("tape: backward() needs a scalar loss");

    // Mark ancestors of the loss; everything else is skipped below.
    std::vector<Id> stack = {loss};
    nodes_[static_cast<size_t>(loss)].visited = true;
    while (!stack.empty()) {
        Id id = stack.back();
        stack.pop_back();
        for (Id src : nodes_[static_cast<size_t>(id)].in) {
            Node& s = nodes_[static_cast<size_t>(src)];
            if (!s.visited) {
                s.visited = true;
                stack.push_back(src);
            }
        }
    }
    for (auto& n : nodes_)
        if (n.visited && n.needs_grad) n.grad = Tensor::zeros(n.value.shape);
    if (!top.needs_grad) return;  // loss does not depend on anything trainable
    top.grad.values[0] = 1.0;

    using Op = Node::Op;
    for (Id id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.visited || !n.needs_grad || n.in.empty()) continue;
        Tensor gcopy;
        const Tensor* gp = &n.grad;
        if (!g_corrupt_op.empty() && g_corrupt_op == op_name(n.op)) {
            gcopy = n.grad;
            for (auto& v : gcopy.values) v *= 1.01;
            gp = &gcopy;
        }
        const Tensor& g = *gp;
        auto inode = [&](int i) -> Node& { return nodes_[static_cast<size_t>(n.in[static_cast<size_t>(i)])]; };
        auto wants = [&](int i) { return inode(i).needs_grad; };
        switch (n.op) {
            case Op::Affine: {
                Node &x = inode(0), &w = inode(1), &b = inode(2);
                int r = nrows(x.value), k = ncols(x.value), m = ncols(w.value);
                if (x.needs_grad) kernels::gemm_bt(g.data(), w.value.data(), x.grad.data(), r, k, m, true);
                if (w.needs_grad) kernels::gemm_at(x.value.data(), g.data(), w.grad.data(), r, k, m, true);
                if (b.needs_grad) kernels::colsum(g.data(), b.grad.data(), r, m, true);
                break;
            }
            case Op::Relu: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i)
                    if (x.value.values[i] > 0) x.grad.values[i] += g.values[i];
                break;
            }
            case Op::Tanh: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i)
                    x.grad.values[i] += g.values[i] * (1.0 - n.value.values[i] * n.value.values[i]);
                break;
            }
            case Op::Sigmoid: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i)
                    x.grad.values[i] += g.values[i] * n.value.values[i] * (1.0 - n.value.values[i]);
                break;
            }
            case Op::Elu: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i)
                    x.grad.values[i] += g.values[i] * (x.value.values[i] > 0 ? 1.0 : n.value.values[i] + 1.0);
                break;
            }
            case Op::Abs: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i) {
                    double v = x.value.values[i];
                    x.grad.values[i] += g.values[i] * (v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0);
                }
                break;
            }
            case Op::Add: {
                for (int s = 0; s < 2; ++s) {
                    if (!wants(s)) continue;
                    Node& x = inode(s);
                    for (size_t i = 0; i < g.values.size(); ++i) x.grad.values[i] += g.values[i];
                }
                break;
            }
            case Op::Mul: {
                for (int s = 0; s < 2; ++s) {
                    if (!wants(s)) continue;
                    Node& x = inode(s);
                    const Tensor& other = inode(1 - s).value;
                    for (size_t i = 0; i < g.values.size(); ++i) x.grad.values[i] += g.values[i] * other.values[i];
                }
                break;
            }
            case Op::Scale: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i) x.grad.values[i] += g.values[i] * n.factor;
                break;
            }
            case Op::Softmax: {
                if (!wants(0)) break;
                Node& x = inode(0);
                int r = nrows(n.value), m = ncols(n.value);
                for (int i = 0; i < r; ++i) {
                    double dot = 0;
                    for (int j = 0; j < m; ++j) dot += g.at(i, j) * n.value.at(i, j);
                    for (int j = 0; j < m; ++j) x.grad.at(i, j) += n.value.at(i, j) * (g.at(i, j) - dot);
                }
                break;
            }
            case Op::LogSoftmax: {
                if (!wants(0)) break;
                Node& x = inode(0);
                int r = nrows(n.value), m = ncols(n.value);
                for (int i = 0; i < r; ++i) {
                    double s = 0;
                    for (int j = 0; j < m; ++j) s += g.at(i, j);
                    for (int j = 0; j < m; ++j) x.grad.at(i, j) += g.at(i, j) - n.aux1.at(i, j) * s;
                }
                break;
            }
            case Op::ConcatCols: {
                int r = nrows(n.value);
                int off = 0;
                for (size_t s = 0; s < n.in.size(); ++s) {
                    Node& x = inode(static_cast<int>(s));
                    int c = ncols(x.value);
                    if (x.needs_grad)
                        for (int row = 0; row < r; ++row)
                            for (int j = 0; j < c; ++j)
                                x.grad.values[static_cast<size_t>(row) * c + j] += g.at(row, off + j);
                    off += c;
                }
                break;
            }
            case Op::SliceRows: {
                if (!wants(0)) break;
                Node& x = inode(0);
                int off = n.idx[0], k = n.idx[1], c = ncols(x.value);
                for (int row = 0; row < k; ++row)
                    for (int j = 0; j < c; ++j) x.grad.at(off + row, j) += g.at(row, j);
                break;
            }
            case Op::SelectCols: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < n.idx.size(); ++i)
                    x.grad.at(static_cast<int>(i), n.idx[i]) += g.at(static_cast<int>(i), 0);
                break;
            }
            case Op::EmbedRows: {
                if (!wants(0)) break;
                Node& t = inode(0);
                int c = ncols(t.value);
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (int j = 0; j < c; ++j) t.grad.at(n.idx[i], j) += g.at(static_cast<int>(i), j);
                break;
            }
            case Op::BmmRows: {
                Node &x = inode(0), &w = inode(1);
                int r = nrows(x.value), in_dim = n.idx[0], out_dim = n.idx[1];
                for (int i = 0; i < r; ++i) {
                    const double* gi = &g.values[static_cast<size_t>(i) * out_dim];
                    const double* xi = &x.value.values[static_cast<size_t>(i) * in_dim];
                    const double* wi = &w.value.values[static_cast<size_t>(i) * in_dim * out_dim];
                    for (int a = 0; a < in_dim; ++a) {
                        const double* wrow = wi + static_cast<size_t>(a) * out_dim;
                        if (x.needs_grad) {
                            double acc = 0;
                            for (int j = 0; j < out_dim; ++j) acc += gi[j] * wrow[j];
                            x.grad.values[static_cast<size_t>(i) * in_dim + a] += acc;
                        }
                        if (w.needs_grad) {
                            double xv = xi[a];
                            double* gw = &w.grad.values[static_cast<size_t>(i) * in_dim * out_dim +
                                                        static_cast<size_t>(a) * out_dim];
                            for (int j = 0; j < out_dim; ++j) gw[j] += xv * gi[j];
                        }
                    }
                }
                break;
            }
            case Op::RowMax: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < n.idx.size(); ++i)
                    x.grad.at(static_cast<int>(i), n.idx[i]) += g.at(static_cast<int>(i), 0);
                break;
            }
            case Op::RowNormSum: {
                if (!wants(0)) break;
                Node& x = inode(0);
                int r = nrows(x.value), c = ncols(x.value);
                double gs = g.values[0];
                for (int i = 0; i < r; ++i) {
                    double norm = n.aux1.values[static_cast<size_t>(i)];
                    if (norm <= 0) continue;
                    for (int j = 0; j < c; ++j)
                        x.grad.values[static_cast<size_t>(i) * c + j] +=
                            gs * x.value.values[static_cast<size_t>(i) * c + j] / norm;
                }
                break;
            }
            case Op::WeightedSqSum: {
                if (!wants(0)) break;
                Node& x = inode(0);
                double gs = g.values[0];
                for (size_t i = 0; i < x.value.values.size(); ++i)
                    x.grad.values[i] +=
                        gs * 2.0 * n.weight.values[i] * (x.value.values[i] - n.target.values[i]);
                break;
            }
            case Op::WeightedSum: {
                if (!wants(0)) break;
                Node& x = inode(0);
                double gs = g.values[0];
                for (size_t i = 0; i < x.value.values.size(); ++i) x.grad.values[i] += gs * n.weight.values[i];
                break;
            }
            case Op::GruStepPre: {
                Node &xz = inode(0), &xc = inode(1), &h = inode(2), &uz = inode(3), &uc = inode(4);
                int r = nrows(h.value), hd = ncols(h.value);
                Tensor daz = Tensor::zeros({r, hd}), dac = Tensor::zeros({r, hd});
                for (size_t i = 0; i < g.values.size(); ++i) {
                    double z = n.aux1.values[i], c = n.aux2.values[i], hv = h.value.values[i];
                    double gv = g.values[i];
                    daz.values[i] = gv * (c - hv) * z * (1.0 - z);
                    dac.values[i] = gv * z * (1.0 - c * c);
                }
                if (xz.needs_grad)
                    for (size_t i = 0; i < daz.values.size(); ++i) xz.grad.values[i] += daz.values[i];
                if (xc.needs_grad)
                    for (size_t i = 0; i < dac.values.size(); ++i) xc.grad.values[i] += dac.values[i];
                if (h.needs_grad) {
                    for (size_t i = 0; i < g.values.size(); ++i)
                        h.grad.values[i] += g.values[i] * (1.0 - n.aux1.values[i]);
                    kernels::gemm_bt(daz.data(), uz.value.data(), h.grad.data(), r, hd, hd, true);
                    kernels::gemm_bt(dac.data(), uc.value.data(), h.grad.data(), r, hd, hd, true);
                }
                if (uz.needs_grad) kernels::gemm_at(h.value.data(), daz.data(), uz.grad.data(), r, hd, hd, true);
                if (uc.needs_grad) kernels::gemm_at(h.value.data(), dac.data(), uc.grad.data(), r, hd, hd, true);
                break;
            }
            case Op::Reshape: {
                if (!wants(0)) break;
                Node& x = inode(0);
                for (size_t i = 0; i < g.values.size(); ++i) x.grad.values[i] += g.values[i];
                break;
            }
            default:
                break;
        }
    }
    for (auto& n : nodes_) {
        if (n.op == Node::Op::Param && n.visited && n.bound && n.bound->trainable)
            for (size_t i = 0; i < n.grad.values.size(); ++i) n.bound->grad.values[i] += n.grad.values[i];
    }
}

}  // namespace batmarl
