#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace batmarl {

// Dense row-major 64-bit float array. Rank 1 or 2 is all the networks need;
// rank-1 tensors act as a single row where a matrix is expected.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> values;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (element_count(shape) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("Tensor: shape/value size mismatch");
    }

    static int64_t element_count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
            n *= d;
        }
        return s.empty() ? 0 : n;
    }

    static Tensor zeros(std::vector<int> s) {
        auto n = element_count(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
    }
    static Tensor full(std::vector<int> s, double v) {
        auto n = element_count(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
    }
    static Tensor row(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }
    static Tensor matrix(int r, int c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

    int64_t size() const { return static_cast<int64_t>(values.size()); }
    // Rank-1 tensors are a single row.
    int rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int cols() const { return shape.empty() ? 0 : shape.back(); }

    double* data() { return values.data(); }
    const double* data() const { return values.data(); }

    double& at(int r, int c) { return values[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return values[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void fill(double v) { std::fill(values.begin(), values.end(), v); }
};

// A named weight array with its gradient accumulator. Fixed parameters
// (trainable=false) never receive gradients and never change after init.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)), trainable(train) {}

    void zero_grad() { grad.fill(0.0); }
};

// Uniform init in +-1/sqrt(fan_in).
inline Tensor uniform_init(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values) v = dist(rng);
    return t;
}

}  // namespace batmarl
