#pragma once

// Dense row-major double tensors plus the handful of matmul kernels the
// training path spends its time in. 64-bit arithmetic throughout: gradient
// checks against central finite differences need the headroom.

#include <cassert>
#include <cstddef>
#include <string>
#include <vector>

#include "mcg/common.hpp"

namespace mcg::nn {

struct Tensor {
    std::vector<double> data;
    std::vector<int> shape;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel(shape), 0.0);
    }
    Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
        data.assign(numel(shape), fill);
    }

    static std::size_t numel(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? static_cast<int>(size()) / rows() : shape[1]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const;
    std::uint64_t digest() const { return fnv1a(data); }

    static Tensor randn(std::vector<int> s, double stddev, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& x : t.data) {
            x = stddev * rng.gauss();
        }
        return t;
    }
};

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn_acc(double* c, const double* a, const double* b, int m, int k, int n);
// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt_acc(double* c, const double* a, const double* b, int m, int k, int n);
// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn_acc(double* c, const double* a, const double* b, int m, int k, int n);

// Trainable parameter: value, accumulated gradient, and optimizer moments.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m1;
    Tensor m2;

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor(value.shape);
        m1 = Tensor(value.shape);
        m2 = Tensor(value.shape);
    }

    void zero_grad() { grad.zero(); }
};

using ParamRefs = std::vector<Param*>;

}  // namespace mcg::nn
