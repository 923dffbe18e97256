#include "mcg/tensor.hpp"

#include <cmath>

namespace mcg::nn {

bool Tensor::all_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

// ikj ordering keeps the inner loop contiguous in both B and C so the
// compiler can vectorize it.
void gemm_nn_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void gemm_nt_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double sum = 0.0;
            for (int p = 0; p < k; ++p) {
                sum += arow[p] * brow[p];
            }
            crow[j] += sum;
        }
    }
}

void gemm_tn_acc(double* c, const double* a, const double* b, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<std::size_t>(p) * m;
        const double* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) {
                continue;
            }
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace mcg::nn
