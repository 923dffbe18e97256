#pragma once

// AdamW with bias correction and decoupled weight decay.

#include <cmath>

#include "mcg/tensor.hpp"

namespace mcg::nn {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const ParamRefs& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (Param* p : params) {
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad[i];
                p->m1[i] = cfg_.beta1 * p->m1[i] + (1.0 - cfg_.beta1) * g;
                p->m2[i] = cfg_.beta2 * p->m2[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = p->m1[i] / bc1;
                const double vhat = p->m2[i] / bc2;
                p->value[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                          cfg_.weight_decay * p->value[i]);
            }
            p->zero_grad();
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    long steps_taken() const { return t_; }

private:
    AdamWConfig cfg_;
    long t_ = 0;
};

}  // namespace mcg::nn
