// SPDX-License-Identifier: Apache-2.0
#include "moeforge/optim.hpp"

#include <cmath>

#include "moeforge/common.hpp"

namespace moeforge {

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double beta1, double beta2,
                             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    states_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const std::size_t n = static_cast<std::size_t>(params_[i].numel());
        states_[i].m.assign(n, 0.0);
        states_[i].v.assign(n, 0.0);
    }
}

void AdamOptimizer::step(double lr, double clip_norm) {
    if (lr <= 0.0) {
        throw ConfigError("adam: learning rate must be positive");
    }
    double grad_scale = 1.0;
    if (clip_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor& p : params_) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) {
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > clip_norm) {
            grad_scale = clip_norm / norm;
        }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        AdamState& st = states_[i];
        auto theta = p.leaf_data();
        const bool has_grad = p.has_grad();
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double g = has_grad ? p.grad()[j] * grad_scale : 0.0;
            st.m[j] = beta1_ * st.m[j] + (1.0 - beta1_) * g;
            st.v[j] = beta2_ * st.v[j] + (1.0 - beta2_) * g * g;
            const double mhat = st.m[j] / bc1;
            const double vhat = st.v[j] / bc2;
            theta[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
        check_finite(theta, "adam_step");
    }
}

void AdamOptimizer::zero_grad() {
    for (Tensor& p : params_) {
        p.zero_grad();
    }
}

double lr_at(const LrSchedule& schedule, std::int64_t step) {
    if (step < 1) {
        throw ConfigError("lr_at: step must be >= 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(schedule.warmup_steps);
    return schedule.base_lr * std::min(s * std::pow(w, -1.5), std::pow(s, -0.5));
}

} // namespace moeforge
