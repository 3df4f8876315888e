// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moeforge/tensor.hpp"

namespace moeforge {

/// Per-parameter Adam moments. m and v always match their parameter's shape.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

/// Standard Adam with bias correction. One shared step counter; one moment
/// pair per registered parameter.
class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<Tensor> params, double beta1 = 0.9,
                           double beta2 = 0.999, double eps = 1e-8);

    /// Applies one bias-corrected update from the parameters' accumulated
    /// grads, then increments the step counter. Parameters with no grad
    /// buffer are treated as zero-gradient. When clip_norm > 0 all gradients
    /// are first rescaled so their global L2 norm is at most clip_norm.
    void step(double lr, double clip_norm = 0.0);

    void zero_grad();

    std::int64_t step_count() const { return step_; }
    const AdamState& state(std::size_t i) const { return states_[i]; }
    std::vector<Tensor>& params() { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<AdamState> states_;
    double beta1_, beta2_, eps_;
    std::int64_t step_ = 0;
};

/// Inverse square root schedule with linear warmup:
/// lr(s) = base_lr * min(s * warmup^-1.5, s^-0.5).
struct LrSchedule {
    double base_lr = 0.03;
    std::int64_t warmup_steps = 5000;
};

double lr_at(const LrSchedule& schedule, std::int64_t step);

} // namespace moeforge
