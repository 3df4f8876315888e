// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "moeforge/tensor.hpp"

namespace moeforge::testing {

// Central finite-difference oracle. Independent of the autograd path: it
// only re-runs the forward closure at perturbed parameter values.

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
};

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    return std::abs(analytic - numeric) / denom;
}

/// forward() must rebuild the loss from the current parameter values.
/// Checks d loss / d params[i][j] for the listed (param, element) pairs.
inline GradCheckResult gradcheck(
    const std::function<Tensor()>& forward, std::vector<Tensor> params,
    const std::vector<std::pair<std::size_t, std::int64_t>>& elements,
    double h = 1e-5) {
    Tensor loss = forward();
    for (Tensor& p : params) {
        p.zero_grad();
    }
    loss.backward();
    std::vector<std::vector<double>> analytic(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        analytic[i].assign(params[i].grad().begin(), params[i].grad().end());
    }

    GradCheckResult result;
    for (const auto& [pi, j] : elements) {
        auto data = params[pi].leaf_data();
        const double saved = data[static_cast<std::size_t>(j)];
        data[static_cast<std::size_t>(j)] = saved + h;
        const double up = forward().scalar_value();
        data[static_cast<std::size_t>(j)] = saved - h;
        const double down = forward().scalar_value();
        data[static_cast<std::size_t>(j)] = saved;
        const double numeric = (up - down) / (2.0 * h);
        result.max_rel_error = std::max(
            result.max_rel_error, rel_error(analytic[pi][static_cast<std::size_t>(j)], numeric));
        ++result.checked;
    }
    return result;
}

/// Convenience: checks every element of every parameter.
inline GradCheckResult gradcheck_all(const std::function<Tensor()>& forward,
                                     std::vector<Tensor> params, double h = 1e-5) {
    std::vector<std::pair<std::size_t, std::int64_t>> elements;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::int64_t j = 0; j < params[i].numel(); ++j) {
            elements.emplace_back(i, j);
        }
    }
    return gradcheck(forward, std::move(params), elements, h);
}

} // namespace moeforge::testing
