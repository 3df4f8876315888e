// SPDX-License-Identifier: Apache-2.0
#include "moeforge/init.hpp"

#include "moeforge/common.hpp"

namespace moeforge {

Tensor init_truncated_normal(std::vector<std::int64_t> shape, double mean, double std,
                             Rng& rng, bool requires_grad) {
    if (std <= 0.0) {
        throw ConfigError("init_truncated_normal: std must be positive");
    }
    const std::int64_t n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) {
        v = rng.truncated_normal(mean, std, 2.0);
    }
    return Tensor::leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor init_truncated_normal(std::vector<std::int64_t> shape, double mean, double std,
                             std::uint64_t rng_seed, bool requires_grad) {
    Rng rng(rng_seed);
    return init_truncated_normal(std::move(shape), mean, std, rng, requires_grad);
}

} // namespace moeforge
