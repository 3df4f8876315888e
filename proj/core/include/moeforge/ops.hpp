// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "moeforge/tensor.hpp"

namespace moeforge {

// Differentiable ops. Every op validates shapes (ShapeError) and rejects
// non-finite outputs (NonFiniteError). Backward accumulates exact gradients
// into every requires_grad input.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
/// [m,n] + [n], broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
/// Elementwise a / b. b must be nonzero everywhere.
Tensor div_elem(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// Adds a constant (non-differentiable) elementwise term, e.g. an attention mask.
Tensor add_constant(const Tensor& a, std::span<const double> values);
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layernorm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);
/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> targets);
Tensor sum_all(const Tensor& a);
/// Column means of a [m,n] tensor -> [n].
Tensor mean_cols(const Tensor& a);
/// Weighted sum with constant weights -> scalar.
Tensor dot_constant(const Tensor& a, std::span<const double> weights);
/// out[i] = a[i, indices[i]] -> [m].
Tensor pick_per_row(const Tensor& a, std::span<const std::int32_t> indices);
Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape);

} // namespace moeforge
