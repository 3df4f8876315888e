// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace moeforge::kernels {

// Raw f64 primitives with fixed summation order. The autograd ops and the
// expert-parallel simulator both call these, which is what makes the
// simulated-parallel vs single-rank comparison bit-exact: every output row
// depends only on its own input row and the weights, evaluated in the same
// order.

/// c += a @ b with a [m,k], b [k,n], c [m,n]. Caller zero-initializes c.
void matmul_acc(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n);

/// c += a @ b^T with a [m,k], b [n,k], c [m,n].
void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);

/// c += a^T @ b with a [m,k], b [m,n], c [k,n].
void matmul_at_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n);

/// Row-wise y[i,:] = x[i,:] + bias.
void add_bias_rows(const double* x, const double* bias, double* y,
                   std::int64_t rows, std::int64_t cols);

void relu(const double* x, double* y, std::int64_t n);

/// Numerically stable softmax of one row of length n.
void softmax_row(const double* x, double* y, std::int64_t n);

/// One expert FFN applied row-by-row: y = relu(x @ w1 + b1) @ w2 + b2.
/// x [rows, d], w1 [d, f], b1 [f], w2 [f, d], b2 [d], y [rows, d].
/// hidden is caller-provided scratch of size rows*f.
void expert_ffn_rows(const double* x, const double* w1, const double* b1,
                     const double* w2, const double* b2, double* hidden,
                     double* y, std::int64_t rows, std::int64_t d, std::int64_t f);

} // namespace moeforge::kernels
