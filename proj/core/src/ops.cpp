// SPDX-License-Identifier: Apache-2.0
#include "moeforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "moeforge/common.hpp"
#include "moeforge/kernels.hpp"

namespace moeforge {

namespace kernels {

void matmul_acc(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_bt_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

void matmul_at_acc(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void add_bias_rows(const double* x, const double* bias, double* y,
                   std::int64_t rows, std::int64_t cols) {
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) {
            y[i * cols + j] = x[i * cols + j] + bias[j];
        }
    }
}

void relu(const double* x, double* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        y[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
}

void softmax_row(const double* x, double* y, std::int64_t n) {
    double mx = x[0];
    for (std::int64_t j = 1; j < n; ++j) {
        mx = std::max(mx, x[j]);
    }
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    for (std::int64_t j = 0; j < n; ++j) {
        y[j] /= sum;
    }
}

void expert_ffn_rows(const double* x, const double* w1, const double* b1,
                     const double* w2, const double* b2, double* hidden,
                     double* y, std::int64_t rows, std::int64_t d, std::int64_t f) {
    std::fill(hidden, hidden + rows * f, 0.0);
    matmul_acc(x, w1, hidden, rows, d, f);
    add_bias_rows(hidden, b1, hidden, rows, f);
    relu(hidden, hidden, rows * f);
    std::fill(y, y + rows * d, 0.0);
    matmul_acc(hidden, w2, y, rows, f, d);
    add_bias_rows(y, b2, y, rows, d);
}

} // namespace kernels

namespace {

using Node = Tensor::Node;

void require(bool cond, const char* msg) {
    if (!cond) {
        throw ShapeError(msg);
    }
}

void accumulate(Node& target, std::span<const double> delta) {
    auto g = target.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += delta[i];
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: rank-2 tensors required");
    const std::int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    require(b.shape()[0] == k, "matmul: inner dimensions do not match");
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    kernels::matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return Tensor::from_op(
        {m, n}, std::move(out), {a, b},
        [an, bn, m, k, n](Node& self) {
            if (an->requires_grad) {
                kernels::matmul_bt_acc(self.grad.data(), bn->value.data(),
                                       an->ensure_grad().data(), m, n, k);
            }
            if (bn->requires_grad) {
                kernels::matmul_at_acc(an->value.data(), self.grad.data(),
                                       bn->ensure_grad().data(), m, k, n);
            }
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    require(a.shape().size() == 2, "transpose: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        {n, m}, std::move(out), {a},
        [an, m, n](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    g[i * n + j] += self.grad[j * m + i];
                }
            }
        },
        "transpose");
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shapes do not match");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b.data()[i];
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a, b},
        [an, bn](Node& self) {
            if (an->requires_grad) accumulate(*an, self.grad);
            if (bn->requires_grad) accumulate(*bn, self.grad);
        },
        "add");
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require(a.shape().size() == 2 && bias.shape().size() == 1, "add_bias: need [m,n] and [n]");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    require(bias.shape()[0] == n, "add_bias: bias length does not match columns");
    std::vector<double> out(static_cast<std::size_t>(m * n));
    kernels::add_bias_rows(a.data().data(), bias.data().data(), out.data(), m, n);
    auto an = a.node_ptr();
    auto bn = bias.node_ptr();
    return Tensor::from_op(
        {m, n}, std::move(out), {a, bias},
        [an, bn, m, n](Node& self) {
            if (an->requires_grad) accumulate(*an, self.grad);
            if (bn->requires_grad) {
                auto g = bn->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        g[j] += self.grad[i * n + j];
                    }
                }
            }
        },
        "add_bias");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul: shapes do not match");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.data()[i];
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a, b},
        [an, bn](Node& self) {
            if (an->requires_grad) {
                auto g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * bn->value[i];
                }
            }
            if (bn->requires_grad) {
                auto g = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] * an->value[i];
                }
            }
        },
        "mul");
}

Tensor div_elem(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "div_elem: shapes do not match");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] /= b.data()[i];
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a, b},
        [an, bn](Node& self) {
            if (an->requires_grad) {
                auto g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i] / bn->value[i];
                }
            }
            if (bn->requires_grad) {
                auto g = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
                }
            }
        },
        "div_elem");
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) {
        v *= c;
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a},
        [an, c](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += c * self.grad[i];
            }
        },
        "scale");
}

Tensor add_constant(const Tensor& a, std::span<const double> values) {
    require(static_cast<std::int64_t>(values.size()) == a.numel(),
            "add_constant: value count does not match tensor");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += values[i];
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a},
        [an](Node& self) {
            if (an->requires_grad) accumulate(*an, self.grad);
        },
        "add_constant");
}

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data().size());
    kernels::relu(a.data().data(), out.data(), a.numel());
    auto an = a.node_ptr();
    return Tensor::from_op(
        a.shape(), std::move(out), {a},
        [an](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (an->value[i] > 0.0) {
                    g[i] += self.grad[i];
                }
            }
        },
        "relu");
}

Tensor softmax_rows(const Tensor& a) {
    require(a.shape().size() == 2, "softmax_rows: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        kernels::softmax_row(a.data().data() + i * n, out.data() + i * n, n);
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        {m, n}, std::move(out), {a},
        [an, m, n](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* y = self.value.data() + i * n;
                const double* dy = self.grad.data() + i * n;
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) {
                    dot += dy[j] * y[j];
                }
                for (std::int64_t j = 0; j < n; ++j) {
                    g[i * n + j] += y[j] * (dy[j] - dot);
                }
            }
        },
        "softmax_rows");
}

Tensor layernorm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    require(a.shape().size() == 2, "layernorm_rows: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    require(gamma.shape().size() == 1 && gamma.shape()[0] == n, "layernorm_rows: gamma shape");
    require(beta.shape().size() == 1 && beta.shape()[0] == n, "layernorm_rows: beta shape");
    std::vector<double> out(static_cast<std::size_t>(m * n));
    std::vector<double> inv_sigma(static_cast<std::size_t>(m));
    std::vector<double> xhat(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += x[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double d = x[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::int64_t j = 0; j < n; ++j) {
            const double h = (x[j] - mean) * is;
            xhat[i * n + j] = h;
            out[i * n + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    auto an = a.node_ptr();
    auto gn = gamma.node_ptr();
    auto btn = beta.node_ptr();
    return Tensor::from_op(
        {m, n}, std::move(out), {a, gamma, beta},
        [an, gn, btn, m, n, inv_sigma = std::move(inv_sigma),
         xhat = std::move(xhat)](Node& self) {
            for (std::int64_t i = 0; i < m; ++i) {
                const double* dy = self.grad.data() + i * n;
                const double* h = xhat.data() + i * n;
                if (gn->requires_grad) {
                    auto g = gn->ensure_grad();
                    for (std::int64_t j = 0; j < n; ++j) {
                        g[j] += dy[j] * h[j];
                    }
                }
                if (btn->requires_grad) {
                    auto g = btn->ensure_grad();
                    for (std::int64_t j = 0; j < n; ++j) {
                        g[j] += dy[j];
                    }
                }
                if (an->requires_grad) {
                    // dx = (is/n) * (n*dh - sum(dh) - h*sum(dh*h)), dh = dy*gamma
                    double sum_dh = 0.0;
                    double sum_dh_h = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h[j];
                    }
                    auto g = an->ensure_grad();
                    const double is = inv_sigma[i];
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        g[i * n + j] += is * (dh - inv_n * sum_dh - inv_n * h[j] * sum_dh_h);
                    }
                }
            }
        },
        "layernorm_rows");
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
    require(table.shape().size() == 2, "embedding: table must be rank-2");
    const std::int64_t v = table.shape()[0], d = table.shape()[1];
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(t * d));
    for (std::int64_t i = 0; i < t; ++i) {
        const std::int64_t id = ids[i];
        if (id < 0 || id >= v) {
            throw ShapeError("embedding: token id out of range");
        }
        std::memcpy(out.data() + i * d, table.data().data() + id * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    auto tn = table.node_ptr();
    std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
    return Tensor::from_op(
        {t, d}, std::move(out), {table},
        [tn, d, ids_copy = std::move(ids_copy)](Node& self) {
            if (!tn->requires_grad) return;
            auto g = tn->ensure_grad();
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                const std::int64_t id = ids_copy[i];
                for (std::int64_t j = 0; j < d; ++j) {
                    g[id * d + j] += self.grad[static_cast<std::int64_t>(i) * d + j];
                }
            }
        },
        "embedding");
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> targets) {
    require(logits.shape().size() == 2, "cross_entropy_mean: logits must be rank-2");
    const std::int64_t m = logits.shape()[0], n = logits.shape()[1];
    require(static_cast<std::int64_t>(targets.size()) == m,
            "cross_entropy_mean: one target per row required");
    double loss = 0.0;
    std::vector<double> probs(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        const std::int64_t tgt = targets[i];
        if (tgt < 0 || tgt >= n) {
            throw ShapeError("cross_entropy_mean: target id out of range");
        }
        const double* x = logits.data().data() + i * n;
        double mx = x[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            probs[i * n + j] = std::exp(x[j] - mx);
            sum += probs[i * n + j];
        }
        for (std::int64_t j = 0; j < n; ++j) {
            probs[i * n + j] /= sum;
        }
        loss += std::log(sum) + mx - x[tgt];
    }
    loss /= static_cast<double>(m);
    auto ln = logits.node_ptr();
    std::vector<std::int32_t> tgt_copy(targets.begin(), targets.end());
    return Tensor::from_op(
        {1}, {loss}, {logits},
        [ln, m, n, probs = std::move(probs), tgt_copy = std::move(tgt_copy)](Node& self) {
            if (!ln->requires_grad) return;
            const double gscale = self.grad[0] / static_cast<double>(m);
            auto g = ln->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    double p = probs[i * n + j];
                    if (j == tgt_copy[static_cast<std::size_t>(i)]) {
                        p -= 1.0;
                    }
                    g[i * n + j] += gscale * p;
                }
            }
        },
        "cross_entropy_mean");
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        {1}, {s}, {a},
        [an](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[0];
            }
        },
        "sum_all");
}

Tensor mean_cols(const Tensor& a) {
    require(a.shape().size() == 2, "mean_cols: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            out[j] += a.data()[i * n + j];
        }
    }
    for (double& v : out) {
        v /= static_cast<double>(m);
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        {n}, std::move(out), {a},
        [an, m, n](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    g[i * n + j] += self.grad[j] * inv_m;
                }
            }
        },
        "mean_cols");
}

Tensor dot_constant(const Tensor& a, std::span<const double> weights) {
    require(static_cast<std::int64_t>(weights.size()) == a.numel(),
            "dot_constant: weight count does not match tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        s += a.data()[i] * weights[i];
    }
    auto an = a.node_ptr();
    std::vector<double> w(weights.begin(), weights.end());
    return Tensor::from_op(
        {1}, {s}, {a},
        [an, w = std::move(w)](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[0] * w[i];
            }
        },
        "dot_constant");
}

Tensor pick_per_row(const Tensor& a, std::span<const std::int32_t> indices) {
    require(a.shape().size() == 2, "pick_per_row: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    require(static_cast<std::int64_t>(indices.size()) == m,
            "pick_per_row: one index per row required");
    std::vector<double> out(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const std::int64_t j = indices[i];
        if (j < 0 || j >= n) {
            throw ShapeError("pick_per_row: column index out of range");
        }
        out[i] = a.data()[i * n + j];
    }
    auto an = a.node_ptr();
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    return Tensor::from_op(
        {m}, std::move(out), {a},
        [an, n, idx = std::move(idx)](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                g[static_cast<std::int64_t>(i) * n + idx[i]] += self.grad[i];
            }
        },
        "pick_per_row");
}

Tensor slice_rows(const Tensor& a, std::int64_t start, std::int64_t count) {
    require(a.shape().size() == 2, "slice_rows: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    require(start >= 0 && count >= 0 && start + count <= m, "slice_rows: range out of bounds");
    std::vector<double> out(a.data().begin() + start * n,
                            a.data().begin() + (start + count) * n);
    auto an = a.node_ptr();
    return Tensor::from_op(
        {count, n}, std::move(out), {a},
        [an, start, n](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                g[start * n + static_cast<std::int64_t>(i)] += self.grad[i];
            }
        },
        "slice_rows");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_rows: no parts");
    const std::int64_t n = parts[0].shape().size() == 2 ? parts[0].shape()[1] : -1;
    require(n > 0, "concat_rows: rank-2 tensors required");
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.shape().size() == 2 && p.shape()[1] == n,
                "concat_rows: column counts do not match");
        total += p.shape()[0];
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total * n));
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    std::vector<std::shared_ptr<Node>> nodes;
    nodes.reserve(parts.size());
    for (const Tensor& p : parts) {
        nodes.push_back(p.node_ptr());
    }
    return Tensor::from_op(
        {total, n}, std::move(out), parts,
        [nodes = std::move(nodes)](Node& self) {
            std::size_t offset = 0;
            for (const auto& pn : nodes) {
                const std::size_t len = pn->value.size();
                if (pn->requires_grad) {
                    auto g = pn->ensure_grad();
                    for (std::size_t i = 0; i < len; ++i) {
                        g[i] += self.grad[offset + i];
                    }
                }
                offset += len;
            }
        },
        "concat_rows");
}

Tensor slice_cols(const Tensor& a, std::int64_t start, std::int64_t count) {
    require(a.shape().size() == 2, "slice_cols: rank-2 tensor required");
    const std::int64_t m = a.shape()[0], n = a.shape()[1];
    require(start >= 0 && count >= 0 && start + count <= n, "slice_cols: range out of bounds");
    std::vector<double> out(static_cast<std::size_t>(m * count));
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < count; ++j) {
            out[i * count + j] = a.data()[i * n + start + j];
        }
    }
    auto an = a.node_ptr();
    return Tensor::from_op(
        {m, count}, std::move(out), {a},
        [an, start, count, n, m](Node& self) {
            if (!an->requires_grad) return;
            auto g = an->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < count; ++j) {
                    g[i * n + start + j] += self.grad[i * count + j];
                }
            }
        },
        "slice_cols");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const std::int64_t m = parts[0].rows();
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.shape().size() == 2 && p.shape()[0] == m,
                "concat_cols: row counts do not match");
        total += p.shape()[1];
    }
    std::vector<double> out(static_cast<std::size_t>(m * total));
    std::int64_t col = 0;
    for (const Tensor& p : parts) {
        const std::int64_t pn = p.shape()[1];
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t j = 0; j < pn; ++j) {
                out[i * total + col + j] = p.data()[i * pn + j];
            }
        }
        col += pn;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<std::int64_t> widths;
    for (const Tensor& p : parts) {
        nodes.push_back(p.node_ptr());
        widths.push_back(p.shape()[1]);
    }
    return Tensor::from_op(
        {m, total}, std::move(out), parts,
        [nodes = std::move(nodes), widths = std::move(widths), m, total](Node& self) {
            std::int64_t col = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const std::int64_t pn = widths[k];
                if (nodes[k]->requires_grad) {
                    auto g = nodes[k]->ensure_grad();
                    for (std::int64_t i = 0; i < m; ++i) {
                        for (std::int64_t j = 0; j < pn; ++j) {
                            g[i * pn + j] += self.grad[i * total + col + j];
                        }
                    }
                }
                col += pn;
            }
        },
        "concat_cols");
}

Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape) {
    require(shape_numel(shape) == a.numel(), "reshape: element count must be preserved");
    std::vector<double> out(a.data().begin(), a.data().end());
    auto an = a.node_ptr();
    return Tensor::from_op(
        std::move(shape), std::move(out), {a},
        [an](Node& self) {
            if (an->requires_grad) accumulate(*an, self.grad);
        },
        "reshape");
}

} // namespace moeforge
