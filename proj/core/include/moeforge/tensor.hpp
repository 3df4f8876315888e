// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace moeforge {

/// Dense n-dimensional tensor of 64-bit floats with reverse-mode
/// differentiation. Value semantics over a shared node: copying a Tensor is
/// cheap and both copies refer to the same storage and tape position.
///
/// The tape is distributed through the nodes themselves: every op output
/// keeps shared ownership of its inputs plus a backward closure, and
/// backward() runs the closures in reverse topological order. Graphs are
/// rebuilt every step; zero_grad() is explicit.
///
/// Tensors are immutable once produced by the forward pass. The only
/// sanctioned mutation is the optimizer writing leaf values between steps.
class Tensor {
public:
    struct Node;
    using BackwardFn = std::function<void(Node&)>;

    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor constant(std::vector<std::int64_t> shape, double fill);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> data);
    static Tensor scalar(double v);
    /// A leaf participates in autograd when requires_grad is set.
    static Tensor leaf(std::vector<std::int64_t> shape, std::vector<double> data,
                       bool requires_grad);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::int64_t>& shape() const;
    std::int64_t numel() const;
    /// Rank-1 tensors count as a single row; rank-2 as [rows, cols].
    std::int64_t rows() const;
    std::int64_t cols() const;

    std::span<const double> data() const;
    /// Mutable view of a leaf's values (optimizer updates). Throws on
    /// non-leaf tensors.
    std::span<double> leaf_data();

    double scalar_value() const;

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// Reverse-mode pass from a scalar root. Accumulates into the grad
    /// buffers of every reachable node that requires grad.
    void backward() const;

    // --- op-construction surface (used by ops.cpp and friends) ---
    static Tensor from_op(std::vector<std::int64_t> shape, std::vector<double> value,
                          std::vector<Tensor> inputs, BackwardFn backward,
                          const char* op_name);
    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    struct Node {
        std::vector<std::int64_t> shape;
        std::vector<double> value;
        std::vector<double> grad; // sized lazily during backward / gradcheck
        bool requires_grad = false;
        bool is_leaf = false;
        std::vector<std::shared_ptr<Node>> parents;
        BackwardFn backward_fn;

        std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
        std::span<double> ensure_grad();
    };

private:
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
    std::shared_ptr<Node> node_;
};

/// Throws NonFiniteError if any element is NaN or Inf.
void check_finite(std::span<const double> values, const char* what);

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

} // namespace moeforge
