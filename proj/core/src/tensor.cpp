// SPDX-License-Identifier: Apache-2.0
#include "moeforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "moeforge/common.hpp"

namespace moeforge {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) {
            throw ShapeError("negative dimension in shape");
        }
        n *= d;
    }
    return n;
}

void check_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string("non-finite value produced by ") + what);
        }
    }
}

std::span<double> Tensor::Node::ensure_grad() {
    if (grad.size() != value.size()) {
        grad.assign(value.size(), 0.0);
    }
    return grad;
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
    return constant(std::move(shape), 0.0);
}

Tensor Tensor::constant(std::vector<std::int64_t> shape, double fill) {
    auto node = std::make_shared<Node>();
    node->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node->shape = std::move(shape);
    node->is_leaf = true;
    return Tensor(std::move(node));
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("from_data: data length does not match shape");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->is_leaf = true;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) {
    return from_data({1}, {v});
}

Tensor Tensor::leaf(std::vector<std::int64_t> shape, std::vector<double> data,
                    bool requires_grad) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.node_->requires_grad = requires_grad;
    return t;
}

const std::vector<std::int64_t>& Tensor::shape() const {
    return node_->shape;
}

std::int64_t Tensor::numel() const {
    return node_->numel();
}

std::int64_t Tensor::rows() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    if (s.size() == 1) return 1;
    if (s.size() == 2) return s[0];
    throw ShapeError("rows(): tensor rank > 2");
}

std::int64_t Tensor::cols() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    if (s.size() == 1) return s[0];
    if (s.size() == 2) return s[1];
    throw ShapeError("cols(): tensor rank > 2");
}

std::span<const double> Tensor::data() const {
    return node_->value;
}

std::span<double> Tensor::leaf_data() {
    if (!node_->is_leaf) {
        throw std::logic_error("leaf_data: tensor is not a leaf");
    }
    return node_->value;
}

double Tensor::scalar_value() const {
    if (numel() != 1) {
        throw ShapeError("scalar_value: tensor is not a scalar");
    }
    return node_->value[0];
}

bool Tensor::requires_grad() const {
    return node_->requires_grad;
}

bool Tensor::has_grad() const {
    return node_ && node_->grad.size() == node_->value.size();
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) {
        throw std::logic_error("grad(): no gradient accumulated");
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::from_op(std::vector<std::int64_t> shape, std::vector<double> value,
                       std::vector<Tensor> inputs, BackwardFn backward,
                       const char* op_name) {
    if (shape_numel(shape) != static_cast<std::int64_t>(value.size())) {
        throw ShapeError(std::string(op_name) + ": output length does not match shape");
    }
    check_finite(value, op_name);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    for (const Tensor& in : inputs) {
        node->requires_grad = node->requires_grad || in.requires_grad();
    }
    if (node->requires_grad) {
        node->parents.reserve(inputs.size());
        for (const Tensor& in : inputs) {
            node->parents.push_back(in.node_ptr());
        }
        node->backward_fn = std::move(backward);
    }
    return Tensor(std::move(node));
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ShapeError("backward(): root must be a scalar");
    }
    // Iterative post-order DFS for the topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* child = node->parents[next_child++].get();
            if (visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->requires_grad && node->backward_fn) {
            node->ensure_grad(); // consumers may never have touched it
            node->backward_fn(*node);
        }
    }
}

} // namespace moeforge
