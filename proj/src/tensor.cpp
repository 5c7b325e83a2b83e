// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/tensor.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <unordered_set>
#include <utility>

namespace mola {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

namespace {
void validate_shape(const Shape& shape) {
    if (shape.empty()) {
        return;  // scalar
    }
    if (std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; })) {
        throw DimensionError(fmt::format("shape {} has a zero extent", shape_str(shape)));
    }
}
}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T{0}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
    validate_shape(shape);
    return from(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
        throw DimensionError(fmt::format("shape {} needs {} values, got {}", shape_str(shape),
                                         shape_numel(shape), values.size()));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = shape;
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
typename Tensor<T>::Impl& Tensor<T>::impl() const {
    if (!impl_) {
        throw ContractError("use of an undefined tensor");
    }
    return *impl_;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    const auto& s = impl().shape;
    if (axis >= s.size()) {
        throw DimensionError(fmt::format("axis {} out of range for shape {}", axis, shape_str(s)));
    }
    return s[axis];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
    auto& im = impl();
    im.ensure_grad();
    return im.grad;
}

template <typename T>
std::vector<T> Tensor<T>::grad_vector() const {
    auto g = grad();
    return {g.begin(), g.end()};
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
    impl().requires_grad = flag;
    return *this;
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) {
        throw DimensionError(fmt::format("item() on tensor of shape {}", shape_str(shape())));
    }
    return impl().data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw DimensionError(fmt::format("index of rank {} into shape {}", index.size(), shape_str(s)));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= s[axis]) {
            throw DimensionError(fmt::format("index {} out of range on axis {} of {}", i, axis, shape_str(s)));
        }
        flat = flat * s[axis] + i;
        ++axis;
    }
    return impl().data[flat];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return from(shape(), impl().data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return from(shape(), impl().data, requires_grad());
}

template <typename T>
ComputeGraph<T>::ComputeGraph(const Tensor<T>& root) : root_(root) {
    // Iterative post-order DFS gives a topological order without recursion depth limits.
    std::unordered_set<const detail::TensorImpl<T>*> seen;
    std::vector<std::pair<detail::TensorImpl<T>*, std::size_t>> stack;
    auto* start = &root.impl();
    stack.emplace_back(start, 0);
    seen.insert(start);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            auto* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order_.push_back(node);
            stack.pop_back();
        }
    }
}

template <typename T>
void ComputeGraph<T>::backward() {
    auto& root = root_.impl();
    if (root.data.size() != 1) {
        throw ContractError(fmt::format("backward() needs a scalar loss, got shape {}", shape_str(root.shape)));
    }
    if (!root.requires_grad) {
        throw ContractError("backward() on a loss that does not require grad");
    }
    root.ensure_grad();
    root.grad[0] += T{1};
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        auto* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

template <typename T>
void backward(const Tensor<T>& loss) {
    ComputeGraph<T>(loss).backward();
}

template class Tensor<float>;
template class Tensor<double>;
template class ComputeGraph<float>;
template class ComputeGraph<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace mola
