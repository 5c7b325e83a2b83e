// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mola/errors.hpp"

namespace mola {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;

    // Recorded producer. Empty for leaves and for results built without grad.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T{0});
        }
    }
    bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

/// Dense row-major tensor handle with optional gradient tracking.
///
/// Copies are shallow: two handles may refer to the same storage, which is
/// how parameters are shared between a layer and its optimizer. Use clone()
/// for an independent deep copy.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, T value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }

    const Shape& shape() const { return impl().shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return impl().shape.size(); }
    std::size_t numel() const { return impl().data.size(); }

    std::span<const T> data() const { return impl().data; }
    std::span<T> mutable_data() { return impl().data; }
    std::vector<T> to_vector() const { return impl().data; }

    bool has_grad() const { return impl().grad.size() == impl().data.size(); }
    /// Gradient view; all zeros when nothing was accumulated yet.
    std::span<const T> grad() const;
    std::vector<T> grad_vector() const;
    void zero_grad() { impl().grad.clear(); }

    bool requires_grad() const { return impl().requires_grad; }
    Tensor& set_requires_grad(bool flag);

    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    /// Same values, no history, no grad tracking.
    Tensor detach() const;
    /// Deep copy of values (and the requires_grad flag) without history.
    Tensor clone() const;

    Impl& impl() const;
    const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<Impl> impl_;
};

/// Topologically ordered view of the operations that produced a tensor.
template <typename T>
class ComputeGraph {
public:
    explicit ComputeGraph(const Tensor<T>& root);

    /// Nodes in dependency order: every node appears after all of its inputs.
    const std::vector<detail::TensorImpl<T>*>& nodes() const { return order_; }
    std::size_t size() const { return order_.size(); }

    /// Seeds d(root)/d(root) = 1 and runs every recorded backward step once,
    /// in reverse topological order. Gradients accumulate additively.
    void backward();

private:
    Tensor<T> root_;
    std::vector<detail::TensorImpl<T>*> order_;
};

/// Reverse-mode sweep from a scalar loss.
template <typename T>
void backward(const Tensor<T>& loss);

/// Disables graph recording within a scope. Thread-local.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputeGraph<float>;
extern template class ComputeGraph<double>;

}  // namespace mola
