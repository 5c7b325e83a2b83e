// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "mola/tensor.hpp"

namespace mola::detail {

/// Wraps freshly computed values into a tensor and, when any input is
/// tracked, records `backward` as its producer. `backward` receives the
/// result node; its grad is already allocated.
template <typename T, typename Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data, const std::vector<const Tensor<T>*>& inputs,
                      Fn&& backward) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (grad_enabled()) {
        for (const auto* in : inputs) {
            if (in->defined() && in->requires_grad()) {
                impl->parents.push_back(in->impl_ptr());
            }
        }
        if (!impl->parents.empty()) {
            impl->requires_grad = true;
            impl->backward_fn = std::forward<Fn>(backward);
        }
    }
    return Tensor<T>(std::move(impl));
}

/// Grad buffer of an input, or nullptr when it is not tracked.
template <typename T>
T* grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
    if (!impl || !impl->requires_grad) {
        return nullptr;
    }
    impl->ensure_grad();
    return impl->grad.data();
}

}  // namespace mola::detail
