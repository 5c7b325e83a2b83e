// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each records its backward step when grad mode is
// enabled and at least one input requires grad. Shapes are checked eagerly and
// violations raise DimensionError naming the offending shapes.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mola/tensor.hpp"

namespace mola {

// ---- linear algebra ------------------------------------------------------

/// [m×k] · [k×n] -> [m×n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Batched matmul: [B×m×k] · [B×k×n] -> [B×m×n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

/// x·Wᵀ + bias with x [n×in], weight [out×in], bias [out] (may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Grouped stride-1 cross-correlation with zero padding.
/// input [b×Cin×H×W], weight [Cout×(Cin/groups)×k×k] -> [b×Cout×H'×W'], H' = H + 2·padding − k + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t groups, std::size_t padding);

// ---- elementwise ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// x [n×P] plus v [P] broadcast over rows.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& v);

/// x [b×C×H×W] plus bias [C] broadcast over batch and pixels.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// ---- shape ---------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
/// Selects slices along axis 0.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

// ---- pooling -------------------------------------------------------------

/// Non-overlapping window average; H and W must be divisible by window.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window);
/// [b×C×H×W] -> [b×C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// ---- normalisation and losses --------------------------------------------

/// Softmax over the last axis, max-subtracted. NaN input raises NumericError.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x);

/// Rows of x [n×d] divided by their L2 norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

/// Mean over rows of −log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::size_t> targets);

/// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& prediction, const Tensor<T>& target);

}  // namespace mola
