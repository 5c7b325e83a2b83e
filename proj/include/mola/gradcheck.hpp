// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mola/tensor.hpp"

namespace mola {

struct GradCheckEntry {
    std::string name;
    std::size_t elements = 0;
    double max_abs_error = 0.0;
    /// ‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞); 0 when both vanish.
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double worst_relative() const;
    bool passed(double tolerance) const { return worst_relative() < tolerance; }
};

/// Compares recorded gradients of the scalar `loss` against central
/// differences (f(θ+ε) − f(θ−ε)) / 2ε for every element of every parameter.
///
/// `loss` must be deterministic; it is evaluated twice at the unperturbed
/// point and a bitwise mismatch raises DeterminismError. Parameter values are
/// restored exactly afterwards; their grads hold the analytic gradient.
template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& loss, std::vector<Tensor<T>> params,
                                        double epsilon, const std::vector<std::string>& names = {});

extern template GradCheckReport finite_difference_check<float>(const std::function<Tensor<float>()>&,
                                                               std::vector<Tensor<float>>, double,
                                                               const std::vector<std::string>&);
extern template GradCheckReport finite_difference_check<double>(const std::function<Tensor<double>()>&,
                                                                std::vector<Tensor<double>>, double,
                                                                const std::vector<std::string>&);

}  // namespace mola
