// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/gradcheck.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace mola {

double GradCheckReport::worst_relative() const {
    double worst = 0.0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.max_rel_error);
    }
    return worst;
}

template <typename T>
GradCheckReport finite_difference_check(const std::function<Tensor<T>()>& loss, std::vector<Tensor<T>> params,
                                        double epsilon, const std::vector<std::string>& names) {
    if (!(epsilon > 0.0)) {
        throw ConfigError(fmt::format("finite_difference_check: epsilon must be positive, got {}", epsilon));
    }
    for (auto& p : params) {
        p.zero_grad();
    }
    const Tensor<T> base = loss();
    if (base.numel() != 1) {
        throw ContractError("finite_difference_check: loss must be scalar");
    }
    {
        NoGradGuard guard;
        const T again = loss().item();
        if (again != base.item()) {
            throw DeterminismError(
                fmt::format("finite_difference_check: loss evaluated to {} then {}", base.item(), again));
        }
    }
    backward(base);

    GradCheckReport report;
    NoGradGuard guard;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const auto analytic = p.grad_vector();
        auto values = p.mutable_data();
        GradCheckEntry entry;
        entry.name = pi < names.size() ? names[pi] : fmt::format("param{}", pi);
        entry.elements = values.size();
        double max_a = 0.0, max_n = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T original = values[i];
            values[i] = static_cast<T>(original + epsilon);
            const double plus = loss().item();
            values[i] = static_cast<T>(original - epsilon);
            const double minus = loss().item();
            values[i] = original;
            // Divide by the step actually taken after rounding to T.
            const double step = static_cast<double>(static_cast<T>(original + epsilon)) -
                                static_cast<double>(static_cast<T>(original - epsilon));
            const double numeric = (plus - minus) / step;
            const double a = analytic[i];
            entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
            max_a = std::max(max_a, std::abs(a));
            max_n = std::max(max_n, std::abs(numeric));
        }
        const double scale = std::max(max_a, max_n);
        entry.max_rel_error = scale > 0.0 ? entry.max_abs_error / scale : 0.0;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

template GradCheckReport finite_difference_check<float>(const std::function<Tensor<float>()>&,
                                                        std::vector<Tensor<float>>, double,
                                                        const std::vector<std::string>&);
template GradCheckReport finite_difference_check<double>(const std::function<Tensor<double>()>&,
                                                         std::vector<Tensor<double>>, double,
                                                         const std::vector<std::string>&);

}  // namespace mola
