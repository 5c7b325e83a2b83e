// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reference NYUv2 results (segmentation, depth, surface normal) for the
// single-task baseline, HSP and MoLA-Grad.

#pragma once

#include <array>
#include <string>

#include "mola/objective.hpp"

namespace nyuv2 {

inline constexpr double kHspDeltaM = 4.72;
inline constexpr double kGradDeltaM = -9.17;

inline mola::MetricTable table() {
    struct Metric {
        const char* task;
        const char* name;
        int sign;
    };
    constexpr std::array<Metric, 9> metrics{{{"segmentation", "miou", 1},
                                             {"segmentation", "pix_acc", 1},
                                             {"depth", "abs_err", 0},
                                             {"depth", "rel_err", 0},
                                             {"normal", "mean_angle", 0},
                                             {"normal", "median_angle", 0},
                                             {"normal", "within_11.25", 1},
                                             {"normal", "within_22.5", 1},
                                             {"normal", "within_30", 1}}};
    const std::array<std::pair<const char*, std::array<double, 9>>, 3> rows{{
        {"Single-Task", {49.37, 72.03, 0.52, 0.24, 22.97, 16.94, 0.34, 0.62, 0.73}},
        {"HSP", {45.21, 69.70, 0.49, 0.21, 26.10, 21.08, 0.26, 0.52, 0.66}},
        {"MoLA-Grad", {52.79, 75.08, 0.39, 0.16, 24.00, 18.73, 0.31, 0.58, 0.70}},
    }};
    mola::MetricTable t;
    for (const auto& [method, values] : rows)
        for (std::size_t i = 0; i < metrics.size(); ++i)
            t.set({method, metrics[i].task, metrics[i].name, values[i], metrics[i].sign});
    return t;
}

}  // namespace nyuv2
