// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Singular-value analysis of convolution weights. A 4-D weight
// [Cout×Cin×k×k] is viewed as the (Cout·k)×(Cin·k) matrix used by the adapter
// algebra: entry (cout·k + ky, cin·k + kx).

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mola/layers.hpp"
#include "mola/model.hpp"
#include "mola/tensor.hpp"

namespace mola {

struct SvdResult {
    std::size_t rows = 0;
    std::size_t cols = 0;
    /// rows×p, p×p diagonal as a vector, cols×p with p = min(rows, cols); descending.
    std::vector<double> u;
    std::vector<double> sigma;
    std::vector<double> v;
};

/// One-sided Jacobi SVD in double precision of a row-major matrix. Raises
/// NumericError for non-finite input or a reconstruction error above 1e-6
/// (relative Frobenius).
SvdResult svd(std::span<const double> matrix, std::size_t rows, std::size_t cols);

std::vector<double> svd_spectrum(std::span<const double> matrix, std::size_t rows, std::size_t cols);

/// Flattens a 2-D or 4-D weight and returns its descending singular values.
template <typename T>
std::vector<double> svd_spectrum(const Tensor<T>& weight);

/// The (Cout·k)×(Cin·k) view of a 4-D weight (2-D weights pass through).
template <typename T>
std::vector<double> flatten_weight(const Tensor<T>& weight, std::size_t* rows, std::size_t* cols);

struct PrincipalFraction {
    std::size_t K = 0;
    std::size_t R = 0;
    double ratio = 0.0;
};

/// R counts σ > 1e-9·σ₁; K is the least count whose leading sum reaches
/// alpha times the full sum (capped at R). Inputs must be descending and
/// nonnegative (InvariantError); an all-zero spectrum is a NumericError.
PrincipalFraction principal_fraction(std::span<const double> sigmas, double alpha = 0.99);

struct SpectralReport {
    std::string layer;
    std::string variant;
    std::vector<double> sigmas;
    PrincipalFraction fraction;
    double max_sigma = 0.0;
    double min_sigma = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
};

SpectralReport spectral_report(const std::string& layer, const std::string& variant, std::vector<double> sigmas,
                               double alpha = 0.99);

/// W0 alone, then W0 + ΔW_i for each adapter. When `high_rank` is given its
/// merged weights are appended as "W0+dW<i>@r<rank>".
std::vector<SpectralReport> compare_variants(const std::string& layer, const MoLAConv<float>& conv, double alpha = 0.99,
                                             const MoLAConv<float>* high_rank = nullptr);

/// Every convolution of a model; adapted ones get all their variants.
std::vector<SpectralReport> analyze_model(const Model<float>& model, double alpha = 0.99);

/// Mean K/R over the merged variants of each adapted layer, or of W0 for
/// layers without adapters, keyed in layer order.
std::vector<std::pair<std::string, double>> merged_kr_by_layer(const std::vector<SpectralReport>& reports);

std::string spectra_csv(const std::vector<SpectralReport>& reports);
std::string kr_csv(const std::vector<SpectralReport>& reports);
/// layer,variant,min,q1,median,q3,max
std::string boxplot_csv(const std::vector<SpectralReport>& reports);

}  // namespace mola
