// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mola/layers.hpp"
#include "mola/random.hpp"
#include "mola/tensor.hpp"

namespace mola {

struct RouterConfig {
    std::size_t in_channels = 3;
    /// Expected input height/width; 0 accepts any size.
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    std::size_t width = 8;
    std::size_t blocks = 3;
    std::size_t experts = 4;
    std::size_t omega_dim = 32;
    std::size_t projection_hidden = 32;
    /// 2×2 average pooling after each block except the last.
    bool downsample = true;
};

struct TwDConfig {
    double tau = 1.0;
    double beta = 0.1;

    void validate() const;
};

/// conv3×3 → ReLU → conv3×3, plus identity (or 1×1 projection) skip.
template <typename T>
class ResidualBlock {
public:
    ResidualBlock() = default;
    static ResidualBlock create(std::size_t in_channels, std::size_t out_channels, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x) const;
    std::vector<Tensor<T>> parameters() const;
    std::vector<std::string> parameter_names(const std::string& prefix) const;

private:
    MoLAConv<T> first_;
    MoLAConv<T> second_;
    MoLAConv<T> skip_;  // only when channel counts differ
    bool project_ = false;
};

/// Shared router: residual blocks θ, global pooling, gate η to E logits, and
/// the projection head mapping mixing rows to unit-norm embeddings ω.
template <typename T>
class RouterNet {
public:
    RouterNet() = default;
    /// The gate starts at zero so the initial routing is uniform.
    static RouterNet create(const RouterConfig& config, Rng& rng);

    const RouterConfig& config() const { return config_; }

    Tensor<T> logits(const Tensor<T>& x) const;
    /// Softmax of the gate logits; rows lie on the simplex.
    MixingWeights<T> route(const Tensor<T>& x) const;
    /// ω = normalize(φ(α)), one unit-norm row of width d per sample.
    Tensor<T> project_omega(const MixingWeights<T>& alpha) const;

    std::vector<Tensor<T>> parameters() const;
    std::vector<std::string> parameter_names(const std::string& prefix) const;
    std::vector<Tensor<T>> projection_parameters() const;

private:
    RouterConfig config_;
    std::vector<ResidualBlock<T>> blocks_;
    Linear<T> gate_;
    Linear<T> projection_in_;
    Linear<T> projection_out_;
};

/// Task-wise decorrelation loss on embeddings omega [b×d]:
///
///   L = −Σ_i Σ_{j≠i, t_j = t_i} log( exp(ω_i·ω_j/τ) / Σ_{k≠i} exp(ω_i·ω_k/τ) )
///
/// Summed, not averaged. Zero when no pair shares a task. Requires b ≥ 2 and τ > 0.
template <typename T>
Tensor<T> twd_loss(const Tensor<T>& omega, std::span<const std::size_t> task_ids, double tau);

struct SeparationStats {
    double intra_cosine = 0.0;  // mean over same-task pairs i≠j
    double inter_cosine = 0.0;  // mean over different-task pairs
    std::size_t intra_pairs = 0;
    std::size_t inter_pairs = 0;
    double gap() const { return intra_cosine - inter_cosine; }
};

/// Mean pairwise cosine similarity of rows of `omega`, split by task agreement.
template <typename T>
SeparationStats omega_separation(const Tensor<T>& omega, std::span<const std::size_t> task_ids);

}  // namespace mola
