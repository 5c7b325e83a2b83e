// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual CNN backbone with per-task heads. Each stage is
//
//     conv_a(3×3) → ReLU → conv_b(3×3), + shortcut (1×1 when widths differ), ReLU
//
// followed by 2×2 average pooling for every stage but the last, then global
// average pooling into the heads. Convolutions of the stages listed in
// mola_blocks carry adapters.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mola/layers.hpp"
#include "mola/objective.hpp"
#include "mola/router.hpp"
#include "mola/tensor.hpp"

namespace mola {

enum class ModelMode { none, grad, router };

std::string to_string(ModelMode mode);
ModelMode model_mode_from_string(const std::string& name);

struct HeadSpec {
    std::size_t outputs = 10;
    LossKind kind = LossKind::cross_entropy;
};

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t image_height = 32;
    std::size_t image_width = 32;
    std::vector<std::size_t> widths{16, 32, 64, 64};
    /// One head per task.
    std::vector<HeadSpec> heads;
    /// 1-based stage indices.
    std::vector<std::size_t> mola_blocks{4};
    std::size_t rank = 4;
    /// 0 selects the default: T for grad, 4 for router.
    std::size_t experts = 0;
    ModelMode mode = ModelMode::grad;
    /// One router for the whole network, or one per adapted convolution.
    bool shared_router = true;
    std::size_t router_width = 8;
    std::size_t router_blocks = 3;
    std::size_t omega_dim = 32;
    std::size_t projection_hidden = 32;
    std::uint64_t seed = 0;

    std::size_t tasks() const { return heads.size(); }
    std::size_t resolved_experts() const;
    void validate() const;
};

struct ParameterCounts {
    std::size_t backbone = 0;
    std::size_t adapters = 0;
    std::size_t routers = 0;
    std::size_t heads = 0;
    std::size_t total() const { return backbone + adapters + routers + heads; }
};

/// Adapter parameters of one convolution with E experts:
/// E·(Cout·k·r·k + r·k·Cin·k).
std::size_t adapter_parameter_formula(std::size_t out_channels, std::size_t in_channels, std::size_t kernel,
                                      std::size_t rank, std::size_t experts);

/// Rank actually used by a convolution: min(r, Cin, Cout).
std::size_t effective_rank(std::size_t rank, std::size_t in_channels, std::size_t out_channels);

template <typename T>
struct NamedConv {
    std::string name;
    const MoLAConv<T>* conv = nullptr;
};

template <typename T>
class Model {
public:
    struct Output {
        /// predictions[t] holds rows whose task id is t, in batch order; undefined when absent.
        std::vector<Tensor<T>> predictions;
        /// One entry per router (router mode only).
        std::vector<MixingWeights<T>> alphas;
    };

    Model() = default;
    /// Backbone, adapters, routers and heads draw from separate streams of
    /// cfg.seed, so models differing only in mode share W0 and heads.
    static Model build(const BackboneConfig& config);

    const BackboneConfig& config() const { return config_; }
    std::size_t tasks() const { return config_.tasks(); }

    /// `target_aware` says whether task ids may steer the network. Heads always
    /// use them to route rows. Grad mode without task ids is a ContractError.
    Output forward(const Tensor<T>& x, std::span<const std::size_t> task_ids, bool target_aware = true) const;

    /// Pooled features before the heads.
    Tensor<T> features(const Tensor<T>& x, std::span<const std::size_t> task_ids, bool target_aware,
                       std::vector<MixingWeights<T>>* alphas = nullptr) const;

    /// ω = normalize(φ(α)) for router `index`.
    Tensor<T> omega(const MixingWeights<T>& alpha, std::size_t index = 0) const;
    std::size_t router_count() const { return routers_.size(); }
    const RouterNet<T>& router(std::size_t i) const { return routers_.at(i); }

    std::vector<NamedConv<T>> conv_layers() const;
    std::vector<NamedConv<T>> adapted_layers() const;

    std::vector<Tensor<T>> parameters() const;
    std::vector<std::string> parameter_names() const;
    /// W0 and biases of the backbone convolutions.
    std::vector<Tensor<T>> backbone_parameters() const;
    std::vector<Tensor<T>> adapter_parameters() const;
    std::vector<Tensor<T>> router_parameters() const;
    std::vector<Tensor<T>> head_parameters() const;
    ParameterCounts parameter_counts() const;

private:
    struct Stage {
        MoLAConv<T> conv_a;
        MoLAConv<T> conv_b;
        MoLAConv<T> shortcut;
        bool has_shortcut = false;
        bool adapted = false;
        /// Router indices for conv_a, conv_b, shortcut.
        std::size_t router_slot[3] = {0, 0, 0};
    };

    Tensor<T> apply(const MoLAConv<T>& conv, std::size_t slot, const Tensor<T>& h, bool adapted,
                    const TaskIdentifierMatrix<T>* tasks, const std::vector<MixingWeights<T>>& alphas) const;

    BackboneConfig config_;
    std::vector<Stage> stages_;
    std::vector<RouterNet<T>> routers_;
    std::vector<Linear<T>> heads_;
};

/// Heads and image geometry taken from the dataset.
BackboneConfig fit_to_dataset(BackboneConfig config, const Dataset& dataset);

}  // namespace mola
