// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Convolution and linear layers augmented with a mixture of low-rank adapters.
// A layer holds a shared weight W0 and E adapter pairs (B_i, A_i); for a
// sample with mixing row alpha the effective weight is
//
//     W = W0 + sum_i alpha_i * reshape(B_i A_i)
//
// where B_i A_i is a (Cout·k)×(Cin·k) matrix whose rows split into
// (cout, ky) and columns into (cin, kx), i.e. ΔW[cout][cin][ky][kx] =
// (B_i A_i)[cout·k + ky][cin·k + kx].

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mola/random.hpp"
#include "mola/tensor.hpp"

namespace mola {

enum class MixMode { grad, router };

std::string to_string(MixMode mode);
MixMode mix_mode_from_string(const std::string& name);

/// Low-rank factors of one adapter: B [(Cout·k)×(r·k)], A [(r·k)×(Cin·k)].
template <typename T>
struct AdapterPair {
    Tensor<T> B;
    Tensor<T> A;
    std::size_t rank = 0;
};

/// reshape(B·A) into [Cout×Cin×k×k].
template <typename T>
Tensor<T> adapter_delta(const AdapterPair<T>& pair, std::size_t out_channels, std::size_t in_channels,
                        std::size_t kernel);

/// b×T one-hot matrix M selecting each sample's task.
template <typename T>
class TaskIdentifierMatrix {
public:
    static TaskIdentifierMatrix from_task_ids(std::span<const std::size_t> task_ids, std::size_t tasks);
    /// Validates that every row is exactly one-hot; raises InvariantError otherwise.
    static TaskIdentifierMatrix from_tensor(Tensor<T> matrix);

    const Tensor<T>& matrix() const { return matrix_; }
    std::size_t batch() const { return matrix_.dim(0); }
    std::size_t tasks() const { return matrix_.dim(1); }
    const std::vector<std::size_t>& task_ids() const { return task_ids_; }

private:
    TaskIdentifierMatrix(Tensor<T> matrix, std::vector<std::size_t> ids)
        : matrix_(std::move(matrix)), task_ids_(std::move(ids)) {}
    Tensor<T> matrix_;
    std::vector<std::size_t> task_ids_;
};

/// Per-sample adapter contributions alpha [b×E].
template <typename T>
class MixingWeights {
public:
    explicit MixingWeights(Tensor<T> alpha);

    const Tensor<T>& tensor() const { return alpha_; }
    std::size_t batch() const { return alpha_.dim(0); }
    std::size_t experts() const { return alpha_.dim(1); }

    /// Largest |row sum − 1| and out-of-[0,1] excursion across rows.
    double simplex_violation() const;
    /// Raises InvariantError when simplex_violation() exceeds tolerance.
    void require_simplex(double tolerance) const;

private:
    Tensor<T> alpha_;
};

/// Convolution with shared weight W0 and E low-rank adapters.
///
/// Stride 1, zero padding k/2. Bias (when present) belongs to the backbone
/// and is never adapted. A layer with zero experts is a plain convolution.
template <typename T>
class MoLAConv {
public:
    struct Options {
        std::size_t out_channels = 0;
        std::size_t in_channels = 0;
        std::size_t kernel = 3;
        std::size_t rank = 4;
        std::size_t experts = 0;
        MixMode mode = MixMode::grad;
        bool bias = true;
    };

    MoLAConv() = default;

    /// W0 ~ N(0, 2/(Cin·k²)) from `backbone_rng`; A ~ N(0, 1/(r·k)) from
    /// `adapter_rng`; B = 0 and bias = 0. Drawing W0 from its own stream
    /// keeps the backbone identical whether or not adapters exist.
    static MoLAConv create(const Options& options, Rng& backbone_rng, Rng& adapter_rng);

    std::size_t out_channels() const { return options_.out_channels; }
    std::size_t in_channels() const { return options_.in_channels; }
    std::size_t kernel() const { return options_.kernel; }
    std::size_t padding() const { return options_.kernel / 2; }
    std::size_t rank() const { return options_.rank; }
    std::size_t experts() const { return adapters_.size(); }
    MixMode mode() const { return options_.mode; }
    bool has_adapters() const { return !adapters_.empty(); }

    const Tensor<T>& backbone_weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }
    const std::vector<AdapterPair<T>>& adapters() const { return adapters_; }
    std::vector<AdapterPair<T>>& adapters() { return adapters_; }

    Tensor<T> adapter_delta(std::size_t index) const;

    /// W0 + Σ alpha_row[i]·ΔW_i, differentiable in W0, the adapters and alpha_row [E].
    Tensor<T> merged_weight(const Tensor<T>& alpha_row) const;

    /// W0 only; identical to a plain convolution.
    Tensor<T> forward_backbone(const Tensor<T>& h) const;

    /// Target-aware path: per-sample weights selected by M, evaluated as a
    /// single convolution with groups = b over the batch folded into channels.
    Tensor<T> forward_grouped(const Tensor<T>& h, const TaskIdentifierMatrix<T>& tasks) const;

    /// Target-agnostic path: per-sample weights mixed by router output alpha.
    Tensor<T> forward_router(const Tensor<T>& h, const MixingWeights<T>& alpha) const;

    /// Backbone parameters followed by B_0, A_0, B_1, A_1, ...
    std::vector<Tensor<T>> parameters() const;
    std::vector<std::string> parameter_names(const std::string& prefix) const;

    std::size_t adapter_parameter_count() const;
    std::size_t backbone_parameter_count() const;

private:
    Tensor<T> mixed_forward(const Tensor<T>& h, const Tensor<T>& alpha) const;
    void require_input(const Tensor<T>& h) const;

    Options options_;
    Tensor<T> weight_;
    Tensor<T> bias_;
    std::vector<AdapterPair<T>> adapters_;
};

/// Linear layer with adapters: the k=1 specialisation of MoLAConv
/// (B: Cout×r, A: r×Cin) applied to [b×Cin] inputs.
template <typename T>
class MoLALinear {
public:
    MoLALinear() = default;
    static MoLALinear create(std::size_t in_features, std::size_t out_features, std::size_t rank,
                             std::size_t experts, MixMode mode, Rng& backbone_rng, Rng& adapter_rng);

    const MoLAConv<T>& conv() const { return conv_; }
    MoLAConv<T>& conv() { return conv_; }

    Tensor<T> forward_backbone(const Tensor<T>& x) const;
    Tensor<T> forward_grouped(const Tensor<T>& x, const TaskIdentifierMatrix<T>& tasks) const;
    Tensor<T> forward_router(const Tensor<T>& x, const MixingWeights<T>& alpha) const;

    std::vector<Tensor<T>> parameters() const { return conv_.parameters(); }

private:
    MoLAConv<T> conv_;
};

/// Plain fully connected layer y = x·Wᵀ + b.
template <typename T>
class Linear {
public:
    Linear() = default;
    /// W ~ N(0, gain/in); b = 0.
    static Linear create(std::size_t in_features, std::size_t out_features, Rng& rng, double gain = 1.0);
    static Linear zeros(std::size_t in_features, std::size_t out_features);

    Tensor<T> forward(const Tensor<T>& x) const;

    std::size_t in_features() const { return weight_.dim(1); }
    std::size_t out_features() const { return weight_.dim(0); }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }
    std::vector<Tensor<T>> parameters() const { return {weight_, bias_}; }
    std::vector<std::string> parameter_names(const std::string& prefix) const {
        return {prefix + ".weight", prefix + ".bias"};
    }

private:
    Tensor<T> weight_;
    Tensor<T> bias_;
};

/// Runs forward_grouped on a batch whose rows all select `task`, back-propagates
/// ½‖y‖², and reports whether every other adapter's gradient is exactly zero
/// while W0 received a gradient. Gradients are left in place for inspection.
template <typename T>
bool gradient_isolation_check(MoLAConv<T>& layer, const Tensor<T>& h, std::size_t task);

}  // namespace mola
