// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/router.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "autograd_internal.hpp"
#include "mola/ops.hpp"

namespace mola {

void TwDConfig::validate() const {
    if (!(tau > 0.0)) {
        throw ConfigError(fmt::format("TwD temperature must be positive, got {}", tau));
    }
    if (!(beta >= 0.0)) {
        throw ConfigError(fmt::format("TwD weight beta must be nonnegative, got {}", beta));
    }
}

// ---- ResidualBlock ----------------------------------------------------------

template <typename T>
ResidualBlock<T> ResidualBlock<T>::create(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
    Rng unused(0);  // router convolutions carry no adapters
    ResidualBlock block;
    block.first_ = MoLAConv<T>::create({out_channels, in_channels, 3, 0, 0, MixMode::router, true}, rng, unused);
    block.second_ = MoLAConv<T>::create({out_channels, out_channels, 3, 0, 0, MixMode::router, true}, rng, unused);
    block.project_ = in_channels != out_channels;
    if (block.project_) {
        block.skip_ = MoLAConv<T>::create({out_channels, in_channels, 1, 0, 0, MixMode::router, false}, rng, unused);
    }
    return block;
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x) const {
    auto y = second_.forward_backbone(relu(first_.forward_backbone(x)));
    return add(y, project_ ? skip_.forward_backbone(x) : x);
}

template <typename T>
std::vector<Tensor<T>> ResidualBlock<T>::parameters() const {
    auto params = first_.parameters();
    for (auto& p : second_.parameters()) params.push_back(p);
    if (project_) {
        for (auto& p : skip_.parameters()) params.push_back(p);
    }
    return params;
}

template <typename T>
std::vector<std::string> ResidualBlock<T>::parameter_names(const std::string& prefix) const {
    auto names = first_.parameter_names(prefix + ".conv1");
    for (auto& n : second_.parameter_names(prefix + ".conv2")) names.push_back(n);
    if (project_) {
        for (auto& n : skip_.parameter_names(prefix + ".skip")) names.push_back(n);
    }
    return names;
}

// ---- RouterNet --------------------------------------------------------------

template <typename T>
RouterNet<T> RouterNet<T>::create(const RouterConfig& config, Rng& rng) {
    if (config.experts == 0 || config.width == 0 || config.blocks == 0 || config.omega_dim == 0 ||
        config.projection_hidden == 0 || config.in_channels == 0) {
        throw ConfigError("router dimensions must be positive");
    }
    RouterNet router;
    router.config_ = config;
    std::size_t channels = config.in_channels;
    for (std::size_t i = 0; i < config.blocks; ++i) {
        router.blocks_.push_back(ResidualBlock<T>::create(channels, config.width, rng));
        channels = config.width;
    }
    router.gate_ = Linear<T>::zeros(config.width, config.experts);
    router.projection_in_ = Linear<T>::create(config.experts, config.projection_hidden, rng, 2.0);
    router.projection_out_ = Linear<T>::create(config.projection_hidden, config.omega_dim, rng, 1.0);
    return router;
}

template <typename T>
Tensor<T> RouterNet<T>::logits(const Tensor<T>& x) const {
    const auto& c = config_;
    const bool bad_size = x.rank() == 4 && ((c.image_height != 0 && x.dim(2) != c.image_height) ||
                                            (c.image_width != 0 && x.dim(3) != c.image_width));
    if (x.rank() != 4 || x.dim(1) != c.in_channels || bad_size) {
        throw DimensionError(fmt::format("router expects [b×{}×{}×{}] input, got {}", c.in_channels, c.image_height,
                                         c.image_width, shape_str(x.shape())));
    }
    Tensor<T> h = x;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = blocks_[i].forward(h);
        if (c.downsample && i + 1 < blocks_.size() && h.dim(2) % 2 == 0 && h.dim(3) % 2 == 0) {
            h = avg_pool2d(h, 2);
        }
    }
    return gate_.forward(global_avg_pool(h));
}

template <typename T>
MixingWeights<T> RouterNet<T>::route(const Tensor<T>& x) const {
    return MixingWeights<T>(softmax(logits(x)));
}

template <typename T>
Tensor<T> RouterNet<T>::project_omega(const MixingWeights<T>& alpha) const {
    if (alpha.experts() != config_.experts) {
        throw DimensionError(fmt::format("projection expects {} mixing weights per row, got {}", config_.experts,
                                         alpha.experts()));
    }
    auto hidden = relu(projection_in_.forward(alpha.tensor()));
    return l2_normalize_rows(projection_out_.forward(hidden));
}

template <typename T>
std::vector<Tensor<T>> RouterNet<T>::parameters() const {
    std::vector<Tensor<T>> params;
    for (const auto& b : blocks_) {
        for (auto& p : b.parameters()) params.push_back(p);
    }
    for (const auto* l : {&gate_, &projection_in_, &projection_out_}) {
        for (auto& p : l->parameters()) params.push_back(p);
    }
    return params;
}

template <typename T>
std::vector<std::string> RouterNet<T>::parameter_names(const std::string& prefix) const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        for (auto& n : blocks_[i].parameter_names(fmt::format("{}.block{}", prefix, i))) names.push_back(n);
    }
    for (auto& n : gate_.parameter_names(prefix + ".gate")) names.push_back(n);
    for (auto& n : projection_in_.parameter_names(prefix + ".projection.0")) names.push_back(n);
    for (auto& n : projection_out_.parameter_names(prefix + ".projection.1")) names.push_back(n);
    return names;
}

template <typename T>
std::vector<Tensor<T>> RouterNet<T>::projection_parameters() const {
    auto params = projection_in_.parameters();
    for (auto& p : projection_out_.parameters()) params.push_back(p);
    return params;
}

// ---- TwD --------------------------------------------------------------------

template <typename T>
Tensor<T> twd_loss(const Tensor<T>& omega, std::span<const std::size_t> task_ids, double tau) {
    if (!(tau > 0.0)) {
        throw ConfigError(fmt::format("twd_loss: temperature must be positive, got {}", tau));
    }
    if (omega.rank() != 2 || omega.dim(0) != task_ids.size()) {
        throw DimensionError(
            fmt::format("twd_loss: embeddings {} for {} task ids", shape_str(omega.shape()), task_ids.size()));
    }
    const std::size_t b = omega.dim(0), d = omega.dim(1);
    if (b < 2) {
        throw ContractError("twd_loss needs at least two samples");
    }
    const auto w = omega.data();
    // Row-wise d L / d s_ik where s_ik = ω_i·ω_k / τ; the diagonal stays zero.
    std::vector<double> coeff(b * b, 0.0);
    std::vector<double> sim(b);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        std::size_t positives = 0;
        for (std::size_t k = 0; k < b; ++k) {
            if (k != i && task_ids[k] == task_ids[i]) ++positives;
        }
        if (positives == 0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < b; ++k) {
            if (k == i) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(w[i * d + c]) * w[k * d + c];
            sim[k] = dot / tau;
            mx = std::max(mx, sim[k]);
        }
        double z = 0.0;
        for (std::size_t k = 0; k < b; ++k) {
            if (k != i) z += std::exp(sim[k] - mx);
        }
        const double lse = mx + std::log(z);
        for (std::size_t k = 0; k < b; ++k) {
            if (k == i) continue;
            const bool positive = task_ids[k] == task_ids[i];
            if (positive) total += lse - sim[k];
            coeff[i * b + k] = static_cast<double>(positives) * std::exp(sim[k] - lse) - (positive ? 1.0 : 0.0);
        }
    }
    auto oi = omega.impl_ptr();
    return detail::make_result<T>({}, {static_cast<T>(total)}, {&omega},
                                  [oi, coeff = std::move(coeff), b, d, tau](detail::TensorImpl<T>& self) {
                                      T* g = detail::grad_of(oi);
                                      if (!g) return;
                                      const double upstream = self.grad[0] / tau;
                                      const auto& v = oi->data;
                                      for (std::size_t i = 0; i < b; ++i) {
                                          for (std::size_t k = 0; k < b; ++k) {
                                              const double c = coeff[i * b + k] * upstream;
                                              if (c == 0.0) continue;
                                              for (std::size_t e = 0; e < d; ++e) {
                                                  g[i * d + e] += static_cast<T>(c * v[k * d + e]);
                                                  g[k * d + e] += static_cast<T>(c * v[i * d + e]);
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
SeparationStats omega_separation(const Tensor<T>& omega, std::span<const std::size_t> task_ids) {
    if (omega.rank() != 2 || omega.dim(0) != task_ids.size()) {
        throw DimensionError(
            fmt::format("omega_separation: embeddings {} for {} task ids", shape_str(omega.shape()), task_ids.size()));
    }
    const std::size_t b = omega.dim(0), d = omega.dim(1);
    const auto w = omega.data();
    std::vector<double> norms(b);
    for (std::size_t i = 0; i < b; ++i) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) sq += static_cast<double>(w[i * d + c]) * w[i * d + c];
        norms[i] = std::sqrt(sq);
    }
    SeparationStats stats;
    double intra = 0.0, inter = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = i + 1; j < b; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(w[i * d + c]) * w[j * d + c];
            const double denom = norms[i] * norms[j];
            const double cosine = denom > 0.0 ? dot / denom : 0.0;
            if (task_ids[i] == task_ids[j]) {
                intra += cosine;
                ++stats.intra_pairs;
            } else {
                inter += cosine;
                ++stats.inter_pairs;
            }
        }
    }
    stats.intra_cosine = stats.intra_pairs ? intra / static_cast<double>(stats.intra_pairs) : 0.0;
    stats.inter_cosine = stats.inter_pairs ? inter / static_cast<double>(stats.inter_pairs) : 0.0;
    return stats;
}

#define MOLA_INSTANTIATE_ROUTER(T)                                                      \
    template class ResidualBlock<T>;                                                    \
    template class RouterNet<T>;                                                        \
    template Tensor<T> twd_loss(const Tensor<T>&, std::span<const std::size_t>, double); \
    template SeparationStats omega_separation(const Tensor<T>&, std::span<const std::size_t>);

MOLA_INSTANTIATE_ROUTER(float)
MOLA_INSTANTIATE_ROUTER(double)

#undef MOLA_INSTANTIATE_ROUTER

}  // namespace mola
