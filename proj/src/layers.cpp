// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/layers.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "mola/ops.hpp"

namespace mola {

std::string to_string(MixMode mode) { return mode == MixMode::grad ? "grad" : "router"; }

MixMode mix_mode_from_string(const std::string& name) {
    if (name == "grad") return MixMode::grad;
    if (name == "router") return MixMode::router;
    throw ConfigError(fmt::format("unknown mixing mode '{}'", name));
}

namespace {

template <typename T>
Tensor<T> gaussian(const Shape& shape, double stddev, Rng& rng) {
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) {
        v = static_cast<T>(rng.normal(0.0, stddev));
    }
    return Tensor<T>::from(shape, std::move(values), true);
}

}  // namespace

template <typename T>
Tensor<T> adapter_delta(const AdapterPair<T>& pair, std::size_t out_channels, std::size_t in_channels,
                        std::size_t kernel) {
    const std::size_t rk = pair.rank * kernel;
    const Shape b_shape{out_channels * kernel, rk};
    const Shape a_shape{rk, in_channels * kernel};
    if (pair.rank == 0 || pair.B.shape() != b_shape || pair.A.shape() != a_shape) {
        throw DimensionError(fmt::format("adapter_delta: B {} and A {} inconsistent with Cout={} Cin={} k={} r={}",
                                         shape_str(pair.B.shape()), shape_str(pair.A.shape()), out_channels,
                                         in_channels, kernel, pair.rank));
    }
    auto product = matmul(pair.B, pair.A);
    auto split = reshape(product, {out_channels, kernel, in_channels, kernel});
    return permute(split, {0, 2, 1, 3});
}

// ---- TaskIdentifierMatrix ---------------------------------------------------

template <typename T>
TaskIdentifierMatrix<T> TaskIdentifierMatrix<T>::from_task_ids(std::span<const std::size_t> task_ids,
                                                               std::size_t tasks) {
    if (task_ids.empty() || tasks == 0) {
        throw InvariantError("task identifier matrix needs at least one sample and one task");
    }
    std::vector<T> values(task_ids.size() * tasks, T{0});
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
        if (task_ids[i] >= tasks) {
            throw InvariantError(fmt::format("task id {} outside [0, {})", task_ids[i], tasks));
        }
        values[i * tasks + task_ids[i]] = T{1};
    }
    return TaskIdentifierMatrix(Tensor<T>::from({task_ids.size(), tasks}, std::move(values)),
                                {task_ids.begin(), task_ids.end()});
}

template <typename T>
TaskIdentifierMatrix<T> TaskIdentifierMatrix<T>::from_tensor(Tensor<T> matrix) {
    if (matrix.rank() != 2) {
        throw InvariantError(fmt::format("task identifier matrix must be 2-D, got {}", shape_str(matrix.shape())));
    }
    const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
    const auto v = matrix.data();
    std::vector<std::size_t> ids(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t ones = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            const T x = v[r * cols + c];
            if (x == T{1}) {
                ++ones;
                ids[r] = c;
            } else if (x != T{0}) {
                throw InvariantError(fmt::format("task identifier row {} has non-binary entry {}", r, x));
            }
        }
        if (ones != 1) {
            throw InvariantError(fmt::format("task identifier row {} has {} ones", r, ones));
        }
    }
    return TaskIdentifierMatrix(std::move(matrix), std::move(ids));
}

// ---- MixingWeights ----------------------------------------------------------

template <typename T>
MixingWeights<T>::MixingWeights(Tensor<T> alpha) : alpha_(std::move(alpha)) {
    if (alpha_.rank() != 2) {
        throw DimensionError(fmt::format("mixing weights must be [b×E], got {}", shape_str(alpha_.shape())));
    }
}

template <typename T>
double MixingWeights<T>::simplex_violation() const {
    const std::size_t rows = alpha_.dim(0), cols = alpha_.dim(1);
    const auto v = alpha_.data();
    double worst = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double x = v[r * cols + c];
            if (std::isnan(x)) {
                return std::numeric_limits<double>::infinity();
            }
            worst = std::max({worst, -x, x - 1.0});
            total += x;
        }
        worst = std::max(worst, std::abs(total - 1.0));
    }
    return worst;
}

template <typename T>
void MixingWeights<T>::require_simplex(double tolerance) const {
    const double violation = simplex_violation();
    if (!(violation <= tolerance)) {
        throw InvariantError(
            fmt::format("mixing weights leave the simplex by {:.3g} (tolerance {:.1g})", violation, tolerance));
    }
}

// ---- MoLAConv ---------------------------------------------------------------

template <typename T>
MoLAConv<T> MoLAConv<T>::create(const Options& options, Rng& backbone_rng, Rng& adapter_rng) {
    const auto& o = options;
    if (o.out_channels == 0 || o.in_channels == 0 || o.kernel == 0 || o.kernel % 2 == 0) {
        throw ConfigError(fmt::format("conv layer needs positive channels and an odd kernel (out={} in={} k={})",
                                      o.out_channels, o.in_channels, o.kernel));
    }
    if (o.experts > 0 && (o.rank == 0 || o.rank > std::min(o.out_channels, o.in_channels))) {
        throw ConfigError(fmt::format("adapter rank {} must lie in [1, min(Cout={}, Cin={})]", o.rank,
                                      o.out_channels, o.in_channels));
    }
    MoLAConv layer;
    layer.options_ = o;
    const double fan_in = static_cast<double>(o.in_channels * o.kernel * o.kernel);
    layer.weight_ =
        gaussian<T>({o.out_channels, o.in_channels, o.kernel, o.kernel}, std::sqrt(2.0 / fan_in), backbone_rng);
    if (o.bias) {
        layer.bias_ = Tensor<T>::zeros({o.out_channels}, true);
    }
    const std::size_t rk = o.rank * o.kernel;
    for (std::size_t i = 0; i < o.experts; ++i) {
        AdapterPair<T> pair;
        pair.rank = o.rank;
        pair.B = Tensor<T>::zeros({o.out_channels * o.kernel, rk}, true);
        pair.A = gaussian<T>({rk, o.in_channels * o.kernel}, 1.0 / std::sqrt(static_cast<double>(rk)), adapter_rng);
        layer.adapters_.push_back(std::move(pair));
    }
    return layer;
}

template <typename T>
Tensor<T> MoLAConv<T>::adapter_delta(std::size_t index) const {
    if (index >= adapters_.size()) {
        throw DimensionError(fmt::format("adapter {} of {}", index, adapters_.size()));
    }
    return mola::adapter_delta(adapters_[index], out_channels(), in_channels(), kernel());
}

template <typename T>
Tensor<T> MoLAConv<T>::merged_weight(const Tensor<T>& alpha_row) const {
    if (alpha_row.numel() != experts()) {
        throw DimensionError(
            fmt::format("merged_weight: alpha of shape {} for {} adapters", shape_str(alpha_row.shape()), experts()));
    }
    if (experts() == 0) {
        return reshape(weight_, weight_.shape());
    }
    const std::size_t flat = weight_.numel();
    std::vector<Tensor<T>> rows;
    for (std::size_t i = 0; i < experts(); ++i) {
        rows.push_back(reshape(adapter_delta(i), {1, flat}));
    }
    auto mixed = matmul(reshape(alpha_row, {1, experts()}), concat(rows, 0));
    auto merged = add_rowwise(mixed, reshape(weight_, {flat}));
    return reshape(merged, weight_.shape());
}

template <typename T>
void MoLAConv<T>::require_input(const Tensor<T>& h) const {
    if (h.rank() != 4 || h.dim(1) != in_channels()) {
        throw DimensionError(fmt::format("conv layer expects [b×{}×H×W], got {}", in_channels(), shape_str(h.shape())));
    }
}

template <typename T>
Tensor<T> MoLAConv<T>::forward_backbone(const Tensor<T>& h) const {
    require_input(h);
    auto y = conv2d(h, weight_, 1, padding());
    return bias_.defined() ? add_channel_bias(y, bias_) : y;
}

template <typename T>
Tensor<T> MoLAConv<T>::mixed_forward(const Tensor<T>& h, const Tensor<T>& alpha) const {
    require_input(h);
    const std::size_t b = h.dim(0), height = h.dim(2), width = h.dim(3);
    if (alpha.dim(0) != b || alpha.dim(1) != experts()) {
        throw DimensionError(fmt::format("mixing weights {} for batch {} and {} adapters", shape_str(alpha.shape()), b,
                                         experts()));
    }
    const std::size_t flat = weight_.numel();
    std::vector<Tensor<T>> rows;
    rows.reserve(experts());
    for (std::size_t i = 0; i < experts(); ++i) {
        rows.push_back(reshape(adapter_delta(i), {1, flat}));
    }
    // [b×E]·[E×P] + W0: one merged weight per sample, stacked along output channels.
    auto per_sample = add_rowwise(matmul(alpha, concat(rows, 0)), reshape(weight_, {flat}));
    auto stacked = reshape(per_sample, {b * out_channels(), in_channels(), kernel(), kernel()});
    auto folded = reshape(h, {1, b * in_channels(), height, width});
    auto y = conv2d(folded, stacked, b, padding());
    y = reshape(y, {b, out_channels(), y.dim(2), y.dim(3)});
    return bias_.defined() ? add_channel_bias(y, bias_) : y;
}

template <typename T>
Tensor<T> MoLAConv<T>::forward_grouped(const Tensor<T>& h, const TaskIdentifierMatrix<T>& tasks) const {
    if (!has_adapters() || mode() != MixMode::grad) {
        throw ContractError("forward_grouped requires a layer in grad mode");
    }
    if (tasks.tasks() != experts()) {
        throw ContractError(
            fmt::format("grad mode needs one adapter per task: {} tasks, {} adapters", tasks.tasks(), experts()));
    }
    return mixed_forward(h, tasks.matrix());
}

template <typename T>
Tensor<T> MoLAConv<T>::forward_router(const Tensor<T>& h, const MixingWeights<T>& alpha) const {
    if (!has_adapters() || mode() != MixMode::router) {
        throw ContractError("forward_router requires a layer in router mode");
    }
    alpha.require_simplex(1e-4);
    return mixed_forward(h, alpha.tensor());
}

template <typename T>
std::vector<Tensor<T>> MoLAConv<T>::parameters() const {
    std::vector<Tensor<T>> params{weight_};
    if (bias_.defined()) params.push_back(bias_);
    for (const auto& a : adapters_) {
        params.push_back(a.B);
        params.push_back(a.A);
    }
    return params;
}

template <typename T>
std::vector<std::string> MoLAConv<T>::parameter_names(const std::string& prefix) const {
    std::vector<std::string> names{prefix + ".weight"};
    if (bias_.defined()) names.push_back(prefix + ".bias");
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        names.push_back(fmt::format("{}.adapter{}.B", prefix, i));
        names.push_back(fmt::format("{}.adapter{}.A", prefix, i));
    }
    return names;
}

template <typename T>
std::size_t MoLAConv<T>::adapter_parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : adapters_) n += a.B.numel() + a.A.numel();
    return n;
}

template <typename T>
std::size_t MoLAConv<T>::backbone_parameter_count() const {
    return weight_.numel() + (bias_.defined() ? bias_.numel() : 0);
}

// ---- MoLALinear -------------------------------------------------------------

template <typename T>
MoLALinear<T> MoLALinear<T>::create(std::size_t in_features, std::size_t out_features, std::size_t rank,
                                    std::size_t experts, MixMode mode, Rng& backbone_rng, Rng& adapter_rng) {
    MoLALinear layer;
    layer.conv_ = MoLAConv<T>::create({out_features, in_features, 1, rank, experts, mode, true}, backbone_rng,
                                      adapter_rng);
    return layer;
}

namespace {
template <typename T>
Tensor<T> as_pixels(const Tensor<T>& x) {
    if (x.rank() != 2) {
        throw DimensionError(fmt::format("linear layer expects [b×in], got {}", shape_str(x.shape())));
    }
    return reshape(x, {x.dim(0), x.dim(1), 1, 1});
}
template <typename T>
Tensor<T> as_rows(const Tensor<T>& y) {
    return reshape(y, {y.dim(0), y.dim(1)});
}
}  // namespace

template <typename T>
Tensor<T> MoLALinear<T>::forward_backbone(const Tensor<T>& x) const {
    return as_rows(conv_.forward_backbone(as_pixels(x)));
}

template <typename T>
Tensor<T> MoLALinear<T>::forward_grouped(const Tensor<T>& x, const TaskIdentifierMatrix<T>& tasks) const {
    return as_rows(conv_.forward_grouped(as_pixels(x), tasks));
}

template <typename T>
Tensor<T> MoLALinear<T>::forward_router(const Tensor<T>& x, const MixingWeights<T>& alpha) const {
    return as_rows(conv_.forward_router(as_pixels(x), alpha));
}

// ---- Linear -----------------------------------------------------------------

template <typename T>
Linear<T> Linear<T>::create(std::size_t in_features, std::size_t out_features, Rng& rng, double gain) {
    Linear layer;
    layer.weight_ = gaussian<T>({out_features, in_features}, std::sqrt(gain / static_cast<double>(in_features)), rng);
    layer.bias_ = Tensor<T>::zeros({out_features}, true);
    return layer;
}

template <typename T>
Linear<T> Linear<T>::zeros(std::size_t in_features, std::size_t out_features) {
    Linear layer;
    layer.weight_ = Tensor<T>::zeros({out_features, in_features}, true);
    layer.bias_ = Tensor<T>::zeros({out_features}, true);
    return layer;
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
    return linear(x, weight_, bias_);
}

// ---- diagnostics ------------------------------------------------------------

template <typename T>
bool gradient_isolation_check(MoLAConv<T>& layer, const Tensor<T>& h, std::size_t task) {
    if (layer.mode() != MixMode::grad || !layer.has_adapters()) {
        throw ContractError("gradient_isolation_check requires a grad-mode layer");
    }
    for (auto& p : layer.parameters()) {
        p.zero_grad();
    }
    const std::vector<std::size_t> ids(h.dim(0), task);
    const auto tasks = TaskIdentifierMatrix<T>::from_task_ids(ids, layer.experts());
    auto y = layer.forward_grouped(h, tasks);
    backward(scale(sum(mul(y, y)), T{0.5}));

    bool isolated = true;
    for (std::size_t i = 0; i < layer.experts(); ++i) {
        if (i == task) continue;
        for (const auto* t : {&layer.adapters()[i].B, &layer.adapters()[i].A}) {
            const auto g = t->grad();
            isolated = isolated && std::all_of(g.begin(), g.end(), [](T v) { return v == T{0}; });
        }
    }
    const auto gw = layer.backbone_weight().grad();
    const bool backbone_updated = std::any_of(gw.begin(), gw.end(), [](T v) { return v != T{0}; });
    return isolated && backbone_updated;
}

#define MOLA_INSTANTIATE_LAYERS(T)                                                                         \
    template Tensor<T> adapter_delta(const AdapterPair<T>&, std::size_t, std::size_t, std::size_t);        \
    template class TaskIdentifierMatrix<T>;                                                                \
    template class MixingWeights<T>;                                                                       \
    template class MoLAConv<T>;                                                                            \
    template class MoLALinear<T>;                                                                          \
    template class Linear<T>;                                                                              \
    template bool gradient_isolation_check(MoLAConv<T>&, const Tensor<T>&, std::size_t);

MOLA_INSTANTIATE_LAYERS(float)
MOLA_INSTANTIATE_LAYERS(double)

#undef MOLA_INSTANTIATE_LAYERS

}  // namespace mola
