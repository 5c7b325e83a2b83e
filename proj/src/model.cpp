// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <optional>

#include "mola/ops.hpp"

namespace mola {

std::string to_string(ModelMode mode) {
    switch (mode) {
        case ModelMode::none: return "none";
        case ModelMode::grad: return "grad";
        case ModelMode::router: return "router";
    }
    return "none";
}

ModelMode model_mode_from_string(const std::string& name) {
    if (name == "none" || name == "hps") return ModelMode::none;
    if (name == "grad") return ModelMode::grad;
    if (name == "router") return ModelMode::router;
    throw ConfigError(fmt::format("unknown model mode '{}' (expected none, grad or router)", name));
}

std::size_t BackboneConfig::resolved_experts() const {
    switch (mode) {
        case ModelMode::none: return 0;
        case ModelMode::grad: return experts == 0 ? tasks() : experts;
        case ModelMode::router: return experts == 0 ? 4 : experts;
    }
    return 0;
}

void BackboneConfig::validate() const {
    if (in_channels == 0 || image_height == 0 || image_width == 0) {
        throw ConfigError("model input geometry must be positive");
    }
    if (widths.empty() || std::find(widths.begin(), widths.end(), 0u) != widths.end()) {
        throw ConfigError("model needs at least one stage and every width must be positive");
    }
    if (heads.empty()) {
        throw ConfigError("model needs at least one task head");
    }
    for (const auto& h : heads) {
        if (h.outputs == 0) throw ConfigError("head output count must be positive");
    }
    for (std::size_t b : mola_blocks) {
        if (b < 1 || b > widths.size()) {
            throw ConfigError(fmt::format("mola block {} outside stages 1..{}", b, widths.size()));
        }
    }
    if (mode == ModelMode::none && !mola_blocks.empty()) {
        throw ConfigError("mode=none requires an empty mola_blocks list");
    }
    if (mode != ModelMode::none) {
        if (mola_blocks.empty()) throw ConfigError(fmt::format("mode={} needs at least one mola block", to_string(mode)));
        if (rank == 0) throw ConfigError("adapter rank must be positive");
    }
    if (mode == ModelMode::grad && experts != 0 && experts != tasks()) {
        throw ConfigError(fmt::format("mode=grad needs one expert per task: E={} but T={}", experts, tasks()));
    }
    if (mode == ModelMode::router &&
        (router_width == 0 || router_blocks == 0 || omega_dim == 0 || projection_hidden == 0)) {
        throw ConfigError("router dimensions must be positive");
    }
}

std::size_t adapter_parameter_formula(std::size_t out_channels, std::size_t in_channels, std::size_t kernel,
                                      std::size_t rank, std::size_t experts) {
    return experts * (out_channels * kernel * rank * kernel + rank * kernel * in_channels * kernel);
}

std::size_t effective_rank(std::size_t rank, std::size_t in_channels, std::size_t out_channels) {
    return std::min({rank, in_channels, out_channels});
}

BackboneConfig fit_to_dataset(BackboneConfig config, const Dataset& dataset) {
    const auto& img = dataset.image();
    config.in_channels = img.channels;
    config.image_height = img.height;
    config.image_width = img.width;
    config.heads.clear();
    for (std::size_t t = 0; t < dataset.task_count(); ++t) {
        const auto& spec = dataset.task(t);
        config.heads.push_back({spec.outputs, spec.kind == TargetKind::classification ? LossKind::cross_entropy
                                                                                      : LossKind::mse});
    }
    return config;
}

namespace {

enum Stream : std::uint64_t { backbone_stream = 1, adapter_stream = 2, router_stream = 3, head_stream = 4 };

Rng stream(std::uint64_t seed, Stream s) { return Rng(Rng::splitmix(Rng::splitmix(seed) ^ s)); }

}  // namespace

template <typename T>
Model<T> Model<T>::build(const BackboneConfig& config) {
    config.validate();
    Model m;
    m.config_ = config;
    Rng backbone = stream(config.seed, backbone_stream);
    Rng adapters = stream(config.seed, adapter_stream);
    Rng routing = stream(config.seed, router_stream);
    Rng heads = stream(config.seed, head_stream);
    const std::size_t E = config.resolved_experts();
    const MixMode mix = config.mode == ModelMode::router ? MixMode::router : MixMode::grad;
    std::size_t routers = 0;
    std::size_t cin = config.in_channels;
    for (std::size_t s = 0; s < config.widths.size(); ++s) {
        const std::size_t w = config.widths[s];
        const bool adapted = std::find(config.mola_blocks.begin(), config.mola_blocks.end(), s + 1) !=
                             config.mola_blocks.end();
        const std::size_t experts = adapted ? E : 0;
        auto options = [&](std::size_t out, std::size_t in, std::size_t k) {
            return typename MoLAConv<T>::Options{out, in, k, effective_rank(config.rank, in, out), experts, mix, true};
        };
        Stage stage;
        stage.adapted = adapted;
        stage.conv_a = MoLAConv<T>::create(options(w, cin, 3), backbone, adapters);
        stage.conv_b = MoLAConv<T>::create(options(w, w, 3), backbone, adapters);
        stage.has_shortcut = cin != w;
        if (stage.has_shortcut) {
            stage.shortcut = MoLAConv<T>::create(options(w, cin, 1), backbone, adapters);
        }
        if (adapted && config.mode == ModelMode::router && !config.shared_router) {
            for (std::size_t i = 0; i < (stage.has_shortcut ? 3u : 2u); ++i) stage.router_slot[i] = routers++;
        }
        m.stages_.push_back(std::move(stage));
        cin = w;
    }
    if (config.mode == ModelMode::router) {
        if (config.shared_router) routers = 1;
        RouterConfig rc;
        rc.in_channels = config.in_channels;
        rc.image_height = config.image_height;
        rc.image_width = config.image_width;
        rc.width = config.router_width;
        rc.blocks = config.router_blocks;
        rc.experts = E;
        rc.omega_dim = config.omega_dim;
        rc.projection_hidden = config.projection_hidden;
        for (std::size_t i = 0; i < routers; ++i) m.routers_.push_back(RouterNet<T>::create(rc, routing));
    }
    for (const auto& h : config.heads) {
        m.heads_.push_back(Linear<T>::create(config.widths.back(), h.outputs, heads, 1.0));
    }
    return m;
}

template <typename T>
Tensor<T> Model<T>::apply(const MoLAConv<T>& conv, std::size_t slot, const Tensor<T>& h, bool adapted,
                          const TaskIdentifierMatrix<T>* tasks, const std::vector<MixingWeights<T>>& alphas) const {
    if (!adapted) return conv.forward_backbone(h);
    if (config_.mode == ModelMode::grad) return conv.forward_grouped(h, *tasks);
    return conv.forward_router(h, alphas.at(config_.shared_router ? 0 : slot));
}

template <typename T>
Tensor<T> Model<T>::features(const Tensor<T>& x, std::span<const std::size_t> task_ids, bool target_aware,
                             std::vector<MixingWeights<T>>* alphas_out) const {
    if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != config_.image_height ||
        x.dim(3) != config_.image_width) {
        throw DimensionError(fmt::format("model expects [b×{}×{}×{}] input, got {}", config_.in_channels,
                                         config_.image_height, config_.image_width, shape_str(x.shape())));
    }
    if (task_ids.size() != x.dim(0)) {
        throw DimensionError(fmt::format("{} task ids for a batch of {}", task_ids.size(), x.dim(0)));
    }
    for (std::size_t id : task_ids) {
        if (id >= heads_.size()) throw DataError(fmt::format("task id {} but the model has {} heads", id, heads_.size()));
    }
    std::optional<TaskIdentifierMatrix<T>> tasks;
    if (config_.mode == ModelMode::grad) {
        if (!target_aware) {
            throw ContractError(
                "MoLA-Grad is target-aware: it selects adapters by task id, so inference without task ids is "
                "unsupported");
        }
        tasks = TaskIdentifierMatrix<T>::from_task_ids(task_ids, config_.tasks());
    }
    std::vector<MixingWeights<T>> alphas;
    for (const auto& r : routers_) alphas.push_back(r.route(x));

    const TaskIdentifierMatrix<T>* M = tasks ? &*tasks : nullptr;
    Tensor<T> h = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const auto& st = stages_[s];
        auto y = relu(apply(st.conv_a, st.router_slot[0], h, st.adapted, M, alphas));
        y = apply(st.conv_b, st.router_slot[1], y, st.adapted, M, alphas);
        auto skip = st.has_shortcut ? apply(st.shortcut, st.router_slot[2], h, st.adapted, M, alphas) : h;
        h = relu(add(y, skip));
        if (s + 1 < stages_.size() && h.dim(2) % 2 == 0 && h.dim(3) % 2 == 0) {
            h = avg_pool2d(h, 2);
        }
    }
    if (alphas_out) *alphas_out = std::move(alphas);
    return global_avg_pool(h);
}

template <typename T>
typename Model<T>::Output Model<T>::forward(const Tensor<T>& x, std::span<const std::size_t> task_ids,
                                            bool target_aware) const {
    Output out;
    const auto feats = features(x, task_ids, target_aware, &out.alphas);
    out.predictions.resize(heads_.size());
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < task_ids.size(); ++i) {
            if (task_ids[i] == t) rows.push_back(i);
        }
        if (rows.empty()) continue;
        out.predictions[t] = heads_[t].forward(gather_rows(feats, std::span<const std::size_t>(rows)));
    }
    return out;
}

template <typename T>
Tensor<T> Model<T>::omega(const MixingWeights<T>& alpha, std::size_t index) const {
    if (index >= routers_.size()) {
        throw ContractError(fmt::format("router {} requested but the model has {}", index, routers_.size()));
    }
    return routers_[index].project_omega(alpha);
}

template <typename T>
std::vector<NamedConv<T>> Model<T>::conv_layers() const {
    std::vector<NamedConv<T>> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        const auto& st = stages_[s];
        out.push_back({fmt::format("stage{}.conv_a", s + 1), &st.conv_a});
        out.push_back({fmt::format("stage{}.conv_b", s + 1), &st.conv_b});
        if (st.has_shortcut) out.push_back({fmt::format("stage{}.shortcut", s + 1), &st.shortcut});
    }
    return out;
}

template <typename T>
std::vector<NamedConv<T>> Model<T>::adapted_layers() const {
    auto all = conv_layers();
    std::erase_if(all, [](const NamedConv<T>& c) { return !c.conv->has_adapters(); });
    return all;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::backbone_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& c : conv_layers()) {
        out.push_back(c.conv->backbone_weight());
        out.push_back(c.conv->bias());
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::adapter_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& c : conv_layers()) {
        for (const auto& a : c.conv->adapters()) {
            out.push_back(a.B);
            out.push_back(a.A);
        }
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::router_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& r : routers_) {
        for (auto& p : r.parameters()) out.push_back(p);
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::head_parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& h : heads_) {
        for (auto& p : h.parameters()) out.push_back(p);
    }
    return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (const auto& c : conv_layers()) {
        for (auto& p : c.conv->parameters()) out.push_back(p);
    }
    for (auto& p : router_parameters()) out.push_back(p);
    for (auto& p : head_parameters()) out.push_back(p);
    return out;
}

template <typename T>
std::vector<std::string> Model<T>::parameter_names() const {
    std::vector<std::string> out;
    for (const auto& c : conv_layers()) {
        for (auto& n : c.conv->parameter_names(c.name)) out.push_back(n);
    }
    for (std::size_t i = 0; i < routers_.size(); ++i) {
        for (auto& n : routers_[i].parameter_names(fmt::format("router{}", i))) out.push_back(n);
    }
    for (std::size_t t = 0; t < heads_.size(); ++t) {
        for (auto& n : heads_[t].parameter_names(fmt::format("head{}", t))) out.push_back(n);
    }
    return out;
}

template <typename T>
ParameterCounts Model<T>::parameter_counts() const {
    auto count = [](const std::vector<Tensor<T>>& ps) {
        std::size_t n = 0;
        for (const auto& p : ps) n += p.numel();
        return n;
    };
    return {count(backbone_parameters()), count(adapter_parameters()), count(router_parameters()),
            count(head_parameters())};
}

template class Model<float>;
template class Model<double>;

}  // namespace mola
