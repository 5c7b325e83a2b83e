// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/config.hpp"

#include <fmt/format.h>

#include <set>

#include "mola/io.hpp"

namespace mola {

using json = nlohmann::json;

namespace {

void require_known(const json& j, const char* section, const std::set<std::string>& allowed) {
    if (!j.is_object()) {
        throw ConfigError(fmt::format("config section '{}' must be an object", section));
    }
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(fmt::format("unknown config key '{}{}{}'", section, *section ? "." : "", key));
        }
    }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
    }
}

std::string loss_kind_name(LossKind k) { return k == LossKind::cross_entropy ? "cross_entropy" : "mse"; }

LossKind loss_kind_from(const std::string& s) {
    if (s == "cross_entropy") return LossKind::cross_entropy;
    if (s == "mse") return LossKind::mse;
    throw ConfigError(fmt::format("unknown loss kind '{}'", s));
}

}  // namespace

// ---- data -------------------------------------------------------------------

json data_config_to_json(const DataConfig& c) {
    const auto mode = c.tasks.empty() ? HeterogeneityMode::multi_input_het : c.tasks.front().mode;
    const std::size_t classes = c.tasks.empty() ? 10 : c.tasks.front().outputs;
    json j{{"mode", to_string(mode)},
           {"tasks", c.tasks.size()},
           {"classes", classes},
           {"n_per_task", c.n_per_task},
           {"test_per_task", c.test_per_task},
           {"image", {c.image.channels, c.image.height, c.image.width}},
           {"seed", c.master_seed},
           {"heterogeneity", c.heterogeneity},
           {"noise", c.noise},
           {"blobs_per_class", c.blobs_per_class},
           {"jitter", c.jitter}};
    const auto uniform = DataConfig::uniform(mode, c.tasks.size(), classes, c.master_seed).tasks;
    bool same = uniform.size() == c.tasks.size();
    for (std::size_t t = 0; same && t < uniform.size(); ++t) {
        same = uniform[t].kind == c.tasks[t].kind && uniform[t].outputs == c.tasks[t].outputs &&
               uniform[t].transform_seed == c.tasks[t].transform_seed;
    }
    if (!same) {
        json specs = json::array();
        for (const auto& t : c.tasks) {
            specs.push_back({{"kind", to_string(t.kind)}, {"outputs", t.outputs}, {"transform_seed", t.transform_seed}});
        }
        j["task_specs"] = specs;
    }
    return j;
}

DataConfig data_config_from_json(const json& j) {
    require_known(j, "data",
                  {"mode", "tasks", "classes", "n_per_task", "test_per_task", "image", "seed", "heterogeneity",
                   "noise", "blobs_per_class", "jitter", "task_specs"});
    std::string mode = "multi_input_het";
    std::size_t tasks = 3, classes = 10;
    std::uint64_t seed = 0;
    read(j, "mode", mode);
    read(j, "tasks", tasks);
    read(j, "classes", classes);
    read(j, "seed", seed);
    DataConfig c = DataConfig::uniform(heterogeneity_mode_from_string(mode), tasks, classes, seed);
    read(j, "n_per_task", c.n_per_task);
    read(j, "test_per_task", c.test_per_task);
    if (j.contains("image")) {
        std::vector<std::size_t> img;
        read(j, "image", img);
        if (img.size() != 3) throw ConfigError("data.image must be [channels, height, width]");
        c.image = {img[0], img[1], img[2]};
    }
    read(j, "heterogeneity", c.heterogeneity);
    read(j, "noise", c.noise);
    read(j, "blobs_per_class", c.blobs_per_class);
    read(j, "jitter", c.jitter);
    if (j.contains("task_specs")) {
        const auto& specs = j.at("task_specs");
        if (!specs.is_array() || specs.size() != tasks) {
            throw ConfigError(fmt::format("data.task_specs must list exactly {} tasks", tasks));
        }
        for (std::size_t t = 0; t < tasks; ++t) {
            require_known(specs[t], "data.task_specs", {"kind", "outputs", "transform_seed"});
            std::string kind = to_string(c.tasks[t].kind);
            read(specs[t], "kind", kind);
            c.tasks[t].kind = target_kind_from_string(kind);
            read(specs[t], "outputs", c.tasks[t].outputs);
            read(specs[t], "transform_seed", c.tasks[t].transform_seed);
        }
    }
    c.validate();
    return c;
}

// ---- model ------------------------------------------------------------------

json model_config_to_json(const BackboneConfig& c) {
    json heads = json::array();
    for (const auto& h : c.heads) heads.push_back({{"outputs", h.outputs}, {"kind", loss_kind_name(h.kind)}});
    return {{"in_channels", c.in_channels},
            {"image_height", c.image_height},
            {"image_width", c.image_width},
            {"widths", c.widths},
            {"heads", heads},
            {"mola_blocks", c.mola_blocks},
            {"rank", c.rank},
            {"experts", c.experts},
            {"mode", to_string(c.mode)},
            {"shared_router", c.shared_router},
            {"router_width", c.router_width},
            {"router_blocks", c.router_blocks},
            {"omega_dim", c.omega_dim},
            {"projection_hidden", c.projection_hidden},
            {"seed", c.seed}};
}

BackboneConfig model_config_from_json(const json& j) {
    require_known(j, "model",
                  {"in_channels", "image_height", "image_width", "widths", "heads", "mola_blocks", "rank", "experts",
                   "mode", "shared_router", "router_width", "router_blocks", "omega_dim", "projection_hidden",
                   "seed"});
    BackboneConfig c;
    read(j, "in_channels", c.in_channels);
    read(j, "image_height", c.image_height);
    read(j, "image_width", c.image_width);
    read(j, "widths", c.widths);
    if (j.contains("heads")) {
        for (const auto& h : j.at("heads")) {
            require_known(h, "model.heads", {"outputs", "kind"});
            HeadSpec spec;
            read(h, "outputs", spec.outputs);
            std::string kind = "cross_entropy";
            read(h, "kind", kind);
            spec.kind = loss_kind_from(kind);
            c.heads.push_back(spec);
        }
    }
    read(j, "mola_blocks", c.mola_blocks);
    read(j, "rank", c.rank);
    read(j, "experts", c.experts);
    std::string mode = to_string(c.mode);
    read(j, "mode", mode);
    c.mode = model_mode_from_string(mode);
    read(j, "shared_router", c.shared_router);
    read(j, "router_width", c.router_width);
    read(j, "router_blocks", c.router_blocks);
    read(j, "omega_dim", c.omega_dim);
    read(j, "projection_hidden", c.projection_hidden);
    read(j, "seed", c.seed);
    return c;
}

// ---- train ------------------------------------------------------------------

json train_config_to_json(const TrainConfig& c) {
    return {{"optimizer", to_string(c.optimizer)},
            {"lr", c.lr},
            {"momentum", c.momentum},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"beta", c.beta},
            {"tau", c.tau},
            {"seed", c.seed},
            {"freeze_backbone", c.freeze_backbone},
            {"eval_every", c.eval_every}};
}

TrainConfig train_config_from_json(const json& j) {
    require_known(j, "train",
                  {"optimizer", "lr", "momentum", "beta1", "beta2", "eps", "epochs", "batch_size", "beta", "tau",
                   "seed", "freeze_backbone", "eval_every"});
    TrainConfig c;
    std::string opt = to_string(c.optimizer);
    read(j, "optimizer", opt);
    c.optimizer = optimizer_kind_from_string(opt);
    read(j, "lr", c.lr);
    read(j, "momentum", c.momentum);
    read(j, "beta1", c.beta1);
    read(j, "beta2", c.beta2);
    read(j, "eps", c.eps);
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "beta", c.beta);
    read(j, "tau", c.tau);
    read(j, "seed", c.seed);
    read(j, "freeze_backbone", c.freeze_backbone);
    read(j, "eval_every", c.eval_every);
    c.validate();
    return c;
}

// ---- experiment -------------------------------------------------------------

json default_config_json() {
    ExperimentConfig c;
    c.data = DataConfig::uniform(HeterogeneityMode::multi_input_het, 3, 10, 0);
    return to_json(c);
}

json to_json(const ExperimentConfig& c) {
    auto model = model_config_to_json(c.model);
    for (const char* k : {"in_channels", "image_height", "image_width", "heads", "seed"}) model.erase(k);
    auto train = train_config_to_json(c.train);
    train.erase("seed");
    return {{"seed", c.seed}, {"data", data_config_to_json(c.data)}, {"model", model}, {"train", train}};
}

ExperimentConfig experiment_from_json(const json& j) {
    require_known(j, "", {"seed", "data", "model", "train"});
    ExperimentConfig c;
    read(j, "seed", c.seed);
    c.data = data_config_from_json(j.value("data", json::object()));
    c.model = model_config_from_json(j.value("model", json::object()));
    c.train = train_config_from_json(j.value("train", json::object()));
    c.model.seed = c.seed;
    c.train.seed = c.seed;
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError(fmt::format("override '{}' is not of the form key=value", assignment));
    }
    std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    if (key.find('.') == std::string::npos) {
        // Top-level keys win; otherwise the key must name exactly one section entry.
        if (!(j.contains(key) && !j.at(key).is_object())) {
            std::vector<std::string> hits;
            for (const char* section : {"data", "model", "train"}) {
                if (j.contains(section) && j.at(section).contains(key)) hits.push_back(std::string(section) + "." + key);
            }
            if (hits.size() > 1) {
                throw ConfigError(fmt::format("override key '{}' is ambiguous; qualify it", key));
            }
            if (hits.empty()) throw ConfigError(fmt::format("unknown override key '{}'", key));
            key = hits.front();
        }
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError(fmt::format("malformed override key '{}'", key));
        if (dot == std::string::npos) {
            if (!node->is_object()) throw ConfigError(fmt::format("override '{}' descends into a non-object", key));
            (*node)[part] = value;
            break;
        }
        if (!node->contains(part)) (*node)[part] = json::object();
        node = &(*node)[part];
        start = dot + 1;
    }
}

json resolve_config_json(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
    json j = default_config_json();
    if (file) {
        json user;
        try {
            user = json::parse(read_text(*file));
        } catch (const json::exception& e) {
            throw ConfigError(fmt::format("config {}: {}", file->string(), e.what()));
        }
        if (!user.is_object()) throw ConfigError("config file must hold a JSON object");
        for (const auto& [key, value] : user.items()) {
            if (value.is_object() && j.contains(key) && j[key].is_object()) {
                if (key == "data" && value.contains("tasks") && !value.contains("task_specs")) j[key].erase("task_specs");
                j[key].update(value);
            } else {
                j[key] = value;
            }
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return j;
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
    return experiment_from_json(resolve_config_json(file, overrides));
}

std::string config_hash(const json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return fmt::format("{:016x}", h);
}

}  // namespace mola
