// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration as JSON with three sections and a top-level seed:
//
//     {"seed": 0, "data": {...}, "model": {...}, "train": {...}}
//
// Overrides use dotted keys ("train.lr=5e-4", "model.mola_blocks=[3,4]"); a
// bare key names a top-level entry, or else the one section entry of that name. Values are parsed as
// JSON first and fall back to plain strings.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mola/data.hpp"
#include "mola/model.hpp"
#include "mola/trainer.hpp"

namespace mola {

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    BackboneConfig model;
    TrainConfig train;
};

nlohmann::json default_config_json();

/// Unknown keys raise ConfigError.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);

void apply_override(nlohmann::json& j, const std::string& assignment);

/// Defaults, then the file (if any), then overrides in order.
nlohmann::json resolve_config_json(const std::optional<std::filesystem::path>& file,
                                   const std::vector<std::string>& overrides);
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides);

nlohmann::json data_config_to_json(const DataConfig& config);
DataConfig data_config_from_json(const nlohmann::json& j);
/// Heads and image geometry are included; the seed lives at top level.
nlohmann::json model_config_to_json(const BackboneConfig& config);
BackboneConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

}  // namespace mola
