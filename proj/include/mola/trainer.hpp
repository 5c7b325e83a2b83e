// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mola/data.hpp"
#include "mola/model.hpp"
#include "mola/objective.hpp"

namespace mola {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    /// Zero is accepted and leaves every parameter unchanged.
    double lr = 1e-3;
    /// SGD momentum; 0 gives plain SGD.
    double momentum = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    /// TwD weight β and temperature τ (router mode only).
    double beta = 0.1;
    double tau = 1.0;
    std::uint64_t seed = 0;
    /// Train only adapters, routers and heads.
    bool freeze_backbone = false;
    /// Test-split metrics every n epochs; 0 disables.
    std::size_t eval_every = 0;

    void validate() const;
};

/// SGD (with optional momentum) or Adam over a fixed parameter list.
/// Parameters that received no gradient in a step are left untouched.
template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<Tensor<T>> params, const TrainConfig& config);

    void step();
    void zero_grad();
    std::size_t steps() const { return steps_; }

private:
    std::vector<Tensor<T>> params_;
    TrainConfig config_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

struct StepStats {
    double loss = 0.0;
    double twd = 0.0;
    std::vector<std::optional<double>> task_loss;
    std::vector<std::size_t> task_count;
    std::vector<std::size_t> task_correct;
};

/// One optimisation step per call on a mixed-task batch.
class Trainer {
public:
    Trainer(Model<float>& model, const TrainConfig& config);

    StepStats step(const TaskBatch& batch);
    /// Loss of a batch without updating anything.
    StepStats measure(const TaskBatch& batch) const;

    const TrainConfig& config() const { return config_; }
    std::size_t steps() const { return optimizer_.steps(); }

private:
    StepStats forward_loss(const TaskBatch& batch, Tensor<float>* loss) const;

    Model<float>* model_;
    TrainConfig config_;
    std::vector<LossKind> kinds_;
    Optimizer<float> optimizer_;
};

struct HistoryRow {
    std::size_t epoch = 0;
    std::string task;
    std::string metric;
    double value = 0.0;
};

std::string history_csv(const std::vector<HistoryRow>& rows);

struct TrainResult {
    std::vector<HistoryRow> history;
    double final_loss = 0.0;
    std::size_t steps = 0;
};

/// Mixed-task mini-batch training. A non-finite loss raises NumericError
/// naming the epoch, step, shuffle seed and sample ids of the batch.
TrainResult train(Model<float>& model, const Dataset& dataset, const TrainConfig& config);

/// Name of task t in metric tables.
std::string task_name(std::size_t t);

/// Per-task accuracy (percent, higher is better) or mse (lower is better)
/// plus cross-task means under task "*". Grad-mode models need task ids.
MetricTable evaluate(const Model<float>& model, const Dataset& dataset, Split split, bool task_id_available,
                     const std::string& method, std::size_t batch_size = 128);

struct Checkpoint {
    Model<float> model;
    TrainConfig train;
    std::string config_hash;
};

/// manifest.json (config, config hash, parameter names and shapes) plus one
/// little-endian float32 .bin per parameter.
void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model, const TrainConfig& train);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct OmegaRecord {
    std::size_t sample_id = 0;
    std::size_t task_id = 0;
    std::vector<float> omega;
};

/// Projected mixing weights ω of every sample in a split (router mode).
std::vector<OmegaRecord> omega_embeddings(const Model<float>& model, const Dataset& dataset, Split split,
                                          std::size_t router = 0, std::size_t batch_size = 128);
std::string omega_csv(const std::vector<OmegaRecord>& records);
SeparationStats omega_separation(const std::vector<OmegaRecord>& records);

}  // namespace mola
