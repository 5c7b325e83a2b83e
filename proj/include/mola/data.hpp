// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic heterogeneous-task datasets.
//
// Three heterogeneity modes are supported:
//   domain_het        one label space; each task sees the inputs through its
//                     own fixed colour/geometry transform.
//   multi_input_het   each task has its own prototypes and its own labels.
//   single_input_het  one input set; tasks read different targets from it
//                     (a class label, or per-channel mean intensity).
//
// On disk a dataset is a directory with manifest.json plus one raw
// little-endian float32 file per (task, split, inputs|targets).

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mola/layers.hpp"
#include "mola/tensor.hpp"

namespace mola {

enum class HeterogeneityMode { domain_het, multi_input_het, single_input_het };
enum class TargetKind { classification, regression };
enum class Split { train, test };

std::string to_string(HeterogeneityMode mode);
HeterogeneityMode heterogeneity_mode_from_string(const std::string& name);
std::string to_string(TargetKind kind);
TargetKind target_kind_from_string(const std::string& name);
std::string to_string(Split split);

struct TaskSpec {
    std::size_t task_id = 0;
    HeterogeneityMode mode = HeterogeneityMode::multi_input_het;
    TargetKind kind = TargetKind::classification;
    /// Class count, or regression dimensions (≤ image channels).
    std::size_t outputs = 10;
    std::uint64_t transform_seed = 0;
};

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t numel() const { return channels * height * width; }
};

struct DataConfig {
    std::vector<TaskSpec> tasks;
    std::size_t n_per_task = 512;
    std::size_t test_per_task = 256;
    ImageShape image;
    std::uint64_t master_seed = 0;
    /// Scales inter-task differences: transform magnitude for domain_het,
    /// the share of task-private prototype structure for multi_input_het.
    double heterogeneity = 1.0;
    /// Per-pixel Gaussian noise standard deviation.
    double noise = 0.5;
    /// Gaussian blobs per class prototype.
    std::size_t blobs_per_class = 3;
    /// Per-sample blob position jitter, as a fraction of the image size.
    double jitter = 0.08;

    /// T tasks of one mode with ids 0..T−1 and derived transform seeds.
    static DataConfig uniform(HeterogeneityMode mode, std::size_t tasks, std::size_t classes,
                              std::uint64_t master_seed);
    void validate() const;
};

/// One task's samples for one split: inputs [n×C×H×W], targets [n×width].
struct TaskSplit {
    std::vector<float> inputs;
    std::vector<float> targets;
    std::size_t count = 0;
    std::size_t target_width = 1;
};

class Dataset {
public:
    Dataset(DataConfig config, std::vector<TaskSplit> train, std::vector<TaskSplit> test);

    const DataConfig& config() const { return config_; }
    std::size_t task_count() const { return config_.tasks.size(); }
    const TaskSpec& task(std::size_t t) const { return config_.tasks.at(t); }
    const ImageShape& image() const { return config_.image; }
    const TaskSplit& split(Split s, std::size_t task) const;
    std::size_t size(Split s) const;

    /// Writes manifest.json and the raw arrays into `dir` (created if needed).
    void save(const std::filesystem::path& dir) const;
    static Dataset load(const std::filesystem::path& dir);

private:
    DataConfig config_;
    std::vector<TaskSplit> train_;
    std::vector<TaskSplit> test_;
};

/// Deterministic function of the configuration.
Dataset generate(const DataConfig& config);
/// generate() followed by save().
Dataset generate(const DataConfig& config, const std::filesystem::path& dir);

/// Per-task slice of a mixed batch.
struct TaskTargets {
    std::vector<std::size_t> rows;         // positions in the batch
    std::vector<std::size_t> labels;       // classification
    std::vector<float> values;             // regression, rows.size() × width
    std::size_t width = 1;
    bool empty() const { return rows.empty(); }
};

struct TaskBatch {
    TensorF inputs;                        // b×C×H×W
    std::vector<std::size_t> task_ids;     // per row
    std::vector<std::size_t> sample_ids;   // global index within the split
    std::vector<TaskTargets> targets;      // one entry per task, possibly empty
    std::optional<TaskIdentifierMatrix<float>> tasks;
    bool epoch_end = false;

    std::size_t size() const { return task_ids.size(); }
    const TaskIdentifierMatrix<float>& task_matrix() const;
};

/// Mixed-task mini-batches over one split. Each epoch visits every sample
/// exactly once in an order drawn from (shuffle_seed, epoch); the final batch
/// of an epoch may be smaller and carries epoch_end = true.
class BatchIterator {
public:
    BatchIterator(const Dataset& dataset, Split split, std::size_t batch_size, std::uint64_t shuffle_seed,
                  bool shuffle = true);

    TaskBatch next();
    std::size_t epoch() const { return epoch_; }
    std::size_t batches_per_epoch() const;

private:
    void start_epoch();

    const Dataset* dataset_;
    Split split_;
    std::size_t batch_size_;
    std::uint64_t shuffle_seed_;
    bool shuffle_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::pair<std::size_t, std::size_t>> order_;  // (task, index)
};

/// Builds a batch from explicit (task, index) pairs.
TaskBatch make_batch(const Dataset& dataset, Split split, const std::vector<std::pair<std::size_t, std::size_t>>& items);

}  // namespace mola
