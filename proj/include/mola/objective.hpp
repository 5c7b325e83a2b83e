// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mola/data.hpp"
#include "mola/tensor.hpp"

namespace mola {

enum class LossKind { cross_entropy, mse };

struct TaskLossSpec {
    std::size_t task_id = 0;
    LossKind kind = LossKind::cross_entropy;
    /// σ_tk per metric: 1 if higher is better, 0 otherwise.
    std::vector<int> metric_signs;
};

/// (1/T)·Σ L_i + β·L_TwD over the supplied task losses. `twd` may be
/// undefined, in which case the second term is dropped.
template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> task_losses, const Tensor<T>& twd, double beta);

/// Mean loss over each task's rows. `predictions[t]` holds the outputs for
/// batch.targets[t].rows (in that order); tasks absent from the batch yield
/// std::nullopt and must not be counted in the task average.
template <typename T>
std::vector<std::optional<Tensor<T>>> per_task_losses(const TaskBatch& batch,
                                                      const std::vector<Tensor<T>>& predictions,
                                                      std::span<const LossKind> kinds);

/// Keeps only the tasks present in the batch.
template <typename T>
std::vector<Tensor<T>> present_losses(const std::vector<std::optional<Tensor<T>>>& losses);

struct MetricRow {
    std::string method;
    std::string task;
    std::string metric;
    double value = 0.0;
    int sign = 1;  // σ: 1 if higher is better
};

/// Results keyed by (method, task, metric). CSV header: method,task,metric,value,sign.
class MetricTable {
public:
    using Key = std::tuple<std::string, std::string, std::string>;

    void set(const MetricRow& row);
    std::optional<MetricRow> get(const std::string& method, const std::string& task, const std::string& metric) const;
    std::vector<MetricRow> rows() const;
    std::vector<MetricRow> rows_for(const std::string& method) const;
    bool empty() const { return rows_.empty(); }

    /// Appends every row of `other`, overwriting equal keys.
    void merge(const MetricTable& other);

    std::string to_csv() const;
    static MetricTable from_csv(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static MetricTable load(const std::filesystem::path& path);

private:
    std::map<Key, MetricRow> rows_;
};

/// Task label excluded from Δm; used for cross-task averages in reports.
inline constexpr const char* kAggregateTask = "*";

enum class DeltaMConvention {
    /// Σ_k over a task's metrics, as the formula is written.
    summed,
    /// Σ_k divided by the task's metric count n_t before averaging over tasks.
    per_metric_mean,
};

/// Δm = (1/T)·Σ_t Σ_k (−1)^{σ_tk}·(M_m − M_b)/M_b, ×100 (percent, lower is better).
/// Every (task, metric) of `method` other than the aggregate task needs a
/// baseline entry (DataError if missing, NumericError if zero).
double delta_m(const MetricTable& table, const std::string& method, const std::string& baseline,
               DeltaMConvention convention = DeltaMConvention::per_metric_mean);

}  // namespace mola
