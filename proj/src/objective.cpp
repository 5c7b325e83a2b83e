// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/objective.hpp"

#include <fmt/format.h>

#include <cmath>
#include <set>
#include <sstream>

#include "mola/io.hpp"
#include "mola/ops.hpp"

namespace mola {

template <typename T>
Tensor<T> total_loss(std::span<const Tensor<T>> task_losses, const Tensor<T>& twd, double beta) {
    if (task_losses.empty()) {
        throw ContractError("total_loss needs at least one task loss");
    }
    if (!(beta >= 0.0)) {
        throw ConfigError(fmt::format("total_loss: beta must be nonnegative, got {}", beta));
    }
    Tensor<T> acc = task_losses.front();
    for (std::size_t i = 1; i < task_losses.size(); ++i) {
        acc = add(acc, task_losses[i]);
    }
    acc = scale(acc, static_cast<T>(1.0 / static_cast<double>(task_losses.size())));
    if (twd.defined() && beta != 0.0) {
        acc = add(acc, scale(twd, static_cast<T>(beta)));
    }
    return acc;
}

template <typename T>
std::vector<std::optional<Tensor<T>>> per_task_losses(const TaskBatch& batch, const std::vector<Tensor<T>>& predictions,
                                                      std::span<const LossKind> kinds) {
    const std::size_t tasks = batch.targets.size();
    if (predictions.size() != tasks || kinds.size() != tasks) {
        throw DimensionError(fmt::format("per_task_losses: {} tasks, {} predictions, {} loss kinds", tasks,
                                         predictions.size(), kinds.size()));
    }
    std::vector<std::optional<Tensor<T>>> losses(tasks);
    for (std::size_t t = 0; t < tasks; ++t) {
        const auto& target = batch.targets[t];
        if (target.empty()) continue;
        const auto& pred = predictions[t];
        if (!pred.defined()) {
            throw ContractError(fmt::format("task {} has {} samples but no predictions", t, target.rows.size()));
        }
        if (pred.rank() != 2 || pred.dim(0) != target.rows.size()) {
            throw DimensionError(fmt::format("task {}: predictions {} for {} samples", t, shape_str(pred.shape()),
                                             target.rows.size()));
        }
        if (kinds[t] == LossKind::cross_entropy) {
            losses[t] = cross_entropy_with_logits(pred, std::span<const std::size_t>(target.labels));
        } else {
            if (pred.dim(1) != target.width) {
                throw DimensionError(fmt::format("task {}: predictions {} for regression width {}", t,
                                                 shape_str(pred.shape()), target.width));
            }
            std::vector<T> values(target.values.begin(), target.values.end());
            losses[t] = mse(pred, Tensor<T>::from(pred.shape(), std::move(values)));
        }
    }
    return losses;
}

template <typename T>
std::vector<Tensor<T>> present_losses(const std::vector<std::optional<Tensor<T>>>& losses) {
    std::vector<Tensor<T>> out;
    for (const auto& l : losses) {
        if (l) out.push_back(*l);
    }
    return out;
}

template Tensor<float> total_loss(std::span<const Tensor<float>>, const Tensor<float>&, double);
template Tensor<double> total_loss(std::span<const Tensor<double>>, const Tensor<double>&, double);
template std::vector<std::optional<Tensor<float>>> per_task_losses(const TaskBatch&, const std::vector<Tensor<float>>&,
                                                                   std::span<const LossKind>);
template std::vector<std::optional<Tensor<double>>> per_task_losses(const TaskBatch&,
                                                                    const std::vector<Tensor<double>>&,
                                                                    std::span<const LossKind>);
template std::vector<Tensor<float>> present_losses(const std::vector<std::optional<Tensor<float>>>&);
template std::vector<Tensor<double>> present_losses(const std::vector<std::optional<Tensor<double>>>&);

// ---- MetricTable ------------------------------------------------------------

void MetricTable::set(const MetricRow& row) { rows_[{row.method, row.task, row.metric}] = row; }

std::optional<MetricRow> MetricTable::get(const std::string& method, const std::string& task,
                                          const std::string& metric) const {
    auto it = rows_.find({method, task, metric});
    if (it == rows_.end()) return std::nullopt;
    return it->second;
}

std::vector<MetricRow> MetricTable::rows() const {
    std::vector<MetricRow> out;
    for (const auto& [key, row] : rows_) out.push_back(row);
    return out;
}

std::vector<MetricRow> MetricTable::rows_for(const std::string& method) const {
    std::vector<MetricRow> out;
    for (const auto& [key, row] : rows_) {
        if (row.method == method) out.push_back(row);
    }
    return out;
}

void MetricTable::merge(const MetricTable& other) {
    for (const auto& [key, row] : other.rows_) rows_[key] = row;
}

std::string MetricTable::to_csv() const {
    std::string out = "method,task,metric,value,sign\n";
    for (const auto& [key, row] : rows_) {
        out += fmt::format("{},{},{},{:.17g},{}\n", row.method, row.task, row.metric, row.value, row.sign);
    }
    return out;
}

MetricTable MetricTable::from_csv(const std::string& text) {
    MetricTable table;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || split_csv_line(line) !=
                                       std::vector<std::string>{"method", "task", "metric", "value", "sign"}) {
        throw DataError("metric table CSV must start with header method,task,metric,value,sign");
    }
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != 5) {
            throw DataError(fmt::format("metric table line {}: expected 5 fields, got {}", lineno, f.size()));
        }
        MetricRow row{f[0], f[1], f[2], 0.0, 1};
        try {
            row.value = std::stod(f[3]);
            row.sign = std::stoi(f[4]);
        } catch (const std::exception&) {
            throw DataError(fmt::format("metric table line {}: unparsable value or sign", lineno));
        }
        if (row.sign != 0 && row.sign != 1) {
            throw DataError(fmt::format("metric table line {}: sign must be 0 or 1", lineno));
        }
        table.set(row);
    }
    return table;
}

void MetricTable::save(const std::filesystem::path& path) const { write_text(path, to_csv()); }

MetricTable MetricTable::load(const std::filesystem::path& path) { return from_csv(read_text(path)); }

// ---- Δm ---------------------------------------------------------------------

double delta_m(const MetricTable& table, const std::string& method, const std::string& baseline,
               DeltaMConvention convention) {
    std::map<std::string, std::pair<double, std::size_t>> per_task;  // task -> (Σ_k term, n_t)
    for (const auto& row : table.rows_for(method)) {
        if (row.task == kAggregateTask) continue;
        const auto base = table.get(baseline, row.task, row.metric);
        if (!base) {
            throw DataError(fmt::format("no baseline '{}' entry for task {} metric {}", baseline, row.task, row.metric));
        }
        if (base->value == 0.0) {
            throw NumericError(
                fmt::format("baseline '{}' is zero for task {} metric {}; relative change undefined", baseline,
                            row.task, row.metric));
        }
        const double relative = (row.value - base->value) / base->value;
        auto& [acc, count] = per_task[row.task];
        acc += (row.sign == 1 ? -relative : relative);
        ++count;
    }
    if (per_task.empty()) {
        throw DataError(fmt::format("no metric rows for method '{}'", method));
    }
    double total = 0.0;
    for (const auto& [task, entry] : per_task) {
        const auto& [acc, count] = entry;
        total += convention == DeltaMConvention::summed ? acc : acc / static_cast<double>(count);
    }
    return 100.0 * total / static_cast<double>(per_task.size());
}

}  // namespace mola
