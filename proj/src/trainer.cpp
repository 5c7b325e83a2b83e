// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/trainer.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "mola/config.hpp"
#include "mola/io.hpp"
#include "mola/ops.hpp"
#include "mola/router.hpp"

namespace mola {

using json = nlohmann::json;

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    throw ConfigError(fmt::format("unknown optimizer '{}' (expected sgd or adam)", name));
}

void TrainConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError(fmt::format("learning rate must be finite and >= 0, got {}", lr));
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(beta >= 0.0)) throw ConfigError(fmt::format("TwD weight beta must be nonnegative, got {}", beta));
    if (!(tau > 0.0)) throw ConfigError(fmt::format("TwD temperature must be positive, got {}", tau));
}

// ---- optimizers -------------------------------------------------------------

template <typename T>
Optimizer<T>::Optimizer(std::vector<Tensor<T>> params, const TrainConfig& config)
    : params_(std::move(params)), config_(config) {
    config_.validate();
    for (const auto& p : params_) {
        first_.emplace_back(p.numel(), 0.0);
        if (config_.optimizer == OptimizerKind::adam) second_.emplace_back(p.numel(), 0.0);
    }
}

template <typename T>
void Optimizer<T>::step() {
    ++steps_;
    const double lr = config_.lr;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) continue;
        const T* g = p.grad().data();
        T* w = p.mutable_data().data();
        auto& m = first_[i];
        if (config_.optimizer == OptimizerKind::sgd) {
            for (std::size_t k = 0; k < p.numel(); ++k) {
                m[k] = config_.momentum * m[k] + g[k];
                w[k] = static_cast<T>(w[k] - lr * m[k]);
            }
        } else {
            auto& v = second_[i];
            for (std::size_t k = 0; k < p.numel(); ++k) {
                m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
                v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
                w[k] = static_cast<T>(w[k] - lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config_.eps));
            }
        }
    }
}

template <typename T>
void Optimizer<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

template class Optimizer<float>;
template class Optimizer<double>;

// ---- trainer ----------------------------------------------------------------

namespace {

std::vector<Tensor<float>> trainable(const Model<float>& model, const TrainConfig& cfg) {
    if (!cfg.freeze_backbone) return model.parameters();
    std::vector<Tensor<float>> out = model.adapter_parameters();
    for (auto& p : model.router_parameters()) out.push_back(p);
    for (auto& p : model.head_parameters()) out.push_back(p);
    return out;
}

std::size_t argmax_row(const float* row, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

}  // namespace

Trainer::Trainer(Model<float>& model, const TrainConfig& config)
    : model_(&model), config_(config), optimizer_(trainable(model, config), config) {
    for (const auto& h : model.config().heads) kinds_.push_back(h.kind);
}

StepStats Trainer::forward_loss(const TaskBatch& batch, Tensor<float>* loss) const {
    if (batch.targets.size() != model_->tasks()) {
        throw DataError(fmt::format("batch has {} tasks but the model has {} heads", batch.targets.size(),
                                    model_->tasks()));
    }
    auto out = model_->forward(batch.inputs, batch.task_ids, true);
    auto losses = per_task_losses<float>(batch, out.predictions, kinds_);
    auto present = present_losses(losses);

    Tensor<float> twd;
    if (!out.alphas.empty() && config_.beta > 0.0 && batch.size() >= 2) {
        for (std::size_t r = 0; r < out.alphas.size(); ++r) {
            auto term = twd_loss(model_->omega(out.alphas[r], r), std::span<const std::size_t>(batch.task_ids),
                                 config_.tau);
            twd = twd.defined() ? add(twd, term) : term;
        }
        if (out.alphas.size() > 1) twd = scale(twd, 1.0f / static_cast<float>(out.alphas.size()));
    }
    auto total = total_loss<float>(present, twd, config_.beta);

    StepStats stats;
    stats.loss = total.item();
    stats.twd = twd.defined() ? twd.item() : 0.0;
    stats.task_loss.resize(losses.size());
    stats.task_count.assign(losses.size(), 0);
    stats.task_correct.assign(losses.size(), 0);
    for (std::size_t t = 0; t < losses.size(); ++t) {
        if (!losses[t]) continue;
        stats.task_loss[t] = losses[t]->item();
        const auto& target = batch.targets[t];
        stats.task_count[t] = target.rows.size();
        if (kinds_[t] == LossKind::cross_entropy) {
            const auto& pred = out.predictions[t];
            const std::size_t c = pred.dim(1);
            for (std::size_t i = 0; i < target.rows.size(); ++i) {
                if (argmax_row(pred.data().data() + i * c, c) == target.labels[i]) ++stats.task_correct[t];
            }
        }
    }
    if (loss) *loss = total;
    return stats;
}

StepStats Trainer::step(const TaskBatch& batch) {
    Tensor<float> loss;
    auto stats = forward_loss(batch, &loss);
    if (!std::isfinite(stats.loss)) {
        throw NumericError(fmt::format("non-finite loss {} at step {} (train seed {}, sample ids [{}])", stats.loss,
                                       optimizer_.steps(), config_.seed, fmt::join(batch.sample_ids, ",")));
    }
    optimizer_.zero_grad();
    backward(loss);
    optimizer_.step();
    return stats;
}

StepStats Trainer::measure(const TaskBatch& batch) const {
    NoGradGuard guard;
    return forward_loss(batch, nullptr);
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::string out = "epoch,task,metric,value\n";
    for (const auto& r : rows) out += fmt::format("{},{},{},{:.9g}\n", r.epoch, r.task, r.metric, r.value);
    return out;
}

std::string task_name(std::size_t t) { return fmt::format("task{}", t); }

TrainResult train(Model<float>& model, const Dataset& dataset, const TrainConfig& config) {
    config.validate();
    if (dataset.task_count() != model.tasks()) {
        throw DataError(fmt::format("dataset has {} tasks but the model has {} heads", dataset.task_count(),
                                    model.tasks()));
    }
    Trainer trainer(model, config);
    const std::uint64_t shuffle_seed = Rng::splitmix(config.seed ^ 0x5eed5eedULL);
    const std::size_t batch = std::min(config.batch_size, dataset.size(Split::train));
    BatchIterator it(dataset, Split::train, batch, shuffle_seed);
    TrainResult result;
    const std::size_t T = dataset.task_count();
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<double> loss_sum(T, 0.0);
        std::vector<std::size_t> count(T, 0), correct(T, 0);
        double total = 0.0, twd = 0.0;
        std::size_t batches = 0;
        while (true) {
            auto b = it.next();
            StepStats s;
            try {
                s = trainer.step(b);
            } catch (const NumericError& e) {
                throw NumericError(fmt::format("epoch {}, shuffle seed {}: {}", epoch, shuffle_seed, e.what()));
            }
            for (std::size_t t = 0; t < T; ++t) {
                if (!s.task_loss[t]) continue;
                loss_sum[t] += *s.task_loss[t] * static_cast<double>(s.task_count[t]);
                count[t] += s.task_count[t];
                correct[t] += s.task_correct[t];
            }
            total += s.loss;
            twd += s.twd;
            ++batches;
            if (b.epoch_end) break;
        }
        for (std::size_t t = 0; t < T; ++t) {
            if (count[t] == 0) continue;
            result.history.push_back({epoch, task_name(t), "train_loss", loss_sum[t] / static_cast<double>(count[t])});
            if (dataset.task(t).kind == TargetKind::classification) {
                result.history.push_back(
                    {epoch, task_name(t), "train_accuracy", 100.0 * static_cast<double>(correct[t]) / count[t]});
            }
        }
        result.history.push_back({epoch, kAggregateTask, "loss", total / static_cast<double>(batches)});
        if (model.config().mode == ModelMode::router) {
            result.history.push_back({epoch, kAggregateTask, "twd", twd / static_cast<double>(batches)});
        }
        result.final_loss = total / static_cast<double>(batches);
        if (config.eval_every != 0 && epoch % config.eval_every == 0 && dataset.size(Split::test) > 0) {
            const auto table = evaluate(model, dataset, Split::test, model.config().mode == ModelMode::grad, "current");
            for (const auto& row : table.rows()) {
                result.history.push_back({epoch, row.task, "test_" + row.metric, row.value});
            }
        }
    }
    result.steps = trainer.steps();
    return result;
}

// ---- evaluation -------------------------------------------------------------

MetricTable evaluate(const Model<float>& model, const Dataset& dataset, Split split, bool task_id_available,
                     const std::string& method, std::size_t batch_size) {
    if (model.config().mode == ModelMode::grad && !task_id_available) {
        throw ContractError(
            "MoLA-Grad is target-aware: evaluation needs task ids (pass --task-ids); only router and none modes "
            "run without them");
    }
    if (dataset.task_count() != model.tasks()) {
        throw DataError(fmt::format("dataset has {} tasks but the model has {} heads", dataset.task_count(),
                                    model.tasks()));
    }
    if (batch_size == 0) throw ConfigError("evaluation batch size must be positive");
    NoGradGuard guard;
    MetricTable table;
    double acc_sum = 0.0, mse_sum = 0.0;
    std::size_t acc_tasks = 0, mse_tasks = 0;
    for (std::size_t t = 0; t < dataset.task_count(); ++t) {
        const std::size_t n = dataset.split(split, t).count;
        if (n == 0) continue;
        const bool cls = dataset.task(t).kind == TargetKind::classification;
        std::size_t correct = 0;
        double sq = 0.0;
        for (std::size_t start = 0; start < n; start += batch_size) {
            std::vector<std::pair<std::size_t, std::size_t>> items;
            for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) items.emplace_back(t, i);
            auto b = make_batch(dataset, split, items);
            auto out = model.forward(b.inputs, b.task_ids, task_id_available);
            const auto& pred = out.predictions[t];
            const auto& target = b.targets[t];
            const std::size_t c = pred.dim(1);
            const auto p = pred.data();
            for (std::size_t i = 0; i < items.size(); ++i) {
                if (cls) {
                    if (argmax_row(p.data() + i * c, c) == target.labels[i]) ++correct;
                } else {
                    for (std::size_t k = 0; k < c; ++k) {
                        const double d = static_cast<double>(p[i * c + k]) - target.values[i * c + k];
                        sq += d * d;
                    }
                }
            }
        }
        if (cls) {
            const double acc = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
            table.set({method, task_name(t), "accuracy", acc, 1});
            acc_sum += acc;
            ++acc_tasks;
        } else {
            const double m = sq / static_cast<double>(n * dataset.split(split, t).target_width);
            table.set({method, task_name(t), "mse", m, 0});
            mse_sum += m;
            ++mse_tasks;
        }
    }
    if (acc_tasks) table.set({method, kAggregateTask, "mean_accuracy", acc_sum / acc_tasks, 1});
    if (mse_tasks) table.set({method, kAggregateTask, "mean_mse", mse_sum / mse_tasks, 0});
    return table;
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model, const TrainConfig& train) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError(fmt::format("cannot create checkpoint directory {}: {}", dir.string(), ec.message()));
    const json config{{"model", model_config_to_json(model.config())}, {"train", train_config_to_json(train)}};
    json params = json::array();
    const auto tensors = model.parameters();
    const auto names = model.parameter_names();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const std::string file = names[i] + ".bin";
        write_f32(dir / file, tensors[i].data());
        params.push_back({{"name", names[i]}, {"shape", tensors[i].shape()}, {"file", file}});
    }
    const json manifest{{"format", "mola-checkpoint-v1"},
                        {"dtype", "float32-le"},
                        {"config", config},
                        {"config_hash", config_hash(config)},
                        {"parameters", params}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    json manifest;
    try {
        manifest = json::parse(read_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw DataError(fmt::format("checkpoint {}: malformed manifest: {}", dir.string(), e.what()));
    }
    try {
        if (manifest.at("format") != "mola-checkpoint-v1") {
            throw DataError(fmt::format("checkpoint {}: unsupported format", dir.string()));
        }
        const auto& config = manifest.at("config");
        const std::string hash = manifest.at("config_hash").get<std::string>();
        if (hash != config_hash(config)) {
            throw DataError(fmt::format("checkpoint {}: config hash mismatch", dir.string()));
        }
        Checkpoint ck{Model<float>::build(model_config_from_json(config.at("model"))),
                      train_config_from_json(config.at("train")), hash};
        auto tensors = ck.model.parameters();
        const auto names = ck.model.parameter_names();
        const auto& entries = manifest.at("parameters");
        if (entries.size() != tensors.size()) {
            throw DataError(fmt::format("checkpoint {}: {} parameters stored, model has {}", dir.string(),
                                        entries.size(), tensors.size()));
        }
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& e = entries[i];
            if (e.at("name").get<std::string>() != names[i] || e.at("shape").get<Shape>() != tensors[i].shape()) {
                throw DataError(fmt::format("checkpoint {}: parameter {} does not match {} {}", dir.string(), i,
                                            names[i], shape_str(tensors[i].shape())));
            }
            const auto values = read_f32(dir / e.at("file").get<std::string>());
            if (values.size() != tensors[i].numel()) {
                throw DataError(fmt::format("checkpoint {}: {} holds {} values, expected {}", dir.string(),
                                            e.at("file").get<std::string>(), values.size(), tensors[i].numel()));
            }
            std::copy(values.begin(), values.end(), tensors[i].mutable_data().begin());
        }
        return ck;
    } catch (const json::exception& e) {
        throw DataError(fmt::format("checkpoint {}: {}", dir.string(), e.what()));
    }
}

// ---- ω export ---------------------------------------------------------------

std::vector<OmegaRecord> omega_embeddings(const Model<float>& model, const Dataset& dataset, Split split,
                                          std::size_t router, std::size_t batch_size) {
    if (model.config().mode != ModelMode::router) {
        throw ContractError("ω embeddings exist only for router-mode models");
    }
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    NoGradGuard guard;
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t t = 0; t < dataset.task_count(); ++t) {
        for (std::size_t i = 0; i < dataset.split(split, t).count; ++i) all.emplace_back(t, i);
    }
    std::vector<OmegaRecord> out;
    for (std::size_t start = 0; start < all.size(); start += batch_size) {
        std::vector<std::pair<std::size_t, std::size_t>> items(
            all.begin() + static_cast<std::ptrdiff_t>(start),
            all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), start + batch_size)));
        auto b = make_batch(dataset, split, items);
        const auto alpha = model.router(router).route(b.inputs);
        const auto omega = model.omega(alpha, router);
        const std::size_t d = omega.dim(1);
        for (std::size_t i = 0; i < b.size(); ++i) {
            const auto* row = omega.data().data() + i * d;
            out.push_back({b.sample_ids[i], b.task_ids[i], std::vector<float>(row, row + d)});
        }
    }
    return out;
}

std::string omega_csv(const std::vector<OmegaRecord>& records) {
    std::string out = "sample_id,task_id";
    const std::size_t d = records.empty() ? 0 : records.front().omega.size();
    for (std::size_t k = 0; k < d; ++k) out += fmt::format(",omega{}", k);
    out += "\n";
    for (const auto& r : records) {
        out += fmt::format("{},{}", r.sample_id, r.task_id);
        for (float v : r.omega) out += fmt::format(",{:.9g}", v);
        out += "\n";
    }
    return out;
}

SeparationStats omega_separation(const std::vector<OmegaRecord>& records) {
    if (records.empty()) throw DataError("no ω records");
    const std::size_t d = records.front().omega.size();
    std::vector<float> flat;
    std::vector<std::size_t> ids;
    for (const auto& r : records) {
        flat.insert(flat.end(), r.omega.begin(), r.omega.end());
        ids.push_back(r.task_id);
    }
    return omega_separation(TensorF::from({records.size(), d}, std::move(flat)), std::span<const std::size_t>(ids));
}

}  // namespace mola
