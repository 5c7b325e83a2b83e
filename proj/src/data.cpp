// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mola/data.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "mola/io.hpp"
#include "mola/random.hpp"

namespace mola {

using json = nlohmann::json;

std::string to_string(HeterogeneityMode mode) {
    switch (mode) {
        case HeterogeneityMode::domain_het: return "domain_het";
        case HeterogeneityMode::multi_input_het: return "multi_input_het";
        case HeterogeneityMode::single_input_het: return "single_input_het";
    }
    return "?";
}

HeterogeneityMode heterogeneity_mode_from_string(const std::string& name) {
    if (name == "domain_het") return HeterogeneityMode::domain_het;
    if (name == "multi_input_het") return HeterogeneityMode::multi_input_het;
    if (name == "single_input_het") return HeterogeneityMode::single_input_het;
    throw ConfigError(fmt::format("unknown heterogeneity mode '{}'", name));
}

std::string to_string(TargetKind kind) { return kind == TargetKind::classification ? "classification" : "regression"; }

TargetKind target_kind_from_string(const std::string& name) {
    if (name == "classification") return TargetKind::classification;
    if (name == "regression") return TargetKind::regression;
    throw ConfigError(fmt::format("unknown target kind '{}'", name));
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

// ---- configuration ----------------------------------------------------------

DataConfig DataConfig::uniform(HeterogeneityMode mode, std::size_t tasks, std::size_t classes,
                               std::uint64_t master_seed) {
    DataConfig config;
    config.master_seed = master_seed;
    for (std::size_t t = 0; t < tasks; ++t) {
        TaskSpec spec;
        spec.task_id = t;
        spec.mode = mode;
        spec.outputs = classes;
        spec.transform_seed = Rng::splitmix(master_seed * 1000003ULL + t + 1);
        if (mode == HeterogeneityMode::single_input_het && t % 2 == 1) {
            spec.kind = TargetKind::regression;
            spec.outputs = 1;
        }
        config.tasks.push_back(spec);
    }
    return config;
}

void DataConfig::validate() const {
    if (tasks.empty()) {
        throw ConfigError("dataset needs at least one task");
    }
    if (n_per_task == 0) {
        throw ConfigError("n_per_task must be at least 1");
    }
    if (image.channels == 0 || image.height == 0 || image.width == 0) {
        throw ConfigError("image dimensions must be positive");
    }
    if (!(noise >= 0.0) || !(heterogeneity >= 0.0) || !(jitter >= 0.0) || blobs_per_class == 0) {
        throw ConfigError("noise, heterogeneity and jitter must be nonnegative; blobs_per_class positive");
    }
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& spec = tasks[t];
        if (spec.task_id != t) {
            throw ConfigError(fmt::format("task {} declared with id {}; ids must be 0..T-1 in order", t, spec.task_id));
        }
        if (spec.mode != tasks.front().mode) {
            throw ConfigError("all tasks of a dataset must share one heterogeneity mode");
        }
        if (spec.outputs == 0) {
            throw ConfigError(fmt::format("task {} has zero outputs", t));
        }
        if (spec.kind == TargetKind::regression) {
            if (spec.mode != HeterogeneityMode::single_input_het) {
                throw ConfigError(fmt::format("task {}: regression targets exist only in single_input_het", t));
            }
            if (spec.outputs > image.channels) {
                throw ConfigError(fmt::format("task {}: {} regression dims exceed {} channels", t, spec.outputs,
                                              image.channels));
            }
        } else if (spec.outputs < 2) {
            throw ConfigError(fmt::format("task {}: classification needs at least 2 classes", t));
        }
        if (spec.mode == HeterogeneityMode::domain_het && spec.outputs != tasks.front().outputs) {
            throw ConfigError("domain_het tasks share one label space; class counts must match");
        }
    }
}

// ---- rendering --------------------------------------------------------------

namespace {

struct Blob {
    double cx, cy, sigma;
    std::vector<double> color;
};

using Prototype = std::vector<Blob>;

struct Transform {
    std::vector<double> color_matrix;  // C×C, row-major
    std::vector<double> color_bias;    // C
    double shift_x = 0.0, shift_y = 0.0;
    bool flip = false;

    static Transform identity(std::size_t channels) {
        Transform t;
        t.color_matrix.assign(channels * channels, 0.0);
        for (std::size_t c = 0; c < channels; ++c) t.color_matrix[c * channels + c] = 1.0;
        t.color_bias.assign(channels, 0.0);
        return t;
    }
};

Blob random_blob(Rng& rng, std::size_t channels) {
    Blob b;
    b.cx = rng.uniform(0.15, 0.85);
    b.cy = rng.uniform(0.15, 0.85);
    b.sigma = rng.uniform(0.06, 0.16);
    b.color.resize(channels);
    for (auto& c : b.color) c = rng.normal();
    return b;
}

std::vector<Prototype> random_prototypes(Rng& rng, std::size_t classes, std::size_t channels, std::size_t blobs) {
    std::vector<Prototype> protos(classes);
    for (auto& p : protos) {
        for (std::size_t i = 0; i < blobs; ++i) p.push_back(random_blob(rng, channels));
    }
    return protos;
}

Transform random_transform(Rng& rng, std::size_t channels, double strength) {
    Transform t = Transform::identity(channels);
    for (auto& m : t.color_matrix) m += strength * rng.normal(0.0, 0.4);
    for (auto& b : t.color_bias) b = strength * rng.normal(0.0, 0.3);
    t.shift_x = strength * rng.uniform(-0.2, 0.2);
    t.shift_y = strength * rng.uniform(-0.2, 0.2);
    t.flip = rng.uniform() < 0.5 * std::min(strength, 1.0);
    return t;
}

void render(const Prototype& proto, const Transform& transform, const DataConfig& cfg, Rng& rng, float* out) {
    const auto& img = cfg.image;
    const std::size_t C = img.channels, H = img.height, W = img.width;
    std::vector<double> canvas(C * H * W, 0.0);
    for (const auto& blob : proto) {
        double cx = blob.cx + rng.normal(0.0, cfg.jitter);
        const double cy = blob.cy + rng.normal(0.0, cfg.jitter) + transform.shift_y;
        if (transform.flip) cx = 1.0 - cx;
        cx += transform.shift_x;
        const double amplitude = rng.uniform(0.8, 1.2);
        const double inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
        for (std::size_t y = 0; y < H; ++y) {
            const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H) - cy;
            for (std::size_t x = 0; x < W; ++x) {
                const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W) - cx;
                const double g = amplitude * std::exp(-(px * px + py * py) * inv);
                for (std::size_t c = 0; c < C; ++c) canvas[(c * H + y) * W + x] += g * blob.color[c];
            }
        }
    }
    std::vector<double> pixel(C);
    for (std::size_t p = 0; p < H * W; ++p) {
        for (std::size_t c = 0; c < C; ++c) pixel[c] = canvas[c * H * W + p];
        for (std::size_t c = 0; c < C; ++c) {
            double v = transform.color_bias[c];
            for (std::size_t j = 0; j < C; ++j) v += transform.color_matrix[c * C + j] * pixel[j];
            out[c * H * W + p] = static_cast<float>(v + rng.normal(0.0, cfg.noise));
        }
    }
}

std::uint64_t stream_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
    return Rng::splitmix(Rng::splitmix(master ^ (0x51ed2701ULL * (a + 1))) ^ (0x2545f491ULL * (b + 1)));
}

constexpr std::uint64_t kSharedStream = 0xfffff;

// Class sequence i % classes keeps splits balanced; the iterator shuffles.
TaskSplit render_split(const std::vector<Prototype>& protos, const Transform& transform, const DataConfig& cfg,
                       std::size_t count, std::size_t classes, Rng& rng) {
    TaskSplit split;
    split.count = count;
    split.target_width = 1;
    split.inputs.resize(count * cfg.image.numel());
    split.targets.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t label = i % classes;
        render(protos[label], transform, cfg, rng, split.inputs.data() + i * cfg.image.numel());
        split.targets[i] = static_cast<float>(label);
    }
    return split;
}

}  // namespace

Dataset generate(const DataConfig& cfg) {
    cfg.validate();
    const std::size_t T = cfg.tasks.size();
    const std::size_t C = cfg.image.channels;
    std::vector<TaskSplit> train(T), test(T);
    const std::array<std::size_t, 2> counts{cfg.n_per_task, cfg.test_per_task};

    switch (cfg.tasks.front().mode) {
        case HeterogeneityMode::domain_het: {
            Rng proto_rng(stream_seed(cfg.master_seed, kSharedStream, 0));
            const std::size_t classes = cfg.tasks.front().outputs;
            const auto protos = random_prototypes(proto_rng, classes, C, cfg.blobs_per_class);
            for (std::size_t t = 0; t < T; ++t) {
                Rng transform_rng(cfg.tasks[t].transform_seed);
                const Transform transform = random_transform(transform_rng, C, cfg.heterogeneity);
                for (std::size_t s = 0; s < 2; ++s) {
                    Rng rng(stream_seed(cfg.master_seed, t, s));
                    (s == 0 ? train : test)[t] = render_split(protos, transform, cfg, counts[s], classes, rng);
                }
            }
            break;
        }
        case HeterogeneityMode::multi_input_het: {
            std::size_t max_classes = 0;
            for (const auto& spec : cfg.tasks) max_classes = std::max(max_classes, spec.outputs);
            Rng shared_rng(stream_seed(cfg.master_seed, kSharedStream, 0));
            const auto shared = random_prototypes(shared_rng, max_classes, C, cfg.blobs_per_class);
            const double private_share = std::min(cfg.heterogeneity, 1.0);
            const Transform identity = Transform::identity(C);
            for (std::size_t t = 0; t < T; ++t) {
                Rng task_rng(cfg.tasks[t].transform_seed);
                auto protos = random_prototypes(task_rng, cfg.tasks[t].outputs, C, cfg.blobs_per_class);
                for (std::size_t k = 0; k < protos.size(); ++k) {
                    for (std::size_t i = 0; i < protos[k].size(); ++i) {
                        if (task_rng.uniform() >= private_share) protos[k][i] = shared[k][i];
                    }
                }
                for (std::size_t s = 0; s < 2; ++s) {
                    Rng rng(stream_seed(cfg.master_seed, t, s));
                    (s == 0 ? train : test)[t] =
                        render_split(protos, identity, cfg, counts[s], cfg.tasks[t].outputs, rng);
                }
            }
            break;
        }
        case HeterogeneityMode::single_input_het: {
            std::size_t latent = 2;
            for (const auto& spec : cfg.tasks) {
                if (spec.kind == TargetKind::classification) latent = std::max(latent, spec.outputs);
            }
            Rng proto_rng(stream_seed(cfg.master_seed, kSharedStream, 0));
            const auto protos = random_prototypes(proto_rng, latent, C, cfg.blobs_per_class);
            const Transform identity = Transform::identity(C);
            for (std::size_t s = 0; s < 2; ++s) {
                Rng rng(stream_seed(cfg.master_seed, kSharedStream, s + 1));
                const TaskSplit shared = render_split(protos, identity, cfg, counts[s], latent, rng);
                const std::size_t pixels = cfg.image.height * cfg.image.width;
                for (std::size_t t = 0; t < T; ++t) {
                    const auto& spec = cfg.tasks[t];
                    TaskSplit split;
                    split.count = shared.count;
                    split.inputs = shared.inputs;
                    if (spec.kind == TargetKind::classification) {
                        // A fixed per-task relabelling of the latent class.
                        Rng perm_rng(spec.transform_seed);
                        std::vector<std::size_t> perm(latent);
                        std::iota(perm.begin(), perm.end(), 0);
                        for (std::size_t i = latent; i-- > 1;) std::swap(perm[i], perm[perm_rng.below(i + 1)]);
                        split.target_width = 1;
                        split.targets.resize(split.count);
                        for (std::size_t i = 0; i < split.count; ++i) {
                            const auto z = static_cast<std::size_t>(shared.targets[i]);
                            split.targets[i] = static_cast<float>(perm[z] % spec.outputs);
                        }
                    } else {
                        split.target_width = spec.outputs;
                        split.targets.resize(split.count * spec.outputs);
                        for (std::size_t i = 0; i < split.count; ++i) {
                            const float* img = shared.inputs.data() + i * cfg.image.numel();
                            for (std::size_t c = 0; c < spec.outputs; ++c) {
                                double acc = 0.0;
                                for (std::size_t p = 0; p < pixels; ++p) acc += img[c * pixels + p];
                                split.targets[i * spec.outputs + c] = static_cast<float>(acc / static_cast<double>(pixels));
                            }
                        }
                    }
                    (s == 0 ? train : test)[t] = std::move(split);
                }
            }
            break;
        }
    }
    return Dataset(cfg, std::move(train), std::move(test));
}

Dataset generate(const DataConfig& config, const std::filesystem::path& dir) {
    Dataset ds = generate(config);
    ds.save(dir);
    return ds;
}

// ---- Dataset ----------------------------------------------------------------

Dataset::Dataset(DataConfig config, std::vector<TaskSplit> train, std::vector<TaskSplit> test)
    : config_(std::move(config)), train_(std::move(train)), test_(std::move(test)) {
    if (train_.size() != config_.tasks.size() || test_.size() != config_.tasks.size()) {
        throw DataError("dataset split count does not match task count");
    }
}

const TaskSplit& Dataset::split(Split s, std::size_t task) const {
    const auto& v = s == Split::train ? train_ : test_;
    if (task >= v.size()) {
        throw DataError(fmt::format("task {} not in dataset with {} tasks", task, v.size()));
    }
    return v[task];
}

std::size_t Dataset::size(Split s) const {
    std::size_t n = 0;
    for (const auto& t : (s == Split::train ? train_ : test_)) n += t.count;
    return n;
}

namespace {

json config_to_json(const DataConfig& cfg) {
    json tasks = json::array();
    for (const auto& t : cfg.tasks) {
        tasks.push_back({{"task_id", t.task_id},
                         {"mode", to_string(t.mode)},
                         {"kind", to_string(t.kind)},
                         {"outputs", t.outputs},
                         {"transform_seed", t.transform_seed}});
    }
    return {{"tasks", tasks},
            {"n_per_task", cfg.n_per_task},
            {"test_per_task", cfg.test_per_task},
            {"image", {cfg.image.channels, cfg.image.height, cfg.image.width}},
            {"master_seed", cfg.master_seed},
            {"heterogeneity", cfg.heterogeneity},
            {"noise", cfg.noise},
            {"blobs_per_class", cfg.blobs_per_class},
            {"jitter", cfg.jitter}};
}

DataConfig config_from_json(const json& j) {
    DataConfig cfg;
    for (const auto& t : j.at("tasks")) {
        TaskSpec spec;
        spec.task_id = t.at("task_id").get<std::size_t>();
        spec.mode = heterogeneity_mode_from_string(t.at("mode").get<std::string>());
        spec.kind = target_kind_from_string(t.at("kind").get<std::string>());
        spec.outputs = t.at("outputs").get<std::size_t>();
        spec.transform_seed = t.at("transform_seed").get<std::uint64_t>();
        cfg.tasks.push_back(spec);
    }
    cfg.n_per_task = j.at("n_per_task").get<std::size_t>();
    cfg.test_per_task = j.at("test_per_task").get<std::size_t>();
    const auto& img = j.at("image");
    cfg.image = {img.at(0).get<std::size_t>(), img.at(1).get<std::size_t>(), img.at(2).get<std::size_t>()};
    cfg.master_seed = j.at("master_seed").get<std::uint64_t>();
    cfg.heterogeneity = j.at("heterogeneity").get<double>();
    cfg.noise = j.at("noise").get<double>();
    cfg.blobs_per_class = j.at("blobs_per_class").get<std::size_t>();
    cfg.jitter = j.at("jitter").get<double>();
    return cfg;
}

std::string array_file(std::size_t task, Split split, const char* what) {
    return fmt::format("task{}_{}_{}.f32", task, to_string(split), what);
}

}  // namespace

void Dataset::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "mola-synth-v1";
    manifest["dtype"] = "float32-le";
    manifest["config"] = config_to_json(config_);
    json files = json::array();
    for (std::size_t t = 0; t < task_count(); ++t) {
        json entry{{"task_id", t}};
        for (Split s : {Split::train, Split::test}) {
            const auto& sp = split(s, t);
            const auto in_name = array_file(t, s, "inputs");
            const auto tg_name = array_file(t, s, "targets");
            write_f32(dir / in_name, sp.inputs);
            write_f32(dir / tg_name, sp.targets);
            entry[to_string(s)] = {
                {"count", sp.count},
                {"inputs", {{"file", in_name}, {"shape", {sp.count, image().channels, image().height, image().width}}}},
                {"targets", {{"file", tg_name}, {"shape", {sp.count, sp.target_width}}}}};
        }
        files.push_back(entry);
    }
    manifest["files"] = files;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset Dataset::load(const std::filesystem::path& dir) {
    json manifest;
    try {
        manifest = json::parse(read_text(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw DataError(fmt::format("{}: malformed dataset manifest: {}", dir.string(), e.what()));
    }
    if (manifest.value("format", "") != "mola-synth-v1") {
        throw DataError(fmt::format("{}: not a mola dataset directory", dir.string()));
    }
    try {
        DataConfig cfg = config_from_json(manifest.at("config"));
        std::vector<TaskSplit> train(cfg.tasks.size()), test(cfg.tasks.size());
        for (const auto& entry : manifest.at("files")) {
            const auto t = entry.at("task_id").get<std::size_t>();
            if (t >= cfg.tasks.size()) {
                throw DataError(fmt::format("manifest lists unknown task {}", t));
            }
            for (Split s : {Split::train, Split::test}) {
                const auto& e = entry.at(to_string(s));
                TaskSplit sp;
                sp.count = e.at("count").get<std::size_t>();
                sp.target_width = e.at("targets").at("shape").at(1).get<std::size_t>();
                sp.inputs = read_f32(dir / e.at("inputs").at("file").get<std::string>());
                sp.targets = read_f32(dir / e.at("targets").at("file").get<std::string>());
                if (sp.inputs.size() != sp.count * cfg.image.numel() ||
                    sp.targets.size() != sp.count * sp.target_width) {
                    throw DataError(fmt::format("task {} {} arrays do not match the manifest shapes", t, to_string(s)));
                }
                (s == Split::train ? train : test)[t] = std::move(sp);
            }
        }
        return Dataset(std::move(cfg), std::move(train), std::move(test));
    } catch (const json::exception& e) {
        throw DataError(fmt::format("{}: malformed dataset manifest: {}", dir.string(), e.what()));
    }
}

// ---- batching ---------------------------------------------------------------

const TaskIdentifierMatrix<float>& TaskBatch::task_matrix() const {
    if (!tasks) {
        throw ContractError("batch carries no task identifier matrix");
    }
    return *tasks;
}

TaskBatch make_batch(const Dataset& dataset, Split split,
                     const std::vector<std::pair<std::size_t, std::size_t>>& items) {
    if (items.empty()) {
        throw ConfigError("cannot build an empty batch");
    }
    const auto& img = dataset.image();
    const std::size_t T = dataset.task_count();
    TaskBatch batch;
    std::vector<float> inputs(items.size() * img.numel());
    batch.targets.resize(T);
    // Offsets of each task's block within the concatenated split.
    std::vector<std::size_t> base(T, 0);
    for (std::size_t t = 1; t < T; ++t) base[t] = base[t - 1] + dataset.split(split, t - 1).count;
    for (std::size_t row = 0; row < items.size(); ++row) {
        const auto [t, i] = items[row];
        const auto& sp = dataset.split(split, t);
        if (i >= sp.count) {
            throw DataError(fmt::format("sample {} out of range for task {}", i, t));
        }
        std::copy_n(sp.inputs.data() + i * img.numel(), img.numel(), inputs.data() + row * img.numel());
        batch.task_ids.push_back(t);
        batch.sample_ids.push_back(base[t] + i);
        auto& tt = batch.targets[t];
        tt.width = sp.target_width;
        tt.rows.push_back(row);
        if (dataset.task(t).kind == TargetKind::classification) {
            tt.labels.push_back(static_cast<std::size_t>(sp.targets[i]));
        } else {
            tt.values.insert(tt.values.end(), sp.targets.begin() + static_cast<std::ptrdiff_t>(i * sp.target_width),
                             sp.targets.begin() + static_cast<std::ptrdiff_t>((i + 1) * sp.target_width));
        }
    }
    batch.inputs = TensorF::from({items.size(), img.channels, img.height, img.width}, std::move(inputs));
    batch.tasks = TaskIdentifierMatrix<float>::from_task_ids(batch.task_ids, T);
    return batch;
}

BatchIterator::BatchIterator(const Dataset& dataset, Split split, std::size_t batch_size, std::uint64_t shuffle_seed,
                             bool shuffle)
    : dataset_(&dataset), split_(split), batch_size_(batch_size), shuffle_seed_(shuffle_seed), shuffle_(shuffle) {
    const std::size_t total = dataset.size(split);
    if (total == 0) {
        throw ConfigError("dataset split is empty");
    }
    if (batch_size == 0 || batch_size > total) {
        throw ConfigError(fmt::format("batch size {} must lie in [1, {}]", batch_size, total));
    }
    start_epoch();
}

std::size_t BatchIterator::batches_per_epoch() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

void BatchIterator::start_epoch() {
    order_.clear();
    for (std::size_t t = 0; t < dataset_->task_count(); ++t) {
        for (std::size_t i = 0; i < dataset_->split(split_, t).count; ++i) order_.emplace_back(t, i);
    }
    if (shuffle_) {
        Rng rng(Rng::splitmix(shuffle_seed_ ^ Rng::splitmix(epoch_ + 1)));
        for (std::size_t i = order_.size(); i-- > 1;) {
            std::swap(order_[i], order_[rng.below(i + 1)]);
        }
    }
    cursor_ = 0;
}

TaskBatch BatchIterator::next() {
    if (cursor_ >= order_.size()) {
        ++epoch_;
        start_epoch();
    }
    const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
    std::vector<std::pair<std::size_t, std::size_t>> items(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                                           order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    TaskBatch batch = make_batch(*dataset_, split_, items);
    batch.epoch_end = cursor_ >= order_.size();
    return batch;
}

}  // namespace mola
