// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mola/config.hpp"
#include "mola/data.hpp"
#include "mola/errors.hpp"
#include "mola/io.hpp"
#include "mola/objective.hpp"
#include "mola/spectra.hpp"
#include "mola/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string out;

    std::optional<fs::path> config_path() const {
        if (config.empty()) return std::nullopt;
        return fs::path(config);
    }
    mola::ExperimentConfig load() const { return mola::load_config(config_path(), overrides); }
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "JSON experiment config")->check(CLI::ExistingFile);
    cmd->add_option("--override", c.overrides, "dotted key=value, applied after the config file (repeatable)")
        ->take_all()
        ->allow_extra_args(false);
    auto* out = cmd->add_option("--out", c.out, "output path");
    if (out_required) out->required();
}

int gen_data(const Common& c) {
    const auto cfg = c.load();
    const auto ds = mola::generate(cfg.data, c.out);
    fmt::print("wrote {} tasks, {} train / {} test samples to {}\n", ds.task_count(), ds.size(mola::Split::train),
               ds.size(mola::Split::test), c.out);
    return 0;
}

int train(const Common& c, const std::string& data_dir) {
    const auto resolved = mola::resolve_config_json(c.config_path(), c.overrides);
    const auto cfg = mola::experiment_from_json(resolved);
    const auto ds = data_dir.empty() ? mola::generate(cfg.data) : mola::Dataset::load(data_dir);
    auto model = mola::Model<float>::build(mola::fit_to_dataset(cfg.model, ds));
    const auto counts = model.parameter_counts();
    fmt::print("model: mode={} params={} (backbone {}, adapters {}, routers {}, heads {})\n",
               mola::to_string(cfg.model.mode), counts.total(), counts.backbone, counts.adapters, counts.routers,
               counts.heads);
    const auto result = mola::train(model, ds, cfg.train);
    const fs::path out(c.out);
    mola::save_checkpoint(out, model, cfg.train);
    mola::write_text(out / "metrics.csv", mola::history_csv(result.history));
    mola::write_text(out / "config.json", resolved.dump(2) + "\n");
    fmt::print("trained {} steps, final loss {:.6f}; checkpoint in {}\n", result.steps, result.final_loss, c.out);
    return 0;
}

int eval(const Common& c, const std::string& checkpoint, const std::string& data_dir, bool task_ids,
         const std::string& method, const std::string& baseline, const std::string& baseline_method,
         const std::string& split) {
    const auto ck = mola::load_checkpoint(checkpoint);
    const auto ds = mola::Dataset::load(data_dir);
    const auto s = split == "train" ? mola::Split::train : mola::Split::test;
    auto table = mola::evaluate(ck.model, ds, s, task_ids, method);
    if (!baseline.empty()) {
        const auto base = mola::MetricTable::load(baseline);
        mola::MetricTable joined = base;
        joined.merge(table);
        const double dm = mola::delta_m(joined, method, baseline_method);
        table.set({method, mola::kAggregateTask, "delta_m", dm, 0});
        fmt::print("delta_m vs {}: {:.4f}%\n", baseline_method, dm);
    }
    for (const auto& row : table.rows()) fmt::print("{} {} {} {:.4f}\n", row.method, row.task, row.metric, row.value);
    table.save(c.out);
    return 0;
}

int analyze(const Common& c, const std::string& checkpoint, double alpha, const std::string& high_rank) {
    const auto ck = mola::load_checkpoint(checkpoint);
    std::optional<mola::Checkpoint> high;
    if (!high_rank.empty()) high = mola::load_checkpoint(high_rank);
    std::vector<mola::SpectralReport> reports;
    const auto layers = ck.model.conv_layers();
    const auto high_layers = high ? high->model.conv_layers() : std::vector<mola::NamedConv<float>>{};
    for (const auto& layer : layers) {
        const mola::MoLAConv<float>* other = nullptr;
        for (const auto& h : high_layers) {
            if (h.name == layer.name && h.conv->has_adapters()) other = h.conv;
        }
        for (auto& r : mola::compare_variants(layer.name, *layer.conv, alpha, other)) reports.push_back(std::move(r));
    }
    const fs::path out(c.out);
    fs::create_directories(out);
    mola::write_text(out / "spectra.csv", mola::spectra_csv(reports));
    mola::write_text(out / "kr.csv", mola::kr_csv(reports));
    mola::write_text(out / "boxplot.csv", mola::boxplot_csv(reports));
    for (const auto& [layer, ratio] : mola::merged_kr_by_layer(reports)) fmt::print("{} K/R {:.4f}\n", layer, ratio);
    return 0;
}

int twd_embed(const Common& c, const std::string& checkpoint, const std::string& data_dir, const std::string& split,
              std::size_t router) {
    const auto ck = mola::load_checkpoint(checkpoint);
    const auto ds = mola::Dataset::load(data_dir);
    const auto records =
        mola::omega_embeddings(ck.model, ds, split == "train" ? mola::Split::train : mola::Split::test, router);
    mola::write_text(c.out, mola::omega_csv(records));
    const auto sep = mola::omega_separation(records);
    fmt::print("intra-task cosine {:.4f}, inter-task cosine {:.4f}, gap {:.4f}\n", sep.intra_cosine, sep.inter_cosine,
               sep.gap());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mola: mixture of low-rank adapters training lab"};
    app.require_subcommand(1);

    Common gen_c, train_c, eval_c, analyze_c, embed_c;
    std::string train_data, eval_ck, eval_data, eval_method = "model", baseline, baseline_method = "single-task",
                eval_split = "test", analyze_ck, high_rank, embed_ck, embed_data, embed_split = "test";
    bool task_ids = false;
    double alpha = 0.99;
    std::size_t router = 0;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
    add_common(gen, gen_c);

    auto* tr = app.add_subcommand("train", "train a model and write a checkpoint directory");
    add_common(tr, train_c);
    tr->add_option("--data", train_data, "dataset directory (default: generate from the config)")
        ->check(CLI::ExistingDirectory);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint into a metric table CSV");
    add_common(ev, eval_c);
    ev->add_option("--checkpoint", eval_ck)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--data", eval_data)->required()->check(CLI::ExistingDirectory);
    ev->add_flag("--task-ids", task_ids, "task ids are available at inference");
    ev->add_option("--method", eval_method, "method name for the table rows");
    ev->add_option("--baseline", baseline, "metric table CSV holding the baseline rows; adds delta_m")
        ->check(CLI::ExistingFile);
    ev->add_option("--baseline-method", baseline_method, "baseline method name in that table");
    ev->add_option("--split", eval_split)->check(CLI::IsMember({"train", "test"}));

    auto* an = app.add_subcommand("analyze", "singular-value spectra and K/R of every convolution");
    add_common(an, analyze_c);
    an->add_option("--checkpoint", analyze_ck)->required()->check(CLI::ExistingDirectory);
    an->add_option("--alpha", alpha, "principal fraction threshold")->check(CLI::Range(0.0, 1.0));
    an->add_option("--high-rank", high_rank, "checkpoint trained with a larger rank")->check(CLI::ExistingDirectory);

    auto* em = app.add_subcommand("twd-embed", "export projected mixing weights as CSV");
    add_common(em, embed_c);
    em->add_option("--checkpoint", embed_ck)->required()->check(CLI::ExistingDirectory);
    em->add_option("--data", embed_data)->required()->check(CLI::ExistingDirectory);
    em->add_option("--split", embed_split)->check(CLI::IsMember({"train", "test"}));
    em->add_option("--router", router, "router index for per-layer routers");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen) return gen_data(gen_c);
        if (*tr) return train(train_c, train_data);
        if (*ev) return eval(eval_c, eval_ck, eval_data, task_ids, eval_method, baseline, baseline_method, eval_split);
        if (*an) return analyze(analyze_c, analyze_ck, alpha, high_rank);
        if (*em) return twd_embed(embed_c, embed_ck, embed_data, embed_split, router);
    } catch (const mola::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
