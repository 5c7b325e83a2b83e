// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mola/config.hpp"
#include "mola/errors.hpp"
#include "mola/io.hpp"
#include "mola/router.hpp"
#include "mola/spectra.hpp"
#include "mola/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::string resolve(const std::optional<fs::path>& config, const std::vector<std::string>& overrides) {
    return mola::resolve_config_json(config, overrides).dump();
}

std::size_t gen_data(const fs::path& out, const std::optional<fs::path>& config,
                     const std::vector<std::string>& overrides) {
    const auto cfg = mola::load_config(config, overrides);
    return mola::generate(cfg.data, out).size(mola::Split::train);
}

double train(const fs::path& out, const std::optional<fs::path>& config, const std::vector<std::string>& overrides,
             const std::optional<fs::path>& data) {
    const auto resolved = mola::resolve_config_json(config, overrides);
    const auto cfg = mola::experiment_from_json(resolved);
    const auto ds = data ? mola::Dataset::load(*data) : mola::generate(cfg.data);
    auto model = mola::Model<float>::build(mola::fit_to_dataset(cfg.model, ds));
    mola::TrainResult result;
    {
        py::gil_scoped_release release;
        result = mola::train(model, ds, cfg.train);
    }
    mola::save_checkpoint(out, model, cfg.train);
    mola::write_text(out / "metrics.csv", mola::history_csv(result.history));
    mola::write_text(out / "config.json", resolved.dump(2) + "\n");
    return result.final_loss;
}

std::vector<std::tuple<std::string, std::string, std::string, double, int>> rows_of(const mola::MetricTable& t) {
    std::vector<std::tuple<std::string, std::string, std::string, double, int>> out;
    for (const auto& r : t.rows()) out.emplace_back(r.method, r.task, r.metric, r.value, r.sign);
    return out;
}

mola::MetricTable table_of(const std::vector<std::tuple<std::string, std::string, std::string, double, int>>& rows) {
    mola::MetricTable t;
    for (const auto& [m, task, metric, value, sign] : rows) t.set({m, task, metric, value, sign});
    return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "MoLA training lab";

    py::register_exception<mola::Error>(m, "Error");
    auto base = m.attr("Error");
    py::register_exception<mola::ConfigError>(m, "ConfigError", base);
    py::register_exception<mola::DimensionError>(m, "DimensionError", base);
    py::register_exception<mola::NumericError>(m, "NumericError", base);
    py::register_exception<mola::ContractError>(m, "ContractError", base);
    py::register_exception<mola::DataError>(m, "DataError", base);

    m.def("resolve_config", &resolve, py::arg("config") = std::nullopt,
          py::arg("overrides") = std::vector<std::string>{}, "Resolved experiment config as a JSON string.");
    m.def("gen_data", &gen_data, py::arg("out"), py::arg("config") = std::nullopt,
          py::arg("overrides") = std::vector<std::string>{}, "Write a synthetic dataset; returns the train size.");
    m.def("train", &train, py::arg("out"), py::arg("config") = std::nullopt,
          py::arg("overrides") = std::vector<std::string>{}, py::arg("data") = std::nullopt,
          "Train and write a checkpoint directory; returns the final loss.");
    m.def(
        "evaluate",
        [](const fs::path& checkpoint, const fs::path& data, bool task_ids, const std::string& method,
           const std::string& split) {
            const auto ck = mola::load_checkpoint(checkpoint);
            const auto ds = mola::Dataset::load(data);
            return rows_of(mola::evaluate(ck.model, ds, split == "train" ? mola::Split::train : mola::Split::test,
                                          task_ids, method));
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("task_ids") = false, py::arg("method") = "model",
        py::arg("split") = "test", "Metric rows (method, task, metric, value, sign).");
    m.def(
        "delta_m",
        [](const std::vector<std::tuple<std::string, std::string, std::string, double, int>>& rows,
           const std::string& method, const std::string& baseline, bool summed) {
            return mola::delta_m(table_of(rows), method, baseline,
                                 summed ? mola::DeltaMConvention::summed : mola::DeltaMConvention::per_metric_mean);
        },
        py::arg("rows"), py::arg("method"), py::arg("baseline"), py::arg("summed") = false);
    m.def(
        "svd_spectrum",
        [](Array a) {
            if (a.ndim() != 2) throw mola::DimensionError("svd_spectrum expects a 2-D array");
            return mola::svd_spectrum(std::span<const double>(a.data(), a.size()), a.shape(0), a.shape(1));
        },
        py::arg("matrix"));
    m.def(
        "principal_fraction",
        [](const std::vector<double>& sigmas, double alpha) {
            const auto f = mola::principal_fraction(sigmas, alpha);
            return std::make_tuple(f.K, f.R, f.ratio);
        },
        py::arg("sigmas"), py::arg("alpha") = 0.99, "(K, R, K/R) of a descending spectrum.");
    m.def(
        "twd_loss",
        [](Array omega, const std::vector<std::size_t>& task_ids, double tau) {
            if (omega.ndim() != 2) throw mola::DimensionError("twd_loss expects a 2-D array");
            const auto t = mola::TensorD::from({static_cast<std::size_t>(omega.shape(0)),
                                                static_cast<std::size_t>(omega.shape(1))},
                                               std::vector<double>(omega.data(), omega.data() + omega.size()));
            return mola::twd_loss(t, task_ids, tau).item();
        },
        py::arg("omega"), py::arg("task_ids"), py::arg("tau") = 1.0);
    m.def("adapter_parameter_formula", &mola::adapter_parameter_formula, py::arg("out_channels"),
          py::arg("in_channels"), py::arg("kernel"), py::arg("rank"), py::arg("experts"));
    m.def(
        "omega_embeddings",
        [](const fs::path& checkpoint, const fs::path& data, const std::string& split) {
            const auto ck = mola::load_checkpoint(checkpoint);
            const auto ds = mola::Dataset::load(data);
            const auto records =
                mola::omega_embeddings(ck.model, ds, split == "train" ? mola::Split::train : mola::Split::test);
            std::vector<std::size_t> tasks;
            py::array_t<float> out({records.size(), records.empty() ? std::size_t{0} : records[0].omega.size()});
            auto w = out.mutable_unchecked<2>();
            for (std::size_t i = 0; i < records.size(); ++i) {
                tasks.push_back(records[i].task_id);
                for (std::size_t k = 0; k < records[i].omega.size(); ++k) w(i, k) = records[i].omega[k];
            }
            return std::make_pair(out, tasks);
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("split") = "test");
}
