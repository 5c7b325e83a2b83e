// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "mola/ops.hpp"
#include "mola/trainer.hpp"
#include "model_fixtures.hpp"
#include "temp_dir.hpp"

using namespace mola;

namespace {

Dataset small_dataset(std::size_t per_task = 24, std::uint64_t seed = 0) {
    auto d = DataConfig::uniform(HeterogeneityMode::multi_input_het, 2, 3, seed);
    d.n_per_task = per_task;
    d.test_per_task = 12;
    d.image = {3, 8, 8};
    return generate(d);
}

BackboneConfig small_model(const Dataset& ds, ModelMode mode) {
    auto c = fit_to_dataset(fixtures::tiny_config(mode), ds);
    return c;
}

TrainConfig quick(std::size_t epochs = 2) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.lr = 1e-2;
    return t;
}

std::vector<std::vector<float>> snapshot(const Model<float>& m) {
    std::vector<std::vector<float>> out;
    for (const auto& p : m.parameters()) out.push_back(p.to_vector());
    return out;
}

// ½‖p‖², whose gradient is p itself.
void half_square_grad(const TensorD& p) {
    backward(scale(sum(mul(p, p)), 0.5));
}

}  // namespace

TEST(TrainConfig, Validation) {
    TrainConfig t;
    EXPECT_NO_THROW(t.validate());
    t.lr = 0.0;
    EXPECT_NO_THROW(t.validate());
    t.lr = -1.0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = {};
    t.tau = 0.0;
    EXPECT_THROW(t.validate(), ConfigError);
    EXPECT_THROW(optimizer_kind_from_string("lbfgs"), ConfigError);
}

TEST(Optimizer, SgdStep) {
    auto p = TensorD::from({2}, {1.0, -2.0}, true);
    TrainConfig c;
    c.optimizer = OptimizerKind::sgd;
    c.lr = 0.1;
    Optimizer<double> opt({p}, c);
    half_square_grad(p);
    opt.step();
    EXPECT_DOUBLE_EQ(p.at({0}), 0.9);
    EXPECT_DOUBLE_EQ(p.at({1}), -1.8);
}

TEST(Optimizer, MomentumAccumulates) {
    auto p = TensorD::from({1}, {1.0}, true);
    TrainConfig c;
    c.optimizer = OptimizerKind::sgd;
    c.lr = 0.1;
    c.momentum = 0.9;
    Optimizer<double> opt({p}, c);
    half_square_grad(p);
    opt.step();  // v = 1, p = 0.9
    opt.zero_grad();
    half_square_grad(p);
    opt.step();  // v = 0.9 + 0.9, p = 0.9 − 0.18
    EXPECT_NEAR(p.item(), 0.72, 1e-15);
}

TEST(Optimizer, AdamFirstStepsMatchHandComputation) {
    auto p = TensorD::from({1}, {2.0}, true);
    TrainConfig c;
    c.optimizer = OptimizerKind::adam;
    c.lr = 0.01;
    Optimizer<double> opt({p}, c);
    double w = 2.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        opt.zero_grad();
        half_square_grad(p);
        const double g = w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
        opt.step();
        EXPECT_NEAR(p.item(), w, 1e-14) << "step " << t;
    }
    EXPECT_EQ(opt.steps(), 3u);
}

TEST(Optimizer, ParametersWithoutGradientAreUntouched) {
    auto used = TensorD::from({1}, {1.0}, true);
    auto idle = TensorD::from({1}, {5.0}, true);
    TrainConfig c;
    c.lr = 0.1;
    Optimizer<double> opt({used, idle}, c);
    half_square_grad(used);
    opt.step();
    EXPECT_NE(used.item(), 1.0);
    EXPECT_EQ(idle.item(), 5.0);
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::router));
    const auto before = snapshot(model);
    auto t = quick(1);
    t.lr = 0.0;
    const auto r = train(model, ds, t);
    EXPECT_GT(r.steps, 0u);
    EXPECT_EQ(snapshot(model), before);
}

TEST(Training, MemorisesATinyDataset) {
    const auto ds = small_dataset(8);
    auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    auto t = quick(80);
    t.batch_size = 16;
    train(model, ds, t);
    const auto table = evaluate(model, ds, Split::train, true, "grad");
    for (std::size_t task = 0; task < 2; ++task)
        EXPECT_EQ(table.get("grad", task_name(task), "accuracy")->value, 100.0) << task;
}

TEST(Training, IsDeterministic) {
    const auto ds = small_dataset();
    auto a = Model<float>::build(small_model(ds, ModelMode::router));
    auto b = Model<float>::build(small_model(ds, ModelMode::router));
    const auto ra = train(a, ds, quick());
    const auto rb = train(b, ds, quick());
    EXPECT_EQ(snapshot(a), snapshot(b));
    EXPECT_EQ(history_csv(ra.history), history_csv(rb.history));
}

TEST(Training, HistoryCsv) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    auto t = quick(2);
    t.eval_every = 1;
    const auto r = train(model, ds, t);
    const auto csv = history_csv(r.history);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,task,metric,value");
    bool saw_test = false;
    for (const auto& row : r.history) saw_test |= row.metric == "test_accuracy";
    EXPECT_TRUE(saw_test);
}

TEST(Training, DivergenceNamesTheShuffleSeed) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    auto t = quick(5);
    t.optimizer = OptimizerKind::sgd;
    t.lr = 1e30;
    try {
        train(model, ds, t);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("shuffle seed"), std::string::npos) << e.what();
    }
}

TEST(Training, BatchRowOrderDoesNotChangeTheStep) {
    const auto ds = small_dataset();
    const auto cfg = small_model(ds, ModelMode::grad);
    std::vector<std::pair<std::size_t, std::size_t>> sorted, interleaved;
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 4; ++i) sorted.emplace_back(t, i);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t t = 0; t < 2; ++t) interleaved.emplace_back(t, i);
    TrainConfig t;
    t.optimizer = OptimizerKind::sgd;
    t.lr = 0.05;
    t.freeze_backbone = true;
    auto a = fixtures::perturbed<float>(cfg, 3, 0.05);
    auto b = fixtures::perturbed<float>(cfg, 3, 0.05);
    Trainer ta(a, t), tb(b, t);
    ta.step(make_batch(ds, Split::train, sorted));
    tb.step(make_batch(ds, Split::train, interleaved));
    const auto sa = snapshot(a), sb = snapshot(b);
    for (std::size_t i = 0; i < sa.size(); ++i)
        for (std::size_t k = 0; k < sa[i].size(); ++k) ASSERT_NEAR(sa[i][k], sb[i][k], 1e-4);
}

TEST(Training, FrozenBackboneKeepsW0) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    std::vector<std::vector<float>> before;
    for (const auto& p : model.backbone_parameters()) before.push_back(p.to_vector());
    auto t = quick(1);
    t.freeze_backbone = true;
    train(model, ds, t);
    std::vector<std::vector<float>> after;
    for (const auto& p : model.backbone_parameters()) after.push_back(p.to_vector());
    EXPECT_EQ(before, after);
}

TEST(Evaluate, GradNeedsTaskIds) {
    const auto ds = small_dataset();
    const auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    EXPECT_THROW(evaluate(model, ds, Split::test, false, "grad"), ContractError);
    const auto router = Model<float>::build(small_model(ds, ModelMode::router));
    EXPECT_NO_THROW(evaluate(router, ds, Split::test, false, "router"));
}

TEST(Evaluate, IsDeterministicAndIndependentOfBatchSize) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::router));
    train(model, ds, quick());
    const auto a = evaluate(model, ds, Split::test, true, "router", 5);
    const auto b = evaluate(model, ds, Split::test, true, "router", 128);
    EXPECT_EQ(a.to_csv(), b.to_csv());
    EXPECT_TRUE(a.get("router", kAggregateTask, "mean_accuracy").has_value());
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
    TempDir dir;
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::router));
    const auto t = quick();
    train(model, ds, t);
    save_checkpoint(dir.path(), model, t);
    const auto ck = load_checkpoint(dir.path());
    EXPECT_EQ(snapshot(ck.model), snapshot(model));
    EXPECT_EQ(ck.model.parameter_names(), model.parameter_names());
    EXPECT_EQ(ck.train.epochs, t.epochs);
    EXPECT_EQ(evaluate(ck.model, ds, Split::test, false, "m").to_csv(),
              evaluate(model, ds, Split::test, false, "m").to_csv());
}

TEST(Checkpoint, TamperedHashIsDataError) {
    TempDir dir;
    const auto ds = small_dataset();
    const auto model = Model<float>::build(small_model(ds, ModelMode::grad));
    save_checkpoint(dir.path(), model, quick());
    nlohmann::json manifest;
    std::ifstream(dir / "manifest.json") >> manifest;
    manifest["config_hash"] = "0000";
    std::ofstream(dir / "manifest.json") << manifest.dump();
    EXPECT_THROW(load_checkpoint(dir.path()), DataError);
    EXPECT_THROW(load_checkpoint(dir / "missing"), DataError);
}

TEST(Omega, EmbeddingsAreUnitVectorsPerSample) {
    const auto ds = small_dataset();
    auto model = Model<float>::build(small_model(ds, ModelMode::router));
    train(model, ds, quick());
    const auto records = omega_embeddings(model, ds, Split::test);
    ASSERT_EQ(records.size(), ds.size(Split::test));
    for (const auto& r : records) {
        double n = 0;
        for (float v : r.omega) n += v * v;
        EXPECT_NEAR(n, 1.0, 1e-5);
    }
    const auto s = omega_separation(records);
    EXPECT_GE(s.intra_cosine, -1.0);
    EXPECT_LE(s.intra_cosine, 1.0);
    const auto grad = Model<float>::build(small_model(ds, ModelMode::grad));
    EXPECT_THROW(omega_embeddings(grad, ds, Split::test), ContractError);
}
