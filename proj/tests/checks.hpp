// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Randomised layer-level checks used by both the unit tests and the
// acceptance binary.

#pragma once

#include <algorithm>
#include <vector>

#include "mola/layers.hpp"
#include "mola/ops.hpp"
#include "oracles.hpp"

namespace checks {

using mola::MoLAConv;
using mola::Rng;
using mola::Tensor;

struct LayerCase {
    std::size_t batch = 4, tasks = 3, cin = 4, cout = 4, k = 3, rank = 2, size = 5;
};

inline LayerCase random_case(Rng& rng) {
    LayerCase c;
    c.batch = 1 + rng.below(8);
    c.tasks = 1 + rng.below(4);
    c.cin = 1 + rng.below(8);
    c.cout = 1 + rng.below(8);
    c.k = rng.below(2) == 0 ? 1 : 3;
    c.rank = 1 + rng.below(std::min(c.cin, c.cout));
    c.size = 3 + rng.below(4);
    return c;
}

// Layer with random (nonzero) B so adapters actually contribute.
template <typename T>
MoLAConv<T> random_layer(const LayerCase& c, mola::MixMode mode, Rng& rng) {
    typename MoLAConv<T>::Options o;
    o.out_channels = c.cout;
    o.in_channels = c.cin;
    o.kernel = c.k;
    o.rank = c.rank;
    o.experts = c.tasks;
    o.mode = mode;
    Rng backbone(rng.fork()), adapters(rng.fork());
    auto layer = MoLAConv<T>::create(o, backbone, adapters);
    for (auto& pair : layer.adapters())
        for (auto& v : pair.B.mutable_data()) v = static_cast<T>(rng.normal(0.0, 0.5));
    auto bias = layer.bias();  // shares storage
    for (auto& v : bias.mutable_data()) v = static_cast<T>(rng.normal(0.0, 0.1));
    return layer;
}

inline std::vector<std::size_t> random_tasks(Rng& rng, std::size_t batch, std::size_t tasks) {
    std::vector<std::size_t> ids(batch);
    for (auto& t : ids) t = rng.below(tasks);
    return ids;
}

template <typename T>
Tensor<T> one_hot_row(std::size_t index, std::size_t n) {
    auto row = Tensor<T>::zeros({n});
    row.mutable_data()[index] = T{1};
    return row;
}

// Output of sample-by-sample evaluation with merged_weight and a plain convolution.
template <typename T>
Tensor<T> per_sample_loop(const MoLAConv<T>& layer, const Tensor<T>& h, const Tensor<T>& alpha) {
    const std::size_t b = h.dim(0), e = layer.experts();
    std::vector<Tensor<T>> outs;
    for (std::size_t s = 0; s < b; ++s) {
        const std::vector<std::size_t> row{s};
        auto w = layer.merged_weight(mola::reshape(mola::gather_rows(alpha, row), {e}));
        auto y = mola::conv2d(mola::gather_rows(h, row), w, 1, layer.padding());
        outs.push_back(layer.bias().defined() ? mola::add_channel_bias(y, layer.bias()) : y);
    }
    return mola::concat(outs, 0);
}

// Independent of the library: double loops over the raw parameter values.
template <typename T>
oracle::Vec loop_oracle_forward(const MoLAConv<T>& layer, const Tensor<T>& h, const oracle::Vec& alpha) {
    const std::size_t b = h.dim(0), e = layer.experts(), cin = layer.in_channels(), cout = layer.out_channels(),
                      k = layer.kernel();
    const oracle::ConvShape one{1, cin, h.dim(2), h.dim(3), cout, k, 1, layer.padding()};
    const auto hv = oracle::values(h);
    const auto w0 = oracle::values(layer.backbone_weight());
    const auto bias = layer.bias().defined() ? oracle::values(layer.bias()) : oracle::Vec(cout, 0.0);
    std::vector<oracle::Vec> deltas;
    for (const auto& pair : layer.adapters())
        deltas.push_back(oracle::adapter_delta(oracle::values(pair.B), oracle::values(pair.A), cout, cin, k, pair.rank * k));
    const std::size_t plane = h.dim(2) * h.dim(3), out_plane = one.oh() * one.ow();
    oracle::Vec out;
    for (std::size_t s = 0; s < b; ++s) {
        oracle::Vec w = w0;
        for (std::size_t i = 0; i < e; ++i)
            for (std::size_t j = 0; j < w.size(); ++j) w[j] += alpha[s * e + i] * deltas[i][j];
        const oracle::Vec x(hv.begin() + s * cin * plane, hv.begin() + (s + 1) * cin * plane);
        auto y = oracle::conv2d(x, w, one);
        for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t p = 0; p < out_plane; ++p) y[c * out_plane + p] += bias[c];
        out.insert(out.end(), y.begin(), y.end());
    }
    return out;
}

template <typename T>
void zero_grads(const std::vector<Tensor<T>>& params) {
    for (auto p : params) p.zero_grad();
}

struct Deviation {
    double forward = 0.0;       // grouped vs per-sample loop
    double forward_raw = 0.0;   // grouped vs pure loop oracle
    double gradients = 0.0;     // every parameter and the input
};

// Grouped path vs per-sample merged-weight loop, values and all gradients.
template <typename T>
Deviation grouped_equivalence(const LayerCase& c, Rng& rng) {
    auto layer = random_layer<T>(c, mola::MixMode::grad, rng);
    auto h = oracle::random_tensor<T>(rng, {c.batch, c.cin, c.size, c.size}, true);
    const auto ids = random_tasks(rng, c.batch, c.tasks);
    const auto m = mola::TaskIdentifierMatrix<T>::from_task_ids(ids, c.tasks);
    auto g = oracle::random_tensor<T>(rng, {c.batch, c.cout, c.size, c.size});
    auto params = layer.parameters();
    params.push_back(h);

    Deviation d;
    zero_grads(params);
    auto y = layer.forward_grouped(h, m);
    mola::backward(mola::sum(mola::mul(y, g)));
    std::vector<oracle::Vec> grouped_grads;
    for (const auto& p : params) grouped_grads.push_back(oracle::grads(p));

    zero_grads(params);
    auto ref = per_sample_loop(layer, h, m.matrix());
    mola::backward(mola::sum(mola::mul(ref, g)));
    d.forward = oracle::max_abs_diff(oracle::values(y), oracle::values(ref));
    d.forward_raw = oracle::max_abs_diff(oracle::values(y), loop_oracle_forward(layer, h, oracle::values(m.matrix())));
    for (std::size_t i = 0; i < params.size(); ++i)
        d.gradients = std::max(d.gradients, oracle::max_abs_diff(grouped_grads[i], oracle::grads(params[i])));
    return d;
}

struct Isolation {
    bool absent_exactly_zero = true;
    double present_deviation = 0.0;  // full batch vs task sub-batch, adapter grads
};

// Mixed-task batch: absent tasks get exact zeros, present tasks match their sub-batch.
template <typename T>
Isolation isolation_vs_subbatch(const LayerCase& c, Rng& rng) {
    auto layer = random_layer<T>(c, mola::MixMode::grad, rng);
    auto h = oracle::random_tensor<T>(rng, {c.batch, c.cin, c.size, c.size});
    const auto ids = random_tasks(rng, c.batch, c.tasks);
    auto g = oracle::random_tensor<T>(rng, {c.batch, c.cout, c.size, c.size});
    const auto params = layer.parameters();

    zero_grads(params);
    auto y = layer.forward_grouped(h, mola::TaskIdentifierMatrix<T>::from_task_ids(ids, c.tasks));
    mola::backward(mola::sum(mola::mul(y, g)));
    Isolation r;
    std::vector<std::pair<oracle::Vec, oracle::Vec>> full;
    for (const auto& pair : layer.adapters()) full.emplace_back(oracle::grads(pair.B), oracle::grads(pair.A));

    for (std::size_t t = 0; t < c.tasks; ++t) {
        std::vector<std::size_t> rows;
        for (std::size_t s = 0; s < ids.size(); ++s)
            if (ids[s] == t) rows.push_back(s);
        if (rows.empty()) {
            for (const auto* v : {&full[t].first, &full[t].second})
                r.absent_exactly_zero = r.absent_exactly_zero && std::all_of(v->begin(), v->end(), [](double x) { return x == 0.0; });
            continue;
        }
        zero_grads(params);
        const std::vector<std::size_t> sub_ids(rows.size(), t);
        auto ys = layer.forward_grouped(mola::gather_rows(h, rows),
                                        mola::TaskIdentifierMatrix<T>::from_task_ids(sub_ids, c.tasks));
        mola::backward(mola::sum(mola::mul(ys, mola::gather_rows(g, rows))));
        const auto& pair = layer.adapters()[t];
        r.present_deviation = std::max({r.present_deviation, oracle::max_abs_diff(full[t].first, oracle::grads(pair.B)),
                                        oracle::max_abs_diff(full[t].second, oracle::grads(pair.A))});
    }
    return r;
}

}  // namespace checks
