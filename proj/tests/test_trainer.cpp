// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <thread>

#include "gflow/inproc.hpp"
#include "gflow/trainer.hpp"

using namespace gflow;

namespace {

std::vector<TrainResult> run_training(const TrainOptions& opts, int n) {
    auto world = make_inproc_world(n);
    std::vector<TrainResult> results(static_cast<std::size_t>(n));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> ts;
    for (int r = 0; r < n; ++r) {
        ts.emplace_back([&, r] {
            try {
                results[static_cast<std::size_t>(r)] =
                    train_worker(opts, *world[static_cast<std::size_t>(r)]);
            } catch (...) {
                errors[static_cast<std::size_t>(r)] = std::current_exception();
            }
        });
    }
    for (auto& t : ts) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

void check_close(std::span<const float> got, std::span<const float> want, double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(1.0, std::fabs(static_cast<double>(want[i])));
        REQUIRE(std::fabs(got[i] - want[i]) / denom <= tol);
    }
}

}  // namespace

TEST_CASE("synthetic data is reproducible and shards partition it") {
    const auto a = synth_data(42, 64, 8, Task::kLinearRegression, 2);
    const auto b = synth_data(42, 64, 8, Task::kLinearRegression, 2);
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);
    CHECK(a.true_weights == b.true_weights);

    const auto c = synth_data(43, 64, 8, Task::kLinearRegression, 2);
    CHECK(a.inputs != c.inputs);

    const auto s0 = shard_of(a, 0, 2);
    const auto s1 = shard_of(a, 1, 2);
    CHECK(s0.begin == 0);
    CHECK(s1.begin == 32);
    CHECK(s0.size + s1.size == a.n_examples);

    CHECK_THROWS_AS(synth_data(1, 65, 8, Task::kLinearRegression, 2), ConfigError);
}

TEST_CASE("logistic targets follow the generator model") {
    // With a strong signal the Bayes classifier (sign of the generator
    // logit) must agree with most sampled labels.
    const auto d = synth_data(7, 2000, 16, Task::kLogistic, 1);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < d.n_examples; ++i) {
        double z = 0.0;
        const auto x = d.example(i);
        for (std::size_t j = 0; j < d.input_dim; ++j) z += x[j] * d.true_weights[j];
        const float bayes = z >= 0.0 ? 1.0f : 0.0f;
        if (bayes == d.targets[i]) ++agree;
    }
    CHECK(agree > d.n_examples * 7 / 10);
}

TEST_CASE("model layout matches the pool layout") {
    Model model({4, 3, 1}, Task::kLinearRegression, 1);
    // Tensors: layer1 weight (12) id1, bias (3) id2, layer2 weight (3) id3,
    // bias (1) id4.
    CHECK(model.tensor_sizes() == std::vector<std::size_t>{12, 3, 3, 1});
    CHECK(model.total_parameters() == 19);
    GradientPool pool(model.tensor_sizes(), 5, ElementType::kF32);
    CHECK(pool.desc(4).pool_offset == 0);
    CHECK(pool.desc(3).pool_offset == 1);
    CHECK(pool.desc(2).pool_offset == 4);
    CHECK(pool.desc(1).pool_offset == 7);
}

TEST_CASE("single linear layer gradient equals the analytic formula") {
    // 2 examples, 2 dims, no hidden layer: dL/dW = 2 X^T (X w + b - y) / B.
    Model model({2, 1}, Task::kLinearRegression, 3);
    const std::vector<float> x = {1.0f, 2.0f, -1.0f, 0.5f};
    const std::vector<float> y = {1.0f, -2.0f};
    const float w0 = model.weights()[1];  // weight tensor id1 at offsets [1,3)
    const float w1 = model.weights()[2];
    const float b = model.weights()[0];   // bias id2 at offset 0

    std::map<int, std::vector<float>> grads;
    model.forward_backward(x, y, 2, [&](int id, std::span<const float> g) {
        grads[id].assign(g.begin(), g.end());
    });

    const float e0 = w0 * 1.0f + w1 * 2.0f + b - 1.0f;
    const float e1 = w0 * -1.0f + w1 * 0.5f + b + 2.0f;
    REQUIRE(grads.count(1) == 1);
    REQUIRE(grads.count(2) == 1);
    CHECK(grads[1][0] == doctest::Approx(2.0f * (e0 * 1.0f + e1 * -1.0f) / 2.0f));
    CHECK(grads[1][1] == doctest::Approx(2.0f * (e0 * 2.0f + e1 * 0.5f) / 2.0f));
    CHECK(grads[2][0] == doctest::Approx(2.0f * (e0 + e1) / 2.0f));
}

TEST_CASE("zero inputs and zero targets give all-zero gradients") {
    Model model({3, 2, 1}, Task::kLinearRegression, 9);
    const std::vector<float> x(6, 0.0f);
    const std::vector<float> y(2, 0.0f);
    model.forward_backward(x, y, 2, [&](int, std::span<const float> g) {
        for (float v : g) CHECK(v == 0.0f);
    });
}

TEST_CASE("gradients are emitted once each, in descending-ID order") {
    Model model({5, 4, 3, 1}, Task::kLinearRegression, 11);
    const auto data = synth_data(12, 8, 5, Task::kLinearRegression, 1);
    std::vector<float> x, y;
    shard_of(data, 0, 1).batch(0, 8, x, y);
    std::vector<int> order;
    model.forward_backward(x, y, 8, [&](int id, std::span<const float> g) {
        order.push_back(id);
        CHECK(g.size() == model.tensor_sizes()[static_cast<std::size_t>(id - 1)]);
    });
    CHECK(order == std::vector<int>{6, 5, 4, 3, 2, 1});
}

TEST_CASE("gradients match central finite differences") {
    for (Task task : {Task::kLinearRegression, Task::kLogistic}) {
        Model model({3, 4, 1}, task, 21);
        const auto data = synth_data(31, 8, 3, task, 1);
        std::vector<float> x, y;
        shard_of(data, 0, 1).batch(0, 8, x, y);

        std::vector<float> grad(model.total_parameters(), 0.0f);
        GradientPool layout(model.tensor_sizes(), 1000, ElementType::kF32);
        model.forward_backward(x, y, 8, [&](int id, std::span<const float> g) {
            const auto& d = layout.desc(id);
            std::copy(g.begin(), g.end(), grad.begin() + static_cast<std::ptrdiff_t>(d.pool_offset));
        });

        // Map pool offsets back to weight slots through the descriptors.
        for (const auto& d : layout.descriptors()) {
            auto w = model.tensor_weights(d.tensor_id);
            for (std::size_t i = 0; i < d.element_count; ++i) {
                const float keep = w[i];
                const float h = 5e-3f;
                w[i] = keep + h;
                const double up = model.loss(x, y, 8);
                w[i] = keep - h;
                const double down = model.loss(x, y, 8);
                w[i] = keep;
                const double fd = (up - down) / (2.0 * h);
                const double g = grad[d.pool_offset + i];
                const double denom = std::max({1.0, std::fabs(fd), std::fabs(g)});
                REQUIRE(std::fabs(fd - g) / denom <= 1e-4);
            }
        }
    }
}

TEST_CASE("non-finite loss aborts the iteration") {
    Model model({2, 1}, Task::kLinearRegression, 5);
    model.weights()[1] = 1e30f;
    model.weights()[2] = 1e30f;
    const std::vector<float> x = {1e9f, 1e9f};
    const std::vector<float> y = {0.0f};
    CHECK_THROWS_AS(model.forward_backward(x, y, 1, [](int, std::span<const float>) {}),
                    TrainingError);
}

TEST_CASE("training is deterministic across identical runs") {
    TrainOptions opts;
    opts.model_dims = {16, 8, 1};
    opts.iterations = 10;
    opts.n_examples = 128;
    opts.batch = 8;
    opts.chunk_size = 20;
    const auto a = run_training(opts, 2);
    const auto b = run_training(opts, 2);
    REQUIRE(a[0].final_weights == b[0].final_weights);
    // Everything except the wall-clock columns is bit-reproducible.
    for (std::size_t i = 0; i < a[0].metrics.size(); ++i) {
        const auto& ma = a[0].metrics[i];
        const auto& mb = b[0].metrics[i];
        CHECK(ma.iteration == mb.iteration);
        CHECK(ma.loss == mb.loss);
        CHECK(ma.sparsity == mb.sparsity);
        CHECK(ma.grad_payload_bytes == mb.grad_payload_bytes);
        CHECK(ma.norm_bytes == mb.norm_bytes);
        CHECK(ma.collectives_launched == mb.collectives_launched);
    }
}

TEST_CASE("all ranks hold identical final weights") {
    TrainOptions opts;
    opts.model_dims = {16, 8, 1};
    opts.iterations = 8;
    opts.n_examples = 128;
    opts.batch = 4;
    const auto results = run_training(opts, 4);
    for (int r = 1; r < 4; ++r) {
        REQUIRE(results[static_cast<std::size_t>(r)].final_weights ==
                results[0].final_weights);
    }
}

TEST_CASE("single-worker dense loss decreases on the convex task") {
    TrainOptions opts;
    opts.model_dims = {8, 1};  // linear model: convex MSE
    opts.iterations = 100;
    opts.n_examples = 256;
    opts.batch = 256;  // full batch for monotone descent
    opts.learning_rate = 0.02;
    opts.momentum = 0.0;
    const auto results = run_training(opts, 1);
    const auto& m = results[0].metrics;
    CHECK(m.back().loss < m.front().loss * 0.5);
    for (std::size_t i = 1; i < m.size(); ++i) {
        REQUIRE(m[i].loss <= m[i - 1].loss + 1e-9);
    }
}

TEST_CASE("N=4 trajectory matches a single-worker large-batch oracle") {
    TrainOptions opts;
    opts.model_dims = {12, 6, 1};
    opts.iterations = 20;
    opts.n_examples = 256;
    opts.batch = 8;
    opts.learning_rate = 0.05;
    opts.momentum = 0.9;
    const int n = 4;
    const auto results = run_training(opts, n);

    // Oracle: one process averages the four shard batches' gradients and
    // applies the same momentum update, all in the pool layout.
    Dataset data = synth_data(opts.seed, opts.n_examples, opts.model_dims.front(),
                              opts.task, n);
    Model model(opts.model_dims, opts.task, opts.seed);
    GradientPool layout(model.tensor_sizes(), opts.chunk_size, ElementType::kF32);
    std::vector<float> g_sum(model.total_parameters());
    std::vector<float> hu(model.total_parameters(), 0.0f);
    std::vector<float> x, y;
    for (std::uint64_t t = 0; t < opts.iterations; ++t) {
        std::fill(g_sum.begin(), g_sum.end(), 0.0f);
        for (int r = 0; r < n; ++r) {
            shard_of(data, r, n).batch(t, opts.batch, x, y);
            model.forward_backward(x, y, opts.batch,
                                   [&](int id, std::span<const float> g) {
                                       const auto& d = layout.desc(id);
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g_sum[d.pool_offset + i] += g[i];
                                       }
                                   });
        }
        auto w = model.weights();
        for (std::size_t i = 0; i < g_sum.size(); ++i) {
            const float u = static_cast<float>(opts.momentum) * hu[i] +
                            static_cast<float>(opts.learning_rate) * g_sum[i] / n;
            hu[i] = u;
            w[i] -= u;
        }
    }
    check_close(results[0].final_weights, model.weights(), 1e-6);
}

TEST_CASE("CSC with zero sparsity reproduces the dense trajectory") {
    TrainOptions dense;
    dense.model_dims = {16, 8, 1};
    dense.iterations = 50;
    dense.n_examples = 256;
    dense.batch = 8;
    dense.chunk_size = 25;
    TrainOptions csc = dense;
    csc.csc = true;
    csc.final_sparsity = 0.0;

    const auto a = run_training(dense, 4);
    const auto b = run_training(csc, 4);
    check_close(b[0].final_weights, a[0].final_weights, 1e-6);
}

TEST_CASE("fp16 wire precision still converges and halves the payload") {
    TrainOptions fp32;
    fp32.model_dims = {16, 8, 1};
    fp32.iterations = 10;
    fp32.n_examples = 128;
    fp32.batch = 8;
    TrainOptions fp16 = fp32;
    fp16.wire_precision = ElementType::kF16;

    const auto a = run_training(fp32, 2);
    const auto b = run_training(fp16, 2);
    CHECK(a[0].metrics[0].grad_payload_bytes ==
          2 * b[0].metrics[0].grad_payload_bytes);
    CHECK(b[0].final_loss < b[0].metrics.front().loss);
}

TEST_CASE("hierarchical and oracle algorithms train to the same weights as ring") {
    TrainOptions ring;
    ring.model_dims = {16, 8, 1};
    ring.iterations = 10;
    ring.n_examples = 128;
    ring.batch = 8;
    TrainOptions hier = ring;
    hier.algorithm = Algo::kHierarchical;
    hier.group_size = 2;
    TrainOptions oracle = ring;
    oracle.algorithm = Algo::kOracle;

    const auto a = run_training(ring, 4);
    const auto b = run_training(hier, 4);
    const auto c = run_training(oracle, 4);
    check_close(b[0].final_weights, a[0].final_weights, 1e-5);
    check_close(c[0].final_weights, a[0].final_weights, 1e-5);
}

TEST_CASE("metrics CSV schema is stable") {
    CHECK(metrics_csv_header() ==
          "iteration,loss,sparsity,grad_payload_bytes,norm_bytes,"
          "collectives_launched,wall_ms_compute,wall_ms_comm");
    IterationMetrics m;
    m.iteration = 3;
    m.loss = 1.5;
    m.grad_payload_bytes = 100;
    const auto line = metrics_csv_line(m);
    CHECK(line.substr(0, 6) == "3,1.5,");
}
