// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <thread>

#include "gflow/fusion.hpp"
#include "gflow/inproc.hpp"

using namespace gflow;

namespace {

// One fused-allreduce iteration per rank: writes every tensor with
// rank-seeded values, drives the engine, returns the final pool contents.
std::vector<float> run_fused_iteration(const std::vector<std::size_t>& sizes,
                                       std::size_t chunk_size, int n,
                                       std::uint64_t theta, std::uint64_t seed,
                                       std::uint64_t* rank0_payload = nullptr,
                                       std::size_t* rank0_windows = nullptr,
                                       bool integer_data = false) {
    auto world = make_inproc_world(n);
    std::vector<std::vector<float>> pools(static_cast<std::size_t>(n));
    std::vector<std::thread> ts;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    for (int r = 0; r < n; ++r) {
        ts.emplace_back([&, r] {
            try {
                GradientPool pool(sizes, chunk_size, ElementType::kF32);
                Communicator comm(*world[static_cast<std::size_t>(r)]);
                FusionEngine engine(pool, comm, {theta, Algo::kRing});

                std::mt19937_64 rng(seed + static_cast<std::uint64_t>(r));
                std::uniform_real_distribution<float> dist(-1.0f, 1.0f);

                pool.begin_iteration();
                engine.begin_iteration();
                std::vector<FusedHandle> handles;
                for (int id = pool.num_tensors(); id >= 1; --id) {
                    std::vector<float> vals(pool.desc(id).element_count);
                    for (auto& v : vals) {
                        v = integer_data
                                ? static_cast<float>(static_cast<int>(rng() % 21) - 10)
                                : dist(rng);
                    }
                    pool.write_tensor(id, vals);
                    for (auto& h : engine.on_tensor_complete(id)) {
                        handles.push_back(std::move(h));
                    }
                }
                if (auto tail = engine.finalize_iteration()) {
                    handles.push_back(std::move(*tail));
                }
                FusionEngine::wait_all(handles);

                auto view = pool.view();
                std::vector<float> out(view.length);
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = view.get(i);
                pools[static_cast<std::size_t>(r)] = std::move(out);
                if (r == 0) {
                    if (rank0_payload) {
                        *rank0_payload =
                            world[0]->stats().total().payload_bytes_sent;
                    }
                    if (rank0_windows) *rank0_windows = engine.last_log().window_count();
                }
            } catch (...) {
                errors[static_cast<std::size_t>(r)] = std::current_exception();
            }
        });
    }
    for (auto& t : ts) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    for (int r = 1; r < n; ++r) {
        REQUIRE(pools[static_cast<std::size_t>(r)] == pools[0]);
    }
    return pools[0];
}

void check_close(const std::vector<float>& got, const std::vector<float>& want,
                 double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(1.0, std::fabs(static_cast<double>(want[i])));
        REQUIRE(std::fabs(got[i] - want[i]) / denom <= tol);
    }
}

}  // namespace

TEST_CASE("theta=0 launches one collective per tensor") {
    const std::vector<std::size_t> sizes = {8, 4, 6};
    std::size_t windows = 0;
    run_fused_iteration(sizes, 5, 2, 0, 1, nullptr, &windows);
    CHECK(windows == sizes.size());
}

TEST_CASE("theta=inf launches exactly one collective over the whole pool") {
    std::size_t windows = 0;
    run_fused_iteration({8, 4, 6}, 5, 2, kThetaInfinite, 2, nullptr, &windows);
    CHECK(windows == 1);
}

TEST_CASE("fusion transparency across thresholds") {
    const std::vector<std::size_t> sizes = {40, 17, 3, 25, 9, 31};
    const auto reference =
        run_fused_iteration(sizes, 10, 4, kThetaInfinite, 33);
    for (std::uint64_t theta : {std::uint64_t{0}, std::uint64_t{4} << 10,
                                std::uint64_t{1} << 20}) {
        const auto got = run_fused_iteration(sizes, 10, 4, theta, 33);
        check_close(got, reference, 1e-6);
    }
}

TEST_CASE("fusion transparency is exact for integer gradients") {
    const std::vector<std::size_t> sizes = {12, 7, 21, 5};
    const auto reference = run_fused_iteration(sizes, 8, 3, kThetaInfinite, 44,
                                               nullptr, nullptr, true);
    for (std::uint64_t theta : {std::uint64_t{0}, std::uint64_t{64}}) {
        const auto got =
            run_fused_iteration(sizes, 8, 3, theta, 44, nullptr, nullptr, true);
        REQUIRE(got == reference);
    }
}

TEST_CASE("total payload is independent of theta") {
    const std::vector<std::size_t> sizes = {100, 60, 44, 52};  // 256 elements
    std::uint64_t base = 0;
    run_fused_iteration(sizes, 32, 4, kThetaInfinite, 5, &base);
    CHECK(base == 2ull * 3 * 256 * 4 / 4);  // 2(N-1)K/N, N | K
    for (std::uint64_t theta : {std::uint64_t{0}, std::uint64_t{128},
                                std::uint64_t{1} << 20}) {
        std::uint64_t payload = 0;
        run_fused_iteration(sizes, 32, 4, theta, 5, &payload);
        CHECK(payload == base);
    }
}

TEST_CASE("window count matches a prefix-sum oracle at theta=64 MiB") {
    // 26 tensors, 60.9M fp32 elements, written back-to-front like a deep
    // convnet's backward pass.
    std::vector<std::size_t> sizes;
    std::mt19937_64 rng(9);
    std::size_t total = 0;
    for (int i = 0; i < 25; ++i) {
        const std::size_t s = 100000 + rng() % 5000000;
        sizes.push_back(s);
        total += s;
    }
    sizes.push_back(60900000 - total);
    REQUIRE(sizes.back() > 0);

    const std::uint64_t theta = 64ull << 20;

    // Oracle: walk tensors in emission order, cutting a window whenever the
    // pending byte count reaches theta, plus a final residual window.
    std::size_t oracle_windows = 0;
    std::uint64_t pending = 0;
    for (auto it = sizes.rbegin(); it != sizes.rend(); ++it) {
        pending += *it * 4;
        if (pending >= theta) {
            ++oracle_windows;
            pending = 0;
        }
    }
    if (pending > 0) ++oracle_windows;

    GradientPool pool(sizes, 32000, ElementType::kF32);
    auto world = make_inproc_world(1);
    Communicator comm(*world[0]);
    FusionEngine engine(pool, comm, {theta, Algo::kRing});
    pool.begin_iteration();
    engine.begin_iteration();
    std::vector<FusedHandle> handles;
    std::vector<float> zeros;
    for (int id = pool.num_tensors(); id >= 1; --id) {
        zeros.assign(pool.desc(id).element_count, 0.0f);
        pool.write_tensor(id, zeros);
        for (auto& h : engine.on_tensor_complete(id)) handles.push_back(std::move(h));
    }
    if (auto tail = engine.finalize_iteration()) handles.push_back(std::move(*tail));
    FusionEngine::wait_all(handles);

    CHECK(engine.last_log().window_count() == oracle_windows);
    CHECK(engine.last_log().total_bytes() == 60900000ull * 4);
}

TEST_CASE("windows tile the pool with no gap or overlap") {
    const std::vector<std::size_t> sizes = {13, 29, 7, 41, 11};
    GradientPool pool(sizes, 16, ElementType::kF32);
    auto world = make_inproc_world(1);
    Communicator comm(*world[0]);
    FusionEngine engine(pool, comm, {96, Algo::kRing});
    pool.begin_iteration();
    engine.begin_iteration();
    std::vector<FusedHandle> handles;
    for (int id = pool.num_tensors(); id >= 1; --id) {
        std::vector<float> vals(pool.desc(id).element_count, 1.0f);
        pool.write_tensor(id, vals);
        for (auto& h : engine.on_tensor_complete(id)) handles.push_back(std::move(h));
    }
    if (auto tail = engine.finalize_iteration()) handles.push_back(std::move(*tail));
    FusionEngine::wait_all(handles);

    std::uint64_t covered = 0;
    for (auto b : engine.last_log().window_bytes) covered += b;
    CHECK(covered == pool.total_elements() * 4);
}

TEST_CASE("residual behavior at the iteration end") {
    // theta equal to the first two tensors' bytes: the third tensor stays
    // pending and finalize flushes exactly one residual window.
    const std::vector<std::size_t> sizes = {4, 8, 8};  // written as 8, 8, 4
    std::size_t windows = 0;
    run_fused_iteration(sizes, 4, 2, 16 * 4, 6, nullptr, &windows);
    CHECK(windows == 2);

    // theta dividing the pool exactly: no separate residual collective.
    std::size_t windows_exact = 0;
    run_fused_iteration({8, 8}, 4, 2, 8 * 4, 7, nullptr, &windows_exact);
    CHECK(windows_exact == 2);
}

TEST_CASE("out-of-order completion and early finalize are rejected") {
    GradientPool pool({4, 4}, 4, ElementType::kF32);
    auto world = make_inproc_world(1);
    Communicator comm(*world[0]);
    FusionEngine engine(pool, comm, {kThetaInfinite, Algo::kRing});
    pool.begin_iteration();
    engine.begin_iteration();
    CHECK_THROWS_AS(engine.on_tensor_complete(1), ConfigError);
    CHECK_THROWS_AS(engine.finalize_iteration(), ConfigError);
}

TEST_CASE("wait_all with no handles returns immediately") {
    std::vector<FusedHandle> none;
    FusionEngine::wait_all(none);
}

TEST_CASE("wait_all surfaces a collective failure") {
    // Rank 1 never participates; rank 0's fused collective times out and the
    // error must surface through wait_all rather than hang.
    auto world = make_inproc_world(2);
    world[0]->set_timeout(std::chrono::milliseconds(200));
    GradientPool pool({4}, 4, ElementType::kF32);
    Communicator comm(*world[0]);
    FusionEngine engine(pool, comm, {kThetaInfinite, Algo::kRing});
    pool.begin_iteration();
    engine.begin_iteration();
    pool.write_tensor(1, std::vector<float>{1, 2, 3, 4});
    std::vector<FusedHandle> handles;
    for (auto& h : engine.on_tensor_complete(1)) handles.push_back(std::move(h));
    if (auto tail = engine.finalize_iteration()) handles.push_back(std::move(*tail));
    CHECK_THROWS_AS(FusionEngine::wait_all(handles), TransportError);
}

TEST_CASE("handles waited out of launch order still yield the right pool") {
    const std::vector<std::size_t> sizes = {6, 6, 6, 6};
    auto world = make_inproc_world(2);
    std::vector<std::vector<float>> pools(2);
    std::vector<std::thread> ts;
    for (int r = 0; r < 2; ++r) {
        ts.emplace_back([&, r] {
            GradientPool pool(sizes, 6, ElementType::kF32);
            Communicator comm(*world[static_cast<std::size_t>(r)]);
            FusionEngine engine(pool, comm, {0, Algo::kRing});
            pool.begin_iteration();
            engine.begin_iteration();
            std::vector<FusedHandle> handles;
            for (int id = 4; id >= 1; --id) {
                std::vector<float> vals(6, static_cast<float>(id * (r + 1)));
                pool.write_tensor(id, vals);
                for (auto& h : engine.on_tensor_complete(id)) {
                    handles.push_back(std::move(h));
                }
            }
            if (auto tail = engine.finalize_iteration()) {
                handles.push_back(std::move(*tail));
            }
            // Reverse completion order.
            for (auto it = handles.rbegin(); it != handles.rend(); ++it) it->get();
            auto view = pool.view();
            std::vector<float> out(view.length);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = view.get(i);
            pools[static_cast<std::size_t>(r)] = std::move(out);
        });
    }
    for (auto& t : ts) t.join();
    REQUIRE(pools[0] == pools[1]);
    // Tensor 4 occupies offsets [0,6): values 4*1 + 4*2 = 12.
    CHECK(pools[0][0] == 12.0f);
    // Tensor 1 occupies the last 6 elements: 1*1 + 1*2 = 3.
    CHECK(pools[0][23] == 3.0f);
}
