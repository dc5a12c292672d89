// SPDX-License-Identifier: Apache-2.0
//
// Lazy allreduce: completed gradient tensors extend a pending window over
// the pool; once pending bytes reach threshold theta, one fused collective
// is launched directly on pool memory and overlapped with the remaining
// backward computation via a per-worker progress thread.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

#include "gflow/collectives.hpp"
#include "gflow/gradient_pool.hpp"

namespace gflow {

enum class Algo { kRing, kHierarchical, kOracle };

// "Single allreduce after backward" mode.
inline constexpr std::uint64_t kThetaInfinite = std::numeric_limits<std::uint64_t>::max();

struct FusionConfig {
    std::uint64_t threshold_bytes = 64ull << 20;
    Algo algorithm = Algo::kRing;
};

using FusedHandle = std::future<void>;

class FusionEngine {
public:
    FusionEngine(GradientPool& pool, Communicator& comm, FusionConfig config);
    ~FusionEngine();

    FusionEngine(const FusionEngine&) = delete;
    FusionEngine& operator=(const FusionEngine&) = delete;

    void begin_iteration();

    // Extends the pending window by the tensor's extent; launches fused
    // collectives whenever pending bytes reach theta. Tensors must complete
    // in descending-ID order.
    std::vector<FusedHandle> on_tensor_complete(int tensor_id);

    // Flushes the residual window once all tensors are complete.
    std::optional<FusedHandle> finalize_iteration();

    // Blocks until every fused collective finished; rethrows the first error.
    static void wait_all(std::vector<FusedHandle>& handles);

    // Queues one collective over an arbitrary buffer on the progress thread,
    // FIFO with pool windows. Used by sparse staging exchange.
    FusedHandle enqueue_collective(ScalarBuffer view);

    struct IterationLog {
        std::uint64_t iteration = 0;
        std::vector<std::size_t> window_bytes;
        std::size_t window_count() const { return window_bytes.size(); }
        std::uint64_t total_bytes() const;
    };
    const IterationLog& last_log() const { return log_; }
    // CSV: iteration, window count, total bytes, per-window bytes ';'-joined.
    std::string log_csv_line() const;

    const FusionConfig& config() const { return config_; }

private:
    std::vector<FusedHandle> maybe_launch(bool flush);
    void run_collective(ScalarBuffer view);
    void worker_loop();

    GradientPool& pool_;
    Communicator& comm_;
    FusionConfig config_;

    std::size_t window_start_ = 0;  // elements
    std::size_t window_end_ = 0;
    int next_expected_id_ = 0;
    IterationLog log_;
    std::uint64_t iteration_counter_ = 0;

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<std::packaged_task<void()>> queue_;
    bool stop_ = false;
    std::thread worker_;
};

}  // namespace gflow
