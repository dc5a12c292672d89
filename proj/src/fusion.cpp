// SPDX-License-Identifier: Apache-2.0

#include "gflow/fusion.hpp"

#include <numeric>
#include <sstream>

namespace gflow {

FusionEngine::FusionEngine(GradientPool& pool, Communicator& comm, FusionConfig config)
    : pool_(pool), comm_(comm), config_(config) {
    next_expected_id_ = pool_.num_tensors();
    worker_ = std::thread([this] { worker_loop(); });
}

FusionEngine::~FusionEngine() {
    {
        std::lock_guard lock(mu_);
        stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
}

void FusionEngine::worker_loop() {
    for (;;) {
        std::packaged_task<void()> task;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
            if (queue_.empty()) return;
            task = std::move(queue_.front());
            queue_.pop_front();
        }
        task();
    }
}

void FusionEngine::run_collective(ScalarBuffer view) {
    switch (config_.algorithm) {
        case Algo::kRing:
            ring_allreduce(comm_, view);
            break;
        case Algo::kHierarchical:
            hierarchical_allreduce(comm_, view);
            break;
        case Algo::kOracle:
            oracle_allreduce(comm_, view);
            break;
    }
}

FusedHandle FusionEngine::enqueue_collective(ScalarBuffer view) {
    std::packaged_task<void()> task([this, view] { run_collective(view); });
    FusedHandle handle = task.get_future();
    {
        std::lock_guard lock(mu_);
        queue_.push_back(std::move(task));
    }
    cv_.notify_all();
    return handle;
}

void FusionEngine::begin_iteration() {
    window_start_ = 0;
    window_end_ = 0;
    next_expected_id_ = pool_.num_tensors();
    log_ = IterationLog{};
    log_.iteration = iteration_counter_++;
}

std::vector<FusedHandle> FusionEngine::maybe_launch(bool flush) {
    std::vector<FusedHandle> handles;
    const std::uint64_t pending =
        static_cast<std::uint64_t>(window_end_ - window_start_) *
        element_size(pool_.element_type());
    const bool threshold_hit =
        config_.threshold_bytes != kThetaInfinite && pending >= config_.threshold_bytes;
    if (window_end_ > window_start_ && (threshold_hit || flush)) {
        ScalarBuffer view =
            pool_.view().subspan(window_start_, window_end_ - window_start_);
        log_.window_bytes.push_back(view.byte_length());
        handles.push_back(enqueue_collective(view));
        window_start_ = window_end_;
    }
    return handles;
}

std::vector<FusedHandle> FusionEngine::on_tensor_complete(int tensor_id) {
    if (tensor_id != next_expected_id_) {
        throw ConfigError("fusion: out-of-order tensor completion: got " +
                          std::to_string(tensor_id) + ", expected " +
                          std::to_string(next_expected_id_));
    }
    const TensorDesc& d = pool_.desc(tensor_id);
    window_end_ = d.pool_offset + d.element_count;
    next_expected_id_ = tensor_id - 1;
    return maybe_launch(false);
}

std::optional<FusedHandle> FusionEngine::finalize_iteration() {
    if (next_expected_id_ != 0) {
        throw ConfigError("finalize_iteration before all tensors complete (next: " +
                          std::to_string(next_expected_id_) + ")");
    }
    auto handles = maybe_launch(true);
    if (handles.empty()) return std::nullopt;
    return std::move(handles.front());
}

void FusionEngine::wait_all(std::vector<FusedHandle>& handles) {
    std::exception_ptr first_error;
    for (auto& h : handles) {
        if (!h.valid()) continue;
        try {
            h.get();
        } catch (...) {
            if (!first_error) first_error = std::current_exception();
        }
    }
    handles.clear();
    if (first_error) std::rethrow_exception(first_error);
}

std::uint64_t FusionEngine::IterationLog::total_bytes() const {
    return std::accumulate(window_bytes.begin(), window_bytes.end(), std::uint64_t{0});
}

std::string FusionEngine::log_csv_line() const {
    std::ostringstream os;
    os << log_.iteration << ',' << log_.window_count() << ',' << log_.total_bytes() << ',';
    for (std::size_t i = 0; i < log_.window_bytes.size(); ++i) {
        if (i) os << ';';
        os << log_.window_bytes[i];
    }
    return os.str();
}

}  // namespace gflow
