// SPDX-License-Identifier: Apache-2.0
//
// Coarse-grained sparse communication: every rank selects the same
// important chunks via an allreduced-L1-norm protocol, transmits only
// those chunks, and preserves model quality with momentum SGD correction
// (historical gradients hg, historical updates hu) and warm-up dense
// training.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gflow/collectives.hpp"
#include "gflow/fusion.hpp"
#include "gflow/gradient_pool.hpp"

namespace gflow {

struct SparseConfig {
    double momentum = 0.9;
    double learning_rate = 0.01;
    double final_sparsity = 0.0;  // fraction of chunks NOT transmitted
    std::uint64_t warmup_iters = 0;
};

// Linear ramp from dense training to the final sparsity ratio.
double sparsity_at(std::uint64_t t, std::uint64_t warmup_iters, double final_sparsity);

// Momentum SGD correction recurrences, applied per element with the
// owning chunk's importance flag. Instantiated with float in the training
// pipeline and with double for shadow-mode verification.
template <typename T>
void csc_correct(std::span<T> g, std::span<T> hg, T momentum, bool important) {
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += hg[i];
        hg[i] = important ? T(0) : momentum * g[i];
    }
}

template <typename T>
void csc_update(std::span<const T> g_avg, std::span<T> hu, std::span<T> w, T momentum,
                T learning_rate, bool important) {
    if (!important) return;  // hu and w keep their previous values
    for (std::size_t i = 0; i < g_avg.size(); ++i) {
        const T u = momentum * hu[i] + learning_rate * g_avg[i];
        hu[i] = u;
        w[i] -= u;
    }
}

class SparseState {
public:
    SparseState(GradientPool& pool, SparseConfig config);

    void begin_iteration(std::uint64_t t);

    // Algorithm-1 preprocess for a freshly completed chunk: fold in the
    // historical gradient, then either queue the chunk for transmission
    // (important) or absorb it back into hg (unimportant).
    void correction_pre_allreduce(std::size_t chunk_index);

    // Packs queued chunks in ascending order into a staging buffer, runs
    // fused allreduce windows over it (reusing the fusion theta policy),
    // and writes global sums back into the pool. Verifies that all ranks
    // agree on the important set via a checksum frame first.
    void sparse_exchange(Communicator& comm, FusionEngine& engine);

    // L1-norm selection protocol for iteration t+1. Requires that
    // sparse_exchange already ran this iteration.
    const std::vector<std::uint8_t>& select_next_important(Communicator& comm,
                                                           std::uint64_t t);

    // Momentum SGD step over fp32 master weights laid out like the pool.
    // g_hat is the allreduced gradient scaled by 1/world_size.
    void sgd_update(std::span<float> weights, int world_size);

    const std::vector<std::uint8_t>& important() const { return important_; }
    std::span<const float> hg() const { return hg_; }
    std::span<const float> hu() const { return hu_; }

    std::size_t selected_chunks() const;
    std::uint64_t selected_payload_bytes() const;
    double current_sparsity() const { return current_sparsity_; }
    std::size_t last_exchange_windows() const { return last_exchange_windows_; }
    std::uint64_t checksum() const;

    const SparseConfig& config() const { return config_; }

private:
    GradientPool& pool_;
    SparseConfig config_;
    std::vector<std::uint8_t> important_;       // current iteration
    std::vector<std::uint8_t> next_important_;  // staged for the next one
    std::vector<float> hg_;
    std::vector<float> hu_;
    std::vector<std::size_t> queued_;  // ascending chunk indices to transmit
    std::vector<std::uint8_t> corrected_;
    OwnedBuffer staging_;
    bool exchanged_ = false;
    std::size_t last_exchange_windows_ = 0;
    bool has_selection_ = false;
    double current_sparsity_ = 0.0;
    std::uint64_t iteration_ = 0;
};

// Number of chunks transmitted at sparsity s.
std::size_t selection_count(double sparsity, std::size_t num_chunks);

}  // namespace gflow
