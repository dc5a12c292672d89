// SPDX-License-Identifier: Apache-2.0

#include "gflow/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

namespace gflow {

double sparsity_at(std::uint64_t t, std::uint64_t warmup_iters, double final_sparsity) {
    if (warmup_iters == 0) return final_sparsity;
    const double ramp = std::min(1.0, static_cast<double>(t) / static_cast<double>(warmup_iters));
    return final_sparsity * ramp;
}

std::size_t selection_count(double sparsity, std::size_t num_chunks) {
    const double fraction = 1.0 - sparsity;
    const auto k = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(num_chunks)));
    return std::max<std::size_t>(1, std::min(k, num_chunks));
}

SparseState::SparseState(GradientPool& pool, SparseConfig config)
    : pool_(pool), config_(config) {
    if (config_.final_sparsity < 0.0 || config_.final_sparsity >= 1.0) {
        throw ConfigError("final_sparsity must be in [0, 1)");
    }
    if (config_.momentum < 0.0 || config_.momentum >= 1.0) {
        throw ConfigError("momentum must be in [0, 1)");
    }
    if (config_.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    important_.assign(pool_.num_chunks(), 1);
    next_important_.assign(pool_.num_chunks(), 1);
    hg_.assign(pool_.total_elements(), 0.0f);
    hu_.assign(pool_.total_elements(), 0.0f);
    corrected_.assign(pool_.num_chunks(), 0);
}

void SparseState::begin_iteration(std::uint64_t t) {
    iteration_ = t;
    current_sparsity_ = sparsity_at(t, config_.warmup_iters, config_.final_sparsity);
    // The first iteration is fully dense; afterwards the set selected at the
    // end of the previous iteration takes effect.
    if (has_selection_) {
        important_ = next_important_;
    } else {
        std::fill(important_.begin(), important_.end(), 1);
    }
    queued_.clear();
    std::fill(corrected_.begin(), corrected_.end(), 0);
    exchanged_ = false;
}

void SparseState::correction_pre_allreduce(std::size_t chunk_index) {
    if (chunk_index >= pool_.num_chunks()) {
        throw ConfigError("chunk index out of range");
    }
    const std::size_t begin = pool_.chunk_begin(chunk_index);
    const std::size_t len = pool_.chunk_length(chunk_index);
    if (begin + len > pool_.written_elements()) {
        throw ConfigError("correction on incomplete chunk " + std::to_string(chunk_index));
    }
    if (corrected_[chunk_index]) {
        throw ConfigError("chunk " + std::to_string(chunk_index) + " corrected twice");
    }
    corrected_[chunk_index] = 1;

    ScalarBuffer chunk = pool_.chunk_view(chunk_index);
    std::vector<float> g(len);
    for (std::size_t i = 0; i < len; ++i) g[i] = chunk.get(i);
    const bool is_important = important_[chunk_index] != 0;
    csc_correct<float>(g, std::span<float>(hg_).subspan(begin, len),
                       static_cast<float>(config_.momentum), is_important);
    for (std::size_t i = 0; i < len; ++i) chunk.set(i, g[i]);
    if (is_important) queued_.push_back(chunk_index);
}

std::size_t SparseState::selected_chunks() const {
    return static_cast<std::size_t>(
        std::count(important_.begin(), important_.end(), std::uint8_t{1}));
}

std::uint64_t SparseState::selected_payload_bytes() const {
    std::uint64_t bytes = 0;
    for (std::size_t c = 0; c < important_.size(); ++c) {
        if (important_[c]) {
            bytes += pool_.chunk_length(c) * element_size(pool_.element_type());
        }
    }
    return bytes;
}

std::uint64_t SparseState::checksum() const {
    // FNV-1a over the importance bits.
    std::uint64_t h = 1469598103934665603ull;
    for (std::uint8_t b : important_) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

void SparseState::sparse_exchange(Communicator& comm, FusionEngine& engine) {
    if (exchanged_) throw ConfigError("sparse_exchange called twice in one iteration");

    // All ranks must hold the same important set before any gradient moves.
    const std::uint64_t local = checksum();
    Transport& tp = comm.transport();
    if (comm.world_size() > 1) {
        const std::uint32_t tag = (comm.acquire_collective_id() << 8) | 7;
        std::vector<std::byte> payload(8);
        std::memcpy(payload.data(), &local, 8);
        if (comm.rank() == 0) {
            for (int r = 1; r < comm.world_size(); ++r) tp.send(r, tag, payload, "csc_check");
        } else {
            auto ref = tp.recv(0, tag, "csc_check");
            std::uint64_t expected;
            std::memcpy(&expected, ref.data(), 8);
            if (expected != local) {
                throw ProtocolError("important-set divergence at rank " +
                                    std::to_string(comm.rank()));
            }
        }
    }

    // Pack selected chunks in ascending chunk order.
    std::size_t total = 0;
    for (std::size_t c : queued_) total += pool_.chunk_length(c);
    staging_ = OwnedBuffer(pool_.element_type(), total);
    ScalarBuffer stage = staging_.view();
    const std::size_t esz = element_size(pool_.element_type());
    std::size_t cursor = 0;
    for (std::size_t c : queued_) {
        ScalarBuffer chunk = pool_.chunk_view(c);
        std::memcpy(stage.data + cursor * esz, chunk.data, chunk.byte_length());
        cursor += chunk.length;
    }

    // Fused allreduce over the staging buffer, windows cut by theta.
    const std::uint64_t theta = engine.config().threshold_bytes;
    std::vector<FusedHandle> handles;
    std::size_t win_start = 0;
    std::size_t pos = 0;
    for (std::size_t c : queued_) {
        pos += pool_.chunk_length(c);
        const std::uint64_t pending = (pos - win_start) * esz;
        if (theta != kThetaInfinite && pending >= theta) {
            handles.push_back(engine.enqueue_collective(
                stage.subspan(win_start, pos - win_start)));
            win_start = pos;
        }
    }
    if (pos > win_start) {
        handles.push_back(engine.enqueue_collective(stage.subspan(win_start, pos - win_start)));
    }
    last_exchange_windows_ = handles.size();
    FusionEngine::wait_all(handles);

    // Write global sums back; unimportant chunks keep local values.
    cursor = 0;
    for (std::size_t c : queued_) {
        ScalarBuffer chunk = pool_.chunk_view(c);
        std::memcpy(chunk.data, stage.data + cursor * esz, chunk.byte_length());
        cursor += chunk.length;
    }
    exchanged_ = true;
}

const std::vector<std::uint8_t>& SparseState::select_next_important(Communicator& comm,
                                                                    std::uint64_t t) {
    if (!exchanged_) throw ConfigError("select_next_important before sparse_exchange");
    const std::size_t nc = pool_.num_chunks();
    std::vector<float> norms(nc);
    const float inv_world = 1.0f / static_cast<float>(comm.world_size());
    for (std::size_t c = 0; c < nc; ++c) {
        float n = pool_.chunk_l1(c);
        // Important chunks already hold the global sum on every rank; scale
        // so their contribution matches one rank's worth.
        if (important_[c]) n *= inv_world;
        norms[c] = n;
    }
    ScalarBuffer norm_buf{ElementType::kF32,
                          reinterpret_cast<std::byte*>(norms.data()), nc};
    ring_allreduce(comm, norm_buf);

    const double next_sparsity =
        sparsity_at(t + 1, config_.warmup_iters, config_.final_sparsity);
    const std::size_t k = selection_count(next_sparsity, nc);

    std::vector<std::size_t> order(nc);
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                      order.end(), [&](std::size_t a, std::size_t b) {
                          if (norms[a] != norms[b]) return norms[a] > norms[b];
                          return a < b;  // ties toward the lower chunk index
                      });
    std::fill(next_important_.begin(), next_important_.end(), 0);
    for (std::size_t i = 0; i < k; ++i) next_important_[order[i]] = 1;
    has_selection_ = true;
    return next_important_;
}

void SparseState::sgd_update(std::span<float> weights, int world_size) {
    if (weights.size() != pool_.total_elements()) {
        throw ConfigError("weight vector does not match pool layout");
    }
    const float inv_world = 1.0f / static_cast<float>(world_size);
    std::vector<float> g_avg;
    for (std::size_t c = 0; c < pool_.num_chunks(); ++c) {
        if (!important_[c]) continue;
        const std::size_t begin = pool_.chunk_begin(c);
        const std::size_t len = pool_.chunk_length(c);
        ScalarBuffer chunk = pool_.chunk_view(c);
        g_avg.resize(len);
        for (std::size_t i = 0; i < len; ++i) g_avg[i] = chunk.get(i) * inv_world;
        csc_update<float>(g_avg, std::span<float>(hu_).subspan(begin, len),
                          weights.subspan(begin, len),
                          static_cast<float>(config_.momentum),
                          static_cast<float>(config_.learning_rate), true);
    }
}

}  // namespace gflow
