// SPDX-License-Identifier: Apache-2.0
//
// Allreduce implementations over the transport: ring-based, hierarchical
// (intra-group ring reduce, masters' ring allreduce, intra-group broadcast)
// and a trivially correct gather/sum/broadcast oracle.

#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <numeric>
#include <vector>

#include "gflow/buffer.hpp"
#include "gflow/transport.hpp"

namespace gflow {

// Rank/world context bound to a transport. group_size M partitions the
// world into N/M contiguous groups [g*M, (g+1)*M) for hierarchical mode;
// the lowest rank of each group is its master. Collective message tags are
// (collective_id << 8) | phase, with ids allocated in call order so they
// agree across ranks.
class Communicator {
public:
    explicit Communicator(Transport& tp, int group_size = 1)
        : tp_(tp), group_size_(group_size) {
        ring_order_.resize(static_cast<std::size_t>(tp.world_size()));
        std::iota(ring_order_.begin(), ring_order_.end(), 0);
    }

    Transport& transport() { return tp_; }
    int rank() const { return tp_.rank(); }
    int world_size() const { return tp_.world_size(); }
    int group_size() const { return group_size_; }

    // Single directed cycle over all ranks. Must be identical on all ranks.
    const std::vector<int>& ring_order() const { return ring_order_; }
    void set_ring_order(std::vector<int> order);

    std::uint32_t acquire_collective_id() { return next_id_.fetch_add(1); }

    // Per-send segment byte sizes logged by hierarchical phase 2.
    std::vector<std::size_t> phase2_segment_bytes() const {
        std::lock_guard lock(mu_);
        return phase2_segments_;
    }
    void log_phase2_segment(std::size_t bytes) {
        std::lock_guard lock(mu_);
        phase2_segments_.push_back(bytes);
    }

private:
    Transport& tp_;
    int group_size_;
    std::vector<int> ring_order_;
    std::atomic<std::uint32_t> next_id_{0};
    mutable std::mutex mu_;
    std::vector<std::size_t> phase2_segments_;
};

// Every rank ends with the elementwise sum over all ranks, bitwise identical
// across ranks. Per-rank payload sent is 2(N-1)K/N when N divides the
// element count.
void ring_allreduce(Communicator& comm, ScalarBuffer buf);

// Same result through three phases: group ring reduce to masters, ring
// allreduce among the N/M masters (per-send segment K*M/N bytes), group
// broadcast. Requires M | N.
void hierarchical_allreduce(Communicator& comm, ScalarBuffer buf);

// Gather to rank 0, sum in fixed rank order, broadcast. Reference for all
// equivalence tests.
void oracle_allreduce(Communicator& comm, ScalarBuffer buf);

// Rooted primitives over the full communicator's ring order.
void reduce(Communicator& comm, ScalarBuffer buf, int root);
void broadcast(Communicator& comm, ScalarBuffer buf, int root);

namespace detail {
// Building blocks over an explicit ordered ring of ranks; used by the
// public collectives and by hierarchical phases. `label` keys TrafficStats.
void ring_allreduce_on(Communicator& comm, ScalarBuffer buf,
                       const std::vector<int>& ring, std::uint32_t collective_id,
                       const std::string& label, bool log_phase2);
void ring_reduce_on(Communicator& comm, ScalarBuffer buf,
                    const std::vector<int>& ring, int root,
                    std::uint32_t collective_id, std::uint8_t phase,
                    const std::string& label);
void broadcast_on(Communicator& comm, ScalarBuffer buf,
                  const std::vector<int>& ring, int root,
                  std::uint32_t collective_id, std::uint8_t phase,
                  const std::string& label);

// Segment i of `length` elements split into n parts differing by <= 1.
struct Segment {
    std::size_t offset;
    std::size_t length;
};
Segment segment_of(std::size_t length, int n, int i);
}  // namespace detail

}  // namespace gflow
