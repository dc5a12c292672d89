// SPDX-License-Identifier: Apache-2.0

#include "gflow/collectives.hpp"

#include <algorithm>
#include <string>

namespace gflow {

namespace {

std::uint32_t make_tag(std::uint32_t collective_id, std::uint8_t phase) {
    return (collective_id << 8) | phase;
}

int ring_position(const std::vector<int>& ring, int rank) {
    auto it = std::find(ring.begin(), ring.end(), rank);
    return it == ring.end() ? -1 : static_cast<int>(it - ring.begin());
}

void check_payload(const std::vector<std::byte>& payload, std::size_t expected) {
    if (payload.size() != expected) {
        throw ProtocolError("mismatched segment size: got " +
                            std::to_string(payload.size()) + ", expected " +
                            std::to_string(expected));
    }
}

}  // namespace

void Communicator::set_ring_order(std::vector<int> order) {
    if (order.size() != static_cast<std::size_t>(world_size())) {
        throw ConfigError("ring order must cover all ranks");
    }
    std::vector<int> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < world_size(); ++i) {
        if (sorted[static_cast<std::size_t>(i)] != i) {
            throw ConfigError("ring order is not a permutation of ranks");
        }
    }
    ring_order_ = std::move(order);
}

namespace detail {

Segment segment_of(std::size_t length, int n, int i) {
    const std::size_t base = length / static_cast<std::size_t>(n);
    const std::size_t rem = length % static_cast<std::size_t>(n);
    const std::size_t idx = static_cast<std::size_t>(i);
    const std::size_t off = idx * base + std::min(idx, rem);
    return {off, base + (idx < rem ? 1u : 0u)};
}

void ring_allreduce_on(Communicator& comm, ScalarBuffer buf,
                       const std::vector<int>& ring, std::uint32_t collective_id,
                       const std::string& label, bool log_phase2) {
    const int n = static_cast<int>(ring.size());
    if (n == 1) return;
    const int p = ring_position(ring, comm.rank());
    Transport& tp = comm.transport();
    const int next = ring[static_cast<std::size_t>((p + 1) % n)];
    const int prev = ring[static_cast<std::size_t>((p - 1 + n) % n)];
    const std::uint32_t rs_tag = make_tag(collective_id, log_phase2 ? 3 : 1);
    const std::uint32_t ag_tag = make_tag(collective_id, log_phase2 ? 4 : 2);

    // Reduce-scatter: after n-1 steps position p holds the fully reduced
    // segment (p+1) mod n, accumulated in ring-arrival order.
    for (int s = 0; s < n - 1; ++s) {
        const int si = (p - s + n) % n;
        const int ri = (p - s - 1 + n) % n;
        const Segment ss = segment_of(buf.length, n, si);
        const Segment rs = segment_of(buf.length, n, ri);
        ScalarBuffer send_seg = buf.subspan(ss.offset, ss.length);
        if (log_phase2) comm.log_phase2_segment(send_seg.byte_length());
        tp.send(next, rs_tag, to_bytes(send_seg), label);
        auto incoming = tp.recv(prev, rs_tag, label);
        ScalarBuffer recv_seg = buf.subspan(rs.offset, rs.length);
        check_payload(incoming, recv_seg.byte_length());
        accumulate(recv_seg, incoming);
    }

    // Allgather: circulate the reduced segments.
    for (int s = 0; s < n - 1; ++s) {
        const int si = (p + 1 - s + n) % n;
        const int ri = (p - s + n) % n;
        const Segment ss = segment_of(buf.length, n, si);
        const Segment rs = segment_of(buf.length, n, ri);
        ScalarBuffer send_seg = buf.subspan(ss.offset, ss.length);
        if (log_phase2) comm.log_phase2_segment(send_seg.byte_length());
        tp.send(next, ag_tag, to_bytes(send_seg), label);
        auto incoming = tp.recv(prev, ag_tag, label);
        ScalarBuffer recv_seg = buf.subspan(rs.offset, rs.length);
        check_payload(incoming, recv_seg.byte_length());
        from_bytes(recv_seg, incoming);
    }
}

void ring_reduce_on(Communicator& comm, ScalarBuffer buf,
                    const std::vector<int>& ring, int root,
                    std::uint32_t collective_id, std::uint8_t phase,
                    const std::string& label) {
    const int n = static_cast<int>(ring.size());
    if (n == 1) return;
    const int p = ring_position(ring, comm.rank());
    const int root_pos = ring_position(ring, root);
    if (root_pos < 0) throw ConfigError("reduce root outside group");
    Transport& tp = comm.transport();
    const int next = ring[static_cast<std::size_t>((p + 1) % n)];
    const int prev = ring[static_cast<std::size_t>((p - 1 + n) % n)];
    const std::uint32_t rs_tag = make_tag(collective_id, phase);
    const std::uint32_t gather_tag = make_tag(collective_id, phase + 1);

    for (int s = 0; s < n - 1; ++s) {
        const int si = (p - s + n) % n;
        const int ri = (p - s - 1 + n) % n;
        const Segment ss = segment_of(buf.length, n, si);
        const Segment rs = segment_of(buf.length, n, ri);
        tp.send(next, rs_tag, to_bytes(buf.subspan(ss.offset, ss.length)), label);
        auto incoming = tp.recv(prev, rs_tag, label);
        ScalarBuffer recv_seg = buf.subspan(rs.offset, rs.length);
        check_payload(incoming, recv_seg.byte_length());
        accumulate(recv_seg, incoming);
    }

    // Each position owns segment (p+1) mod n; forward owned segments to root.
    const int owned = (p + 1) % n;
    if (p != root_pos) {
        const Segment os = segment_of(buf.length, n, owned);
        tp.send(root, gather_tag, to_bytes(buf.subspan(os.offset, os.length)), label);
    } else {
        for (int i = 0; i < n; ++i) {
            if (i == owned) continue;
            const int owner_pos = (i - 1 + n) % n;
            if (owner_pos == root_pos) continue;
            const Segment sg = segment_of(buf.length, n, i);
            auto incoming =
                tp.recv(ring[static_cast<std::size_t>(owner_pos)], gather_tag, label);
            ScalarBuffer seg = buf.subspan(sg.offset, sg.length);
            check_payload(incoming, seg.byte_length());
            from_bytes(seg, incoming);
        }
    }
}

void broadcast_on(Communicator& comm, ScalarBuffer buf,
                  const std::vector<int>& ring, int root,
                  std::uint32_t collective_id, std::uint8_t phase,
                  const std::string& label) {
    const int n = static_cast<int>(ring.size());
    if (n == 1) return;
    const int p = ring_position(ring, comm.rank());
    const int root_pos = ring_position(ring, root);
    if (root_pos < 0) throw ConfigError("broadcast root outside group");
    Transport& tp = comm.transport();
    const std::uint32_t tag = make_tag(collective_id, phase);

    // Forwarding chain from root along the ring.
    const int hop = (p - root_pos + n) % n;
    if (hop > 0) {
        const int prev = ring[static_cast<std::size_t>((p - 1 + n) % n)];
        auto incoming = tp.recv(prev, tag, label);
        check_payload(incoming, buf.byte_length());
        from_bytes(buf, incoming);
    }
    if (hop < n - 1) {
        const int next = ring[static_cast<std::size_t>((p + 1) % n)];
        tp.send(next, tag, to_bytes(buf), label);
    }
}

}  // namespace detail

void ring_allreduce(Communicator& comm, ScalarBuffer buf) {
    const std::uint32_t id = comm.acquire_collective_id();
    detail::ring_allreduce_on(comm, buf, comm.ring_order(), id, "ring", false);
}

void hierarchical_allreduce(Communicator& comm, ScalarBuffer buf) {
    const int n = comm.world_size();
    const int m = comm.group_size();
    if (m < 1 || n % m != 0) {
        throw ConfigError("group size " + std::to_string(m) + " must divide world " +
                          std::to_string(n));
    }
    const std::uint32_t id = comm.acquire_collective_id();
    const int group = comm.rank() / m;
    std::vector<int> members(static_cast<std::size_t>(m));
    std::iota(members.begin(), members.end(), group * m);
    const int master = group * m;

    detail::ring_reduce_on(comm, buf, members, master, id, 1, "hier1");

    if (comm.rank() == master) {
        std::vector<int> masters;
        for (int g = 0; g < n / m; ++g) masters.push_back(g * m);
        detail::ring_allreduce_on(comm, buf, masters, id, "hier2", true);
    }

    detail::broadcast_on(comm, buf, members, master, id, 5, "hier3");
}

void oracle_allreduce(Communicator& comm, ScalarBuffer buf) {
    const int n = comm.world_size();
    if (n == 1) return;
    const std::uint32_t id = comm.acquire_collective_id();
    Transport& tp = comm.transport();
    const std::uint32_t gather_tag = make_tag(id, 1);
    const std::uint32_t bcast_tag = make_tag(id, 2);
    const std::string label = "oracle";

    if (comm.rank() == 0) {
        for (int r = 1; r < n; ++r) {
            auto incoming = tp.recv(r, gather_tag, label);
            check_payload(incoming, buf.byte_length());
            accumulate(buf, incoming);
        }
        const auto result = to_bytes(buf);
        for (int r = 1; r < n; ++r) tp.send(r, bcast_tag, result, label);
    } else {
        tp.send(0, gather_tag, to_bytes(buf), label);
        auto result = tp.recv(0, bcast_tag, label);
        check_payload(result, buf.byte_length());
        from_bytes(buf, result);
    }
}

void reduce(Communicator& comm, ScalarBuffer buf, int root) {
    if (root < 0 || root >= comm.world_size()) {
        throw ConfigError("reduce root " + std::to_string(root) + " outside group");
    }
    const std::uint32_t id = comm.acquire_collective_id();
    detail::ring_reduce_on(comm, buf, comm.ring_order(), root, id, 1, "reduce");
}

void broadcast(Communicator& comm, ScalarBuffer buf, int root) {
    if (root < 0 || root >= comm.world_size()) {
        throw ConfigError("broadcast root " + std::to_string(root) + " outside group");
    }
    const std::uint32_t id = comm.acquire_collective_id();
    detail::broadcast_on(comm, buf, comm.ring_order(), root, id, 1, "bcast");
}

}  // namespace gflow
