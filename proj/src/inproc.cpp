// SPDX-License-Identifier: Apache-2.0

#include "gflow/inproc.hpp"

#include <string>

namespace gflow {

InprocHub::InprocHub(int world_size) {
    if (world_size < 1) throw ConfigError("world_size must be >= 1");
    boxes_.reserve(static_cast<std::size_t>(world_size));
    for (int i = 0; i < world_size; ++i) boxes_.push_back(std::make_unique<Mailbox>());
}

void InprocHub::push(int dst, std::uint64_t key, std::vector<std::byte> payload) {
    Mailbox& box = *boxes_.at(static_cast<std::size_t>(dst));
    {
        std::lock_guard lock(box.mu);
        box.queues[key].push_back(std::move(payload));
    }
    box.cv.notify_all();
}

std::vector<std::byte> InprocHub::pop(int dst, std::uint64_t key,
                                      std::chrono::milliseconds timeout) {
    Mailbox& box = *boxes_.at(static_cast<std::size_t>(dst));
    std::unique_lock lock(box.mu);
    const bool ok = box.cv.wait_for(lock, timeout, [&] {
        auto it = box.queues.find(key);
        return it != box.queues.end() && !it->second.empty();
    });
    if (!ok) {
        throw TransportError("recv timeout at rank " + std::to_string(dst) +
                             " (src " + std::to_string(key >> 40) + ", tag " +
                             std::to_string(key & 0xFFFFFFFFu) + ")");
    }
    auto& q = box.queues[key];
    std::vector<std::byte> payload = std::move(q.front());
    q.pop_front();
    return payload;
}

InprocTransport::InprocTransport(std::shared_ptr<InprocHub> hub, int rank)
    : hub_(std::move(hub)), rank_(rank) {
    if (rank < 0 || rank >= hub_->world_size()) {
        throw ConfigError("rank " + std::to_string(rank) + " outside world");
    }
}

void InprocTransport::send_frame(int dst, std::uint8_t msg_type, std::uint32_t tag,
                                 std::span<const std::byte> payload) {
    hub_->push(dst, InprocHub::make_key(rank_, msg_type, tag),
               std::vector<std::byte>(payload.begin(), payload.end()));
}

std::vector<std::byte> InprocTransport::recv_frame(int src, std::uint8_t msg_type,
                                                   std::uint32_t tag) {
    return hub_->pop(rank_, InprocHub::make_key(src, msg_type, tag), timeout_);
}

void InprocTransport::send(int dst, std::uint32_t tag, std::span<const std::byte> payload,
                           const std::string& phase) {
    if (dst < 0 || dst >= world_size() || dst == rank_) {
        throw ConfigError("invalid send destination " + std::to_string(dst));
    }
    send_frame(dst, kMsgData, tag, payload);
    stats_.record_send(phase, payload.size());
}

std::vector<std::byte> InprocTransport::recv(int src, std::uint32_t tag,
                                             const std::string& phase) {
    auto payload = recv_frame(src, kMsgData, tag);
    stats_.record_recv(phase, payload.size());
    return payload;
}

void InprocTransport::barrier() {
    const std::uint32_t seq = barrier_seq_++;
    const int n = world_size();
    if (n == 1) return;
    if (rank_ == 0) {
        std::string absent;
        for (int r = 1; r < n; ++r) {
            try {
                recv_frame(r, kMsgBarrier, seq);
            } catch (const TransportError&) {
                absent += (absent.empty() ? "" : ", ") + std::to_string(r);
            }
        }
        if (!absent.empty()) {
            throw TransportError("barrier timeout, absent ranks: " + absent);
        }
        for (int r = 1; r < n; ++r) send_frame(r, kMsgBarrier, seq, {});
    } else {
        send_frame(0, kMsgBarrier, seq, {});
        recv_frame(0, kMsgBarrier, seq);
    }
}

std::vector<std::unique_ptr<InprocTransport>> make_inproc_world(int world_size) {
    auto hub = std::make_shared<InprocHub>(world_size);
    std::vector<std::unique_ptr<InprocTransport>> eps;
    eps.reserve(static_cast<std::size_t>(world_size));
    for (int r = 0; r < world_size; ++r) {
        eps.push_back(std::make_unique<InprocTransport>(hub, r));
    }
    return eps;
}

}  // namespace gflow
