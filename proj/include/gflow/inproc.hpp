// SPDX-License-Identifier: Apache-2.0
//
// In-process transport: one mailbox per rank, keyed by (src, msg_type, tag).
// Deterministic FIFO delivery per key; the backend of choice for tests.

#pragma once

#include <condition_variable>
#include <deque>
#include <memory>
#include <unordered_map>

#include "gflow/transport.hpp"

namespace gflow {

class InprocHub {
public:
    explicit InprocHub(int world_size);

    void push(int dst, std::uint64_t key, std::vector<std::byte> payload);
    // Throws TransportError on timeout.
    std::vector<std::byte> pop(int dst, std::uint64_t key, std::chrono::milliseconds timeout);

    int world_size() const { return static_cast<int>(boxes_.size()); }

    static std::uint64_t make_key(int src, std::uint8_t msg_type, std::uint32_t tag) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(src)) << 40) |
               (static_cast<std::uint64_t>(msg_type) << 32) | tag;
    }

private:
    struct Mailbox {
        std::mutex mu;
        std::condition_variable cv;
        std::unordered_map<std::uint64_t, std::deque<std::vector<std::byte>>> queues;
    };
    std::vector<std::unique_ptr<Mailbox>> boxes_;
};

class InprocTransport : public Transport {
public:
    InprocTransport(std::shared_ptr<InprocHub> hub, int rank);

    int rank() const override { return rank_; }
    int world_size() const override { return hub_->world_size(); }

    void send(int dst, std::uint32_t tag, std::span<const std::byte> payload,
              const std::string& phase) override;
    std::vector<std::byte> recv(int src, std::uint32_t tag,
                                const std::string& phase) override;
    void barrier() override;

private:
    void send_frame(int dst, std::uint8_t msg_type, std::uint32_t tag,
                    std::span<const std::byte> payload);
    std::vector<std::byte> recv_frame(int src, std::uint8_t msg_type, std::uint32_t tag);

    std::shared_ptr<InprocHub> hub_;
    int rank_;
    std::uint32_t barrier_seq_ = 0;
};

// Convenience: one hub, N endpoints.
std::vector<std::unique_ptr<InprocTransport>> make_inproc_world(int world_size);

}  // namespace gflow
