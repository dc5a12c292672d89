// SPDX-License-Identifier: Apache-2.0
//
// TCP transport: full mesh of sockets, one per rank pair, with the GFL1
// framing protocol. Rank i connects to every rank j < i; world size is
// validated in the handshake. Sends go through a per-peer writer thread so
// collectives can never deadlock on socket buffers.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "gflow/transport.hpp"

namespace gflow {

// Addresses are "host:port"; entry r is where rank r listens.
class TcpTransport : public Transport {
public:
    TcpTransport(int rank, int world_size, const std::vector<std::string>& peers);
    ~TcpTransport() override;

    int rank() const override { return rank_; }
    int world_size() const override { return world_size_; }

    void send(int dst, std::uint32_t tag, std::span<const std::byte> payload,
              const std::string& phase) override;
    std::vector<std::byte> recv(int src, std::uint32_t tag,
                                const std::string& phase) override;
    void barrier() override;

    // "127.0.0.1:base+r" for every rank.
    static std::vector<std::string> loopback_addresses(int world_size,
                                                       std::uint16_t port_base);

private:
    struct Impl;

    void send_frame(int dst, std::uint8_t msg_type, std::uint32_t tag,
                    std::span<const std::byte> payload);
    std::vector<std::byte> recv_frame(int src, std::uint8_t msg_type, std::uint32_t tag);

    int rank_;
    int world_size_;
    std::uint32_t barrier_seq_ = 0;
    std::unique_ptr<Impl> impl_;
};

}  // namespace gflow
