// SPDX-License-Identifier: Apache-2.0
//
// Point-to-point message delivery between ranks. Two interchangeable
// backends (in-process queues, TCP sockets) share the framing protocol
// and the per-rank traffic accounting.

#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "gflow/errors.hpp"

namespace gflow {

inline constexpr std::uint8_t kMsgData = 0x01;
inline constexpr std::uint8_t kMsgBarrier = 0x02;
inline constexpr std::uint8_t kMsgHandshake = 0x03;

inline constexpr std::chrono::milliseconds kDefaultTimeout{30000};

// Wire frame. All multi-byte header fields little-endian.
//   magic "GFL1" | msg_type u8 | tag u32 | src_rank u32 | payload_len u64 | payload
struct Frame {
    std::uint8_t msg_type = kMsgData;
    std::uint32_t tag = 0;
    std::uint32_t src_rank = 0;
    std::vector<std::byte> payload;

    static constexpr std::size_t kHeaderSize = 4 + 1 + 4 + 4 + 8;
    static constexpr char kMagic[4] = {'G', 'F', 'L', '1'};

    std::vector<std::byte> encode() const;
    // Throws ProtocolError on bad magic; bytes must hold a complete frame.
    static Frame decode(std::span<const std::byte> bytes);
    static void encode_header(const Frame& f, std::byte out[kHeaderSize]);
    // Parses a header, returning the payload length still to be read.
    static std::uint64_t decode_header(std::span<const std::byte> header, Frame& out);
};

// Per-rank payload byte and frame counters, grouped by collective-phase
// label. Headers are not counted; the traffic formulas are payload formulas.
class TrafficStats {
public:
    struct Counters {
        std::uint64_t payload_bytes_sent = 0;
        std::uint64_t payload_bytes_received = 0;
        std::uint64_t frames_sent = 0;
    };

    void record_send(const std::string& phase, std::uint64_t payload_bytes) {
        std::lock_guard lock(mu_);
        auto& c = phases_[phase];
        c.payload_bytes_sent += payload_bytes;
        c.frames_sent += 1;
        total_.payload_bytes_sent += payload_bytes;
        total_.frames_sent += 1;
    }

    void record_recv(const std::string& phase, std::uint64_t payload_bytes) {
        std::lock_guard lock(mu_);
        phases_[phase].payload_bytes_received += payload_bytes;
        total_.payload_bytes_received += payload_bytes;
    }

    Counters total() const {
        std::lock_guard lock(mu_);
        return total_;
    }

    Counters phase(const std::string& label) const {
        std::lock_guard lock(mu_);
        auto it = phases_.find(label);
        return it == phases_.end() ? Counters{} : it->second;
    }

    std::map<std::string, Counters> snapshot() const {
        std::lock_guard lock(mu_);
        return phases_;
    }

private:
    mutable std::mutex mu_;
    std::map<std::string, Counters> phases_;
    Counters total_;
};

// One endpoint per logical worker. Sends and receives on distinct tags may
// proceed concurrently; a background progress context may drive collectives
// while the owner computes.
class Transport {
public:
    virtual ~Transport() = default;

    virtual int rank() const = 0;
    virtual int world_size() const = 0;

    virtual void send(int dst, std::uint32_t tag, std::span<const std::byte> payload,
                      const std::string& phase) = 0;
    virtual std::vector<std::byte> recv(int src, std::uint32_t tag,
                                        const std::string& phase) = 0;

    // No rank returns before every rank has entered.
    virtual void barrier() = 0;

    TrafficStats& stats() { return stats_; }
    const TrafficStats& stats() const { return stats_; }

    std::chrono::milliseconds timeout() const { return timeout_; }
    void set_timeout(std::chrono::milliseconds t) { timeout_ = t; }

protected:
    TrafficStats stats_;
    std::chrono::milliseconds timeout_ = kDefaultTimeout;
};

}  // namespace gflow
