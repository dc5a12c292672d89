// SPDX-License-Identifier: Apache-2.0

#include "gflow/tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>
#include <unordered_map>

namespace gflow {

namespace {

struct SockAddr {
    std::string host;
    std::uint16_t port;
};

SockAddr parse_address(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw ConfigError("bad address '" + addr + "'");
    const int port = std::stoi(addr.substr(colon + 1));
    if (port <= 0 || port > 65535) throw ConfigError("bad port in '" + addr + "'");
    return {addr.substr(0, colon), static_cast<std::uint16_t>(port)};
}

void write_all(int fd, const std::byte* data, std::size_t len) {
    while (len > 0) {
        const ssize_t n = ::write(fd, data, len);
        if (n <= 0) throw TransportError("socket write failed");
        data += n;
        len -= static_cast<std::size_t>(n);
    }
}

bool read_all(int fd, std::byte* data, std::size_t len) {
    while (len > 0) {
        const ssize_t n = ::read(fd, data, len);
        if (n <= 0) return false;  // reset or EOF
        data += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

std::uint64_t mailbox_key(int src, std::uint8_t msg_type, std::uint32_t tag) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(src)) << 40) |
           (static_cast<std::uint64_t>(msg_type) << 32) | tag;
}

}  // namespace

struct TcpTransport::Impl {
    struct Peer {
        int fd = -1;
        std::thread reader;
        std::thread writer;
        std::mutex mu;
        std::condition_variable cv;
        std::deque<std::vector<std::byte>> outbox;
        bool closing = false;
    };

    std::unordered_map<int, Peer> peers;

    // Incoming frames demultiplexed by (src, msg_type, tag).
    std::mutex box_mu;
    std::condition_variable box_cv;
    std::unordered_map<std::uint64_t, std::deque<std::vector<std::byte>>> box;
    bool poisoned = false;
    std::string poison_reason;

    int listen_fd = -1;

    void poison(const std::string& reason) {
        {
            std::lock_guard lock(box_mu);
            if (!poisoned) {
                poisoned = true;
                poison_reason = reason;
            }
        }
        box_cv.notify_all();
    }

    void deliver(std::uint64_t key, std::vector<std::byte> payload) {
        {
            std::lock_guard lock(box_mu);
            box[key].push_back(std::move(payload));
        }
        box_cv.notify_all();
    }

    void reader_loop(int src, int fd) {
        std::byte header[Frame::kHeaderSize];
        for (;;) {
            if (!read_all(fd, header, Frame::kHeaderSize)) {
                poison("connection to rank " + std::to_string(src) + " reset");
                return;
            }
            Frame f;
            std::uint64_t len;
            try {
                len = Frame::decode_header(std::span<const std::byte>(header), f);
            } catch (const ProtocolError& e) {
                poison(std::string("protocol error from rank ") + std::to_string(src) +
                       ": " + e.what());
                return;
            }
            std::vector<std::byte> payload(len);
            if (len > 0 && !read_all(fd, payload.data(), len)) {
                poison("connection to rank " + std::to_string(src) + " reset mid-frame");
                return;
            }
            deliver(mailbox_key(static_cast<int>(f.src_rank), f.msg_type, f.tag),
                    std::move(payload));
        }
    }

    void writer_loop(Peer& peer) {
        for (;;) {
            std::vector<std::byte> buf;
            {
                std::unique_lock lock(peer.mu);
                peer.cv.wait(lock, [&] { return peer.closing || !peer.outbox.empty(); });
                if (peer.outbox.empty()) return;
                buf = std::move(peer.outbox.front());
                peer.outbox.pop_front();
            }
            try {
                write_all(peer.fd, buf.data(), buf.size());
            } catch (const TransportError& e) {
                poison(e.what());
                return;
            }
        }
    }
};

std::vector<std::string> TcpTransport::loopback_addresses(int world_size,
                                                          std::uint16_t port_base) {
    std::vector<std::string> out;
    for (int r = 0; r < world_size; ++r) {
        out.push_back("127.0.0.1:" + std::to_string(port_base + r));
    }
    return out;
}

TcpTransport::TcpTransport(int rank, int world_size,
                           const std::vector<std::string>& peers)
    : rank_(rank), world_size_(world_size), impl_(std::make_unique<Impl>()) {
    if (peers.size() != static_cast<std::size_t>(world_size)) {
        throw ConfigError("peer address list must have world_size entries");
    }
    if (rank < 0 || rank >= world_size) throw ConfigError("rank outside world");

    const SockAddr self = parse_address(peers[static_cast<std::size_t>(rank)]);

    // Listen for higher-ranked peers.
    const int expected_accepts = world_size - 1 - rank;
    if (expected_accepts > 0 || world_size > 1) {
        impl_->listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (impl_->listen_fd < 0) throw TransportError("socket() failed");
        int one = 1;
        ::setsockopt(impl_->listen_fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_ANY);
        addr.sin_port = htons(self.port);
        if (::bind(impl_->listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
            throw TransportError("bind failed on port " + std::to_string(self.port));
        }
        if (::listen(impl_->listen_fd, world_size) < 0) {
            throw TransportError("listen failed");
        }
    }

    auto install_peer = [&](int peer_rank, int fd) {
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        auto& peer = impl_->peers[peer_rank];
        peer.fd = fd;
        peer.reader = std::thread([this, peer_rank, fd] { impl_->reader_loop(peer_rank, fd); });
        peer.writer = std::thread([this, &peer] { impl_->writer_loop(peer); });
    };

    // Connect to lower-ranked peers, retrying while they come up.
    for (int j = 0; j < rank; ++j) {
        const SockAddr target = parse_address(peers[static_cast<std::size_t>(j)]);
        const auto deadline = std::chrono::steady_clock::now() + timeout_;
        int fd = -1;
        for (;;) {
            fd = ::socket(AF_INET, SOCK_STREAM, 0);
            if (fd < 0) throw TransportError("socket() failed");
            sockaddr_in addr{};
            addr.sin_family = AF_INET;
            addr.sin_port = htons(target.port);
            if (::inet_pton(AF_INET, target.host.c_str(), &addr.sin_addr) != 1) {
                ::close(fd);
                throw ConfigError("bad host '" + target.host + "'");
            }
            if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) break;
            ::close(fd);
            if (std::chrono::steady_clock::now() > deadline) {
                throw TransportError("rank " + std::to_string(j) + " unreachable at " +
                                     peers[static_cast<std::size_t>(j)]);
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        // Handshake: announce our rank and world size.
        Frame hs;
        hs.msg_type = kMsgHandshake;
        hs.src_rank = static_cast<std::uint32_t>(rank);
        hs.payload.resize(4);
        const std::uint32_t ws = static_cast<std::uint32_t>(world_size);
        std::memcpy(hs.payload.data(), &ws, 4);
        const auto bytes = hs.encode();
        write_all(fd, bytes.data(), bytes.size());
        install_peer(j, fd);
    }

    // Accept higher-ranked peers.
    for (int a = 0; a < expected_accepts; ++a) {
        const int fd = ::accept(impl_->listen_fd, nullptr, nullptr);
        if (fd < 0) throw TransportError("accept failed");
        std::byte header[Frame::kHeaderSize];
        if (!read_all(fd, header, Frame::kHeaderSize)) {
            throw TransportError("handshake read failed");
        }
        Frame hs;
        const std::uint64_t len = Frame::decode_header(std::span<const std::byte>(header), hs);
        if (hs.msg_type != kMsgHandshake || len != 4) {
            throw ProtocolError("expected handshake frame");
        }
        std::vector<std::byte> payload(len);
        if (!read_all(fd, payload.data(), len)) throw TransportError("handshake truncated");
        std::uint32_t peer_world;
        std::memcpy(&peer_world, payload.data(), 4);
        if (peer_world != static_cast<std::uint32_t>(world_size)) {
            throw ProtocolError("world_size mismatch: peer says " +
                                std::to_string(peer_world));
        }
        install_peer(static_cast<int>(hs.src_rank), fd);
    }
}

TcpTransport::~TcpTransport() {
    for (auto& [r, peer] : impl_->peers) {
        {
            std::lock_guard lock(peer.mu);
            peer.closing = true;
        }
        peer.cv.notify_all();
    }
    for (auto& [r, peer] : impl_->peers) {
        if (peer.writer.joinable()) peer.writer.join();
        if (peer.fd >= 0) ::shutdown(peer.fd, SHUT_RDWR);
        if (peer.reader.joinable()) peer.reader.join();
        if (peer.fd >= 0) ::close(peer.fd);
    }
    if (impl_->listen_fd >= 0) ::close(impl_->listen_fd);
}

void TcpTransport::send_frame(int dst, std::uint8_t msg_type, std::uint32_t tag,
                              std::span<const std::byte> payload) {
    Frame f;
    f.msg_type = msg_type;
    f.tag = tag;
    f.src_rank = static_cast<std::uint32_t>(rank_);
    f.payload.assign(payload.begin(), payload.end());
    auto& peer = impl_->peers.at(dst);
    {
        std::lock_guard lock(peer.mu);
        peer.outbox.push_back(f.encode());
    }
    peer.cv.notify_all();
}

std::vector<std::byte> TcpTransport::recv_frame(int src, std::uint8_t msg_type,
                                                std::uint32_t tag) {
    const std::uint64_t key = mailbox_key(src, msg_type, tag);
    std::unique_lock lock(impl_->box_mu);
    auto available = [&] {
        auto it = impl_->box.find(key);
        return it != impl_->box.end() && !it->second.empty();
    };
    const bool ok = impl_->box_cv.wait_for(
        lock, timeout_, [&] { return impl_->poisoned || available(); });
    // A frame that arrived before the connection dropped is still valid.
    if (!available() && impl_->poisoned) throw TransportError(impl_->poison_reason);
    if (!ok) {
        throw TransportError("recv timeout at rank " + std::to_string(rank_) +
                             " (src " + std::to_string(src) + ", tag " +
                             std::to_string(tag) + ")");
    }
    auto& q = impl_->box[key];
    std::vector<std::byte> payload = std::move(q.front());
    q.pop_front();
    return payload;
}

void TcpTransport::send(int dst, std::uint32_t tag, std::span<const std::byte> payload,
                        const std::string& phase) {
    if (dst < 0 || dst >= world_size_ || dst == rank_) {
        throw ConfigError("invalid send destination " + std::to_string(dst));
    }
    send_frame(dst, kMsgData, tag, payload);
    stats_.record_send(phase, payload.size());
}

std::vector<std::byte> TcpTransport::recv(int src, std::uint32_t tag,
                                          const std::string& phase) {
    auto payload = recv_frame(src, kMsgData, tag);
    stats_.record_recv(phase, payload.size());
    return payload;
}

void TcpTransport::barrier() {
    const std::uint32_t seq = barrier_seq_++;
    if (world_size_ == 1) return;
    if (rank_ == 0) {
        std::string absent;
        for (int r = 1; r < world_size_; ++r) {
            try {
                recv_frame(r, kMsgBarrier, seq);
            } catch (const TransportError&) {
                absent += (absent.empty() ? "" : ", ") + std::to_string(r);
            }
        }
        if (!absent.empty()) {
            throw TransportError("barrier timeout, absent ranks: " + absent);
        }
        for (int r = 1; r < world_size_; ++r) send_frame(r, kMsgBarrier, seq, {});
    } else {
        send_frame(0, kMsgBarrier, seq, {});
        recv_frame(0, kMsgBarrier, seq);
    }
}

}  // namespace gflow
