// SPDX-License-Identifier: Apache-2.0

#include "gflow/transport.hpp"

#include <cstring>

namespace gflow {

namespace {

void put_u32(std::byte* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFFu);
}

void put_u64(std::byte* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFFu);
}

std::uint32_t get_u32(const std::byte* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::to_integer<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const std::byte* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::to_integer<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void Frame::encode_header(const Frame& f, std::byte out[kHeaderSize]) {
    std::memcpy(out, kMagic, 4);
    out[4] = static_cast<std::byte>(f.msg_type);
    put_u32(out + 5, f.tag);
    put_u32(out + 9, f.src_rank);
    put_u64(out + 13, static_cast<std::uint64_t>(f.payload.size()));
}

std::vector<std::byte> Frame::encode() const {
    std::vector<std::byte> out(kHeaderSize + payload.size());
    encode_header(*this, out.data());
    std::memcpy(out.data() + kHeaderSize, payload.data(), payload.size());
    return out;
}

std::uint64_t Frame::decode_header(std::span<const std::byte> header, Frame& out) {
    if (header.size() < kHeaderSize) {
        throw ProtocolError("frame header truncated");
    }
    if (std::memcmp(header.data(), kMagic, 4) != 0) {
        throw ProtocolError("bad frame magic");
    }
    out.msg_type = std::to_integer<std::uint8_t>(header[4]);
    out.tag = get_u32(header.data() + 5);
    out.src_rank = get_u32(header.data() + 9);
    return get_u64(header.data() + 13);
}

Frame Frame::decode(std::span<const std::byte> bytes) {
    Frame f;
    const std::uint64_t len = decode_header(bytes, f);
    if (bytes.size() != kHeaderSize + len) {
        throw ProtocolError("frame payload length mismatch");
    }
    f.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
    return f;
}

}  // namespace gflow
