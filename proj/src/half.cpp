// SPDX-License-Identifier: Apache-2.0

#include "gflow/half.hpp"

#include "gflow/errors.hpp"

namespace gflow {

std::vector<std::byte> encode_half(std::span<const float> values) {
    std::vector<std::byte> out(values.size() * 2);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t h = float_to_half_bits(values[i]);
        out[2 * i] = static_cast<std::byte>(h & 0xFFu);
        out[2 * i + 1] = static_cast<std::byte>(h >> 8);
    }
    return out;
}

std::vector<float> decode_half(std::span<const std::byte> bytes) {
    if (bytes.size() % 2 != 0) {
        throw ConfigError("decode_half: odd byte count " + std::to_string(bytes.size()));
    }
    std::vector<float> out(bytes.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint16_t h = static_cast<std::uint16_t>(
            std::to_integer<std::uint16_t>(bytes[2 * i]) |
            (std::to_integer<std::uint16_t>(bytes[2 * i + 1]) << 8));
        out[i] = half_bits_to_float(h);
    }
    return out;
}

}  // namespace gflow
