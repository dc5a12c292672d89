// SPDX-License-Identifier: Apache-2.0
//
// IEEE 754 binary16 conversion. Round-to-nearest-even on encode, values
// above the largest finite half clamp to +-65504 instead of overflowing
// to infinity. Decode is exact widening.

#pragma once

#include <bit>
#include <cstdint>
#include <cstddef>
#include <span>
#include <vector>

namespace gflow {

inline constexpr std::uint16_t kHalfMaxFiniteBits = 0x7BFF;  // 65504.0
inline constexpr float kHalfMaxFinite = 65504.0f;

inline std::uint16_t float_to_half_bits(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t exp = (bits >> 23) & 0xFFu;
    const std::uint32_t man = bits & 0x7FFFFFu;

    if (exp == 0xFFu) {
        if (man != 0) return static_cast<std::uint16_t>(sign | 0x7E00u);  // quiet NaN
        return static_cast<std::uint16_t>(sign | kHalfMaxFiniteBits);     // inf clamps
    }

    const int half_exp = static_cast<int>(exp) - 127 + 15;
    if (half_exp >= 31) {
        return static_cast<std::uint16_t>(sign | kHalfMaxFiniteBits);
    }
    if (half_exp <= 0) {
        // Subnormal half or zero. Values below half the smallest subnormal
        // round to zero.
        if (half_exp < -10) return sign;
        std::uint32_t full_man = man | 0x800000u;
        const int shift = 14 - half_exp;  // in [14, 24]
        std::uint32_t half_man = full_man >> shift;
        const std::uint32_t rem = full_man & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_man & 1u))) ++half_man;
        // A carry here rolls into the smallest normal exponent, which is the
        // correct encoding.
        return static_cast<std::uint16_t>(sign | half_man);
    }

    std::uint16_t out = static_cast<std::uint16_t>(
        sign | (static_cast<std::uint32_t>(half_exp) << 10) | (man >> 13));
    const std::uint32_t rem = man & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) ++out;
    if ((out & 0x7FFFu) >= 0x7C00u) {
        // Rounded up past the largest finite half.
        return static_cast<std::uint16_t>(sign | kHalfMaxFiniteBits);
    }
    return out;
}

inline float half_bits_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1Fu;
    const std::uint32_t man = h & 0x3FFu;

    std::uint32_t bits;
    if (exp == 0) {
        if (man == 0) {
            bits = sign;
        } else {
            // Normalize the subnormal.
            int e = -1;
            std::uint32_t m = man;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 |
                   ((m & 0x3FFu) << 13);
        }
    } else if (exp == 0x1Fu) {
        bits = sign | 0x7F800000u | (man << 13);
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (man << 13);
    }
    return std::bit_cast<float>(bits);
}

// Little-endian byte codec used on the wire and in pool snapshots.
std::vector<std::byte> encode_half(std::span<const float> values);
std::vector<float> decode_half(std::span<const std::byte> bytes);

}  // namespace gflow
