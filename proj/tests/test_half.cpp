// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "gflow/errors.hpp"
#include "gflow/half.hpp"

using namespace gflow;

TEST_CASE("zero encodes to 0x0000 and round-trips") {
    CHECK(float_to_half_bits(0.0f) == 0x0000);
    CHECK(half_bits_to_float(0x0000) == 0.0f);
    CHECK(float_to_half_bits(-0.0f) == 0x8000);
    CHECK(std::signbit(half_bits_to_float(0x8000)));
}

TEST_CASE("1.0 encodes to 0x3C00") {
    CHECK(float_to_half_bits(1.0f) == 0x3C00);
    CHECK(half_bits_to_float(0x3C00) == 1.0f);
}

TEST_CASE("values above the largest finite half clamp to 65504") {
    CHECK(float_to_half_bits(70000.0f) == kHalfMaxFiniteBits);
    CHECK(half_bits_to_float(float_to_half_bits(70000.0f)) == 65504.0f);
    CHECK(float_to_half_bits(-70000.0f) == (0x8000 | kHalfMaxFiniteBits));
    CHECK(float_to_half_bits(std::numeric_limits<float>::infinity()) ==
          kHalfMaxFiniteBits);
    // NaN maps to a quiet half NaN, not a finite value.
    const std::uint16_t qnan =
        float_to_half_bits(std::numeric_limits<float>::quiet_NaN());
    CHECK((qnan & 0x7C00) == 0x7C00);
    CHECK((qnan & 0x03FF) != 0);
}

TEST_CASE("exhaustive round-trip over every finite half bit pattern") {
    int checked = 0;
    for (std::uint32_t h = 0; h <= 0xFFFF; ++h) {
        const std::uint16_t bits = static_cast<std::uint16_t>(h);
        if ((bits & 0x7C00) == 0x7C00) continue;  // inf and NaN patterns
        const float f = half_bits_to_float(bits);
        const std::uint16_t back = float_to_half_bits(f);
        if (f == 0.0f) {
            // +0 and -0 both round-trip to their own sign.
            CHECK(back == bits);
        } else {
            REQUIRE(back == bits);
        }
        ++checked;
    }
    CHECK(checked == 63488);
}

TEST_CASE("encode relative error bounded by 2^-11 for normal-range inputs") {
    std::mt19937_64 rng(7);
    std::normal_distribution<float> dist(0.0f, 10.0f);
    const double bound = std::ldexp(1.0, -11);
    for (int i = 0; i < 1000000; ++i) {
        float v = dist(rng);
        // Keep inputs inside the half normal range [2^-14, 65504).
        if (std::fabs(v) < 6.2e-5f || std::fabs(v) >= 65504.0f) continue;
        const float decoded = half_bits_to_float(float_to_half_bits(v));
        const double rel = std::fabs(decoded - v) / std::fabs(v);
        REQUIRE(rel <= bound);
    }
}

TEST_CASE("round-to-nearest-even at the halfway point") {
    // 1 + 2^-11 is exactly halfway between 1.0 and the next half value
    // 1 + 2^-10; ties go to the even mantissa (1.0, pattern 0x3C00).
    const float halfway = 1.0f + std::ldexp(1.0f, -11);
    CHECK(float_to_half_bits(halfway) == 0x3C00);
    // 1 + 3*2^-11 lies halfway between 0x3C01 and 0x3C02; even is 0x3C02.
    const float halfway2 = 1.0f + 3.0f * std::ldexp(1.0f, -11);
    CHECK(float_to_half_bits(halfway2) == 0x3C02);
}

TEST_CASE("byte codec is little-endian and rejects odd lengths") {
    const std::vector<float> vals = {0.0f, 1.0f, -2.5f};
    const auto bytes = encode_half(vals);
    REQUIRE(bytes.size() == 6);
    CHECK(std::to_integer<int>(bytes[0]) == 0x00);
    CHECK(std::to_integer<int>(bytes[1]) == 0x00);
    CHECK(std::to_integer<int>(bytes[2]) == 0x00);
    CHECK(std::to_integer<int>(bytes[3]) == 0x3C);

    const auto decoded = decode_half(bytes);
    REQUIRE(decoded.size() == 3);
    CHECK(decoded[0] == 0.0f);
    CHECK(decoded[1] == 1.0f);
    CHECK(decoded[2] == -2.5f);

    std::vector<std::byte> odd(bytes.begin(), bytes.begin() + 3);
    CHECK_THROWS_AS(decode_half(odd), ConfigError);
}

TEST_CASE("subnormal halves are decoded exactly") {
    // Smallest positive subnormal half is 2^-24.
    CHECK(half_bits_to_float(0x0001) == std::ldexp(1.0f, -24));
    CHECK(float_to_half_bits(std::ldexp(1.0f, -24)) == 0x0001);
    // Largest subnormal.
    CHECK(half_bits_to_float(0x03FF) == 1023.0f * std::ldexp(1.0f, -24));
}
