// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "oracles.hpp"
#include "weightlens/dtype.hpp"
#include "weightlens/rng.hpp"

using namespace weightlens::io;

TEST_CASE("known f16 patterns decode to exact values") {
    CHECK(decode_f16(0x3C00) == 1.0);
    CHECK(decode_f16(0x0000) == 0.0);
    CHECK(std::signbit(decode_f16(0x8000)));
    CHECK(decode_f16(0x4000) == 2.0);
    CHECK(decode_f16(0x0001) == std::ldexp(1.0, -24));  // smallest subnormal
    CHECK(decode_f16(0x7BFF) == 65504.0);               // largest normal
    CHECK(std::isinf(decode_f16(0x7C00)));
    CHECK(std::isinf(decode_f16(0xFC00)));
    CHECK(std::isnan(decode_f16(0x7E00)));
}

TEST_CASE("known bf16 patterns decode to exact values") {
    CHECK(decode_bf16(0x3F80) == 1.0);
    CHECK(decode_bf16(0x4000) == 2.0);
    CHECK(decode_bf16(0xC000) == -2.0);
    CHECK(decode_bf16(0x0000) == 0.0);
    CHECK(std::isinf(decode_bf16(0x7F80)));
    CHECK(std::isnan(decode_bf16(0x7FC0)));
}

TEST_CASE("every 16-bit pattern decodes and round-trips") {
    for (std::uint32_t b = 0; b <= 0xFFFF; ++b) {
        const auto bits = static_cast<std::uint16_t>(b);
        const double f16 = decode_f16(bits);
        const double bf16 = decode_bf16(bits);
        // Decoding is total: finite, infinite or NaN, never an error.
        REQUIRE((std::isfinite(f16) || std::isinf(f16) || std::isnan(f16)));
        REQUIRE((std::isfinite(bf16) || std::isinf(bf16) || std::isnan(bf16)));
        REQUIRE(encode_f16(f16) == bits);
        REQUIRE(encode_bf16(bf16) == bits);
    }
}

TEST_CASE("bf16 encoding is round-to-nearest-even") {
    // 1.0000001 sits far below the bf16 midpoint above 1.0 (1 + 2^-8).
    CHECK(encode_bf16(1.0000001) == 0x3F80);
    CHECK(decode_bf16(encode_bf16(1.0000001)) == 1.0);
    // Exactly halfway between 1.0 and 1 + 2^-7: ties to the even mantissa.
    CHECK(encode_bf16(1.0 + std::ldexp(1.0, -8)) == 0x3F80);
    // Just above the midpoint rounds up.
    CHECK(encode_bf16(1.0 + std::ldexp(1.0, -8) + 1e-12) == 0x3F81);
}

TEST_CASE("f16 encoding is round-to-nearest-even") {
    // Midpoint between 1.0 (mantissa 0, even) and 1 + 2^-10.
    CHECK(encode_f16(1.0 + std::ldexp(1.0, -11)) == 0x3C00);
    // Midpoint between 1 + 2^-10 (odd) and 1 + 2^-9 (even): rounds up.
    CHECK(encode_f16(1.0 + 3.0 * std::ldexp(1.0, -11)) == 0x3C02);
    // The rounding boundary to infinity sits at 65520.
    CHECK(encode_f16(65519.999) == 0x7BFF);
    CHECK(encode_f16(65520.0) == 0x7C00);
    CHECK(encode_f16(-65520.0) == 0xFC00);
    // Half the smallest subnormal ties to even zero.
    CHECK(encode_f16(std::ldexp(1.0, -25)) == 0x0000);
    CHECK(encode_f16(std::ldexp(1.0, -25) * 1.0000001) == 0x0001);
}

TEST_CASE("encoders agree with the brute-force nearest-grid oracle") {
    weightlens::rng::Xoshiro256pp rng(20240117);
    auto f16_decode = [](std::uint16_t b) { return decode_f16(b); };
    auto bf16_decode = [](std::uint16_t b) { return decode_bf16(b); };
    for (int i = 0; i < 400; ++i) {
        // Spread values across the f16 dynamic range, including subnormals.
        const double mag = std::exp(rng.uniform(std::log(1e-8), std::log(6e4)));
        const double v = rng.coin() ? mag : -mag;
        CAPTURE(v);
        REQUIRE(encode_f16(v) == oracles::nearest_in_grid(v, f16_decode));
        REQUIRE(encode_bf16(v) == oracles::nearest_in_grid(v, bf16_decode));
    }
}

TEST_CASE("f32 codec widens and narrows bit-exactly") {
    weightlens::rng::Xoshiro256pp rng(7);
    for (int i = 0; i < 1000; ++i) {
        const auto bits = static_cast<std::uint32_t>(rng.next());
        const double d = decode_f32(bits);
        if (std::isnan(d)) continue;
        REQUIRE(encode_f32(d) == bits);
    }
}

TEST_CASE("dtype table") {
    CHECK(DType::from_wire("F64").byte_width() == 8);
    CHECK(DType::from_wire("F32").byte_width() == 4);
    CHECK(DType::from_wire("F16").byte_width() == 2);
    CHECK(DType::from_wire("BF16").byte_width() == 2);
    CHECK_FALSE(DType::from_wire("I64").supported());
    CHECK(DType::from_wire("I64").byte_width() == 8);
    CHECK(DType::from_wire("U8").byte_width() == 1);
    CHECK(DType::from_wire("whatever").byte_width() == 0);
    CHECK(DType::from_wire("I64").wire_name == "I64");
}
