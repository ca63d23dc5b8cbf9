// SPDX-License-Identifier: Apache-2.0
//
// Element types of checkpoint tensors and the half/bfloat16 codecs.
//
// Decoding is exact: every 16-bit pattern (normal, subnormal, inf, NaN)
// maps to the 64-bit float with the same value, NaN payloads included.
// Encoding rounds to nearest, ties to even, directly from the double
// representation — no intermediate float step, so no double rounding.

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>

namespace weightlens::io {

enum class DTypeTag : std::uint8_t { F64, F32, F16, BF16, Unsupported };

struct DType {
    DTypeTag tag = DTypeTag::Unsupported;
    std::string wire_name;  // exact dtype string used in file headers

    static DType from_wire(std::string_view s) {
        DType d;
        d.wire_name.assign(s);
        if (s == "F64") d.tag = DTypeTag::F64;
        else if (s == "F32") d.tag = DTypeTag::F32;
        else if (s == "F16") d.tag = DTypeTag::F16;
        else if (s == "BF16") d.tag = DTypeTag::BF16;
        else d.tag = DTypeTag::Unsupported;
        return d;
    }

    static DType f64() { return from_wire("F64"); }
    static DType f32() { return from_wire("F32"); }
    static DType f16() { return from_wire("F16"); }
    static DType bf16() { return from_wire("BF16"); }

    bool supported() const { return tag != DTypeTag::Unsupported; }

    // Element width in bytes; 0 when the wire name is not recognized at all.
    std::size_t byte_width() const {
        switch (tag) {
            case DTypeTag::F64: return 8;
            case DTypeTag::F32: return 4;
            case DTypeTag::F16: return 2;
            case DTypeTag::BF16: return 2;
            case DTypeTag::Unsupported: break;
        }
        const std::string_view s = wire_name;
        if (s == "BOOL" || s == "U8" || s == "I8" || s == "F8_E4M3" || s == "F8_E5M2") return 1;
        if (s == "I16" || s == "U16") return 2;
        if (s == "I32" || s == "U32") return 4;
        if (s == "I64" || s == "U64") return 8;
        return 0;
    }

    bool operator==(const DType& o) const { return tag == o.tag && wire_name == o.wire_name; }
};

namespace detail {

// Decode a small IEEE binary float (ExpBits exponent, ManBits mantissa,
// one sign bit) to double. Total on all bit patterns.
template <int ExpBits, int ManBits>
inline double decode_small_float(std::uint16_t bits) {
    constexpr int kBias = (1 << (ExpBits - 1)) - 1;
    constexpr int kExpMax = (1 << ExpBits) - 1;
    const bool neg = ((bits >> (ExpBits + ManBits)) & 1u) != 0;
    const int exp = (bits >> ManBits) & kExpMax;
    const std::uint16_t man = bits & ((1u << ManBits) - 1u);

    if (exp == kExpMax) {
        if (man == 0) {
            const double inf = std::numeric_limits<double>::infinity();
            return neg ? -inf : inf;
        }
        // NaN: left-align the payload in the double mantissa so a later
        // encode can restore the original pattern.
        std::uint64_t dbits = 0x7FF0000000000000ull |
                              (static_cast<std::uint64_t>(man) << (52 - ManBits));
        if (neg) dbits |= 0x8000000000000000ull;
        return std::bit_cast<double>(dbits);
    }
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(man), 1 - kBias - ManBits);
    } else {
        v = std::ldexp(static_cast<double>(man) + static_cast<double>(1u << ManBits),
                       exp - kBias - ManBits);
    }
    return neg ? -v : v;
}

// Encode double to a small IEEE binary float with round-to-nearest-even.
template <int ExpBits, int ManBits>
inline std::uint16_t encode_small_float(double v) {
    constexpr int kBias = (1 << (ExpBits - 1)) - 1;
    constexpr int kExpMax = (1 << ExpBits) - 1;
    const std::uint64_t b = std::bit_cast<std::uint64_t>(v);
    const auto sign = static_cast<std::uint16_t>((b >> 63) << (ExpBits + ManBits));
    const int dexp = static_cast<int>((b >> 52) & 0x7FF);
    const std::uint64_t dman = b & 0xFFFFFFFFFFFFFull;

    if (dexp == 0x7FF) {
        if (dman == 0) return sign | static_cast<std::uint16_t>(kExpMax << ManBits);
        auto payload = static_cast<std::uint16_t>(dman >> (52 - ManBits));
        if (payload == 0) payload = static_cast<std::uint16_t>(1u << (ManBits - 1));
        return sign | static_cast<std::uint16_t>(kExpMax << ManBits) | payload;
    }
    // Double subnormals sit far below the smallest target subnormal.
    if (dexp == 0) return sign;

    int te = dexp - 1023 + kBias;  // tentative biased target exponent
    if (te >= kExpMax) return sign | static_cast<std::uint16_t>(kExpMax << ManBits);

    const std::uint64_t sig = dman | (1ull << 52);
    int shift = 52 - ManBits;
    if (te <= 0) {  // subnormal target
        shift += 1 - te;
        te = 0;
    }
    if (shift >= 64) return sign;

    std::uint64_t keep = sig >> shift;
    const std::uint64_t rem = sig & ((1ull << shift) - 1ull);
    const std::uint64_t half = 1ull << (shift - 1);
    if (rem > half || (rem == half && (keep & 1ull))) ++keep;

    // Mantissa carries roll into the exponent field arithmetically; a carry
    // past the largest normal becomes infinity, which is the correct
    // round-to-nearest result there.
    std::uint32_t out;
    if (te == 0) {
        out = static_cast<std::uint32_t>(keep);
    } else {
        out = static_cast<std::uint32_t>((static_cast<std::uint64_t>(te) << ManBits) +
                                         (keep - (1ull << ManBits)));
    }
    const auto inf_bits = static_cast<std::uint32_t>(kExpMax) << ManBits;
    if (out >= inf_bits) out = inf_bits;
    return sign | static_cast<std::uint16_t>(out);
}

}  // namespace detail

inline double decode_f16(std::uint16_t bits) { return detail::decode_small_float<5, 10>(bits); }
inline double decode_bf16(std::uint16_t bits) { return detail::decode_small_float<8, 7>(bits); }
inline std::uint16_t encode_f16(double v) { return detail::encode_small_float<5, 10>(v); }
inline std::uint16_t encode_bf16(double v) { return detail::encode_small_float<8, 7>(v); }

inline double decode_f32(std::uint32_t bits) {
    return static_cast<double>(std::bit_cast<float>(bits));
}

inline std::uint32_t encode_f32(double v) {
    if (std::isnan(v)) {
        const std::uint64_t b = std::bit_cast<std::uint64_t>(v);
        auto payload = static_cast<std::uint32_t>((b & 0xFFFFFFFFFFFFFull) >> 29);
        if (payload == 0) payload = 0x400000u;
        return static_cast<std::uint32_t>((b >> 63) << 31) | 0x7F800000u | payload;
    }
    return std::bit_cast<std::uint32_t>(static_cast<float>(v));
}

}  // namespace weightlens::io
