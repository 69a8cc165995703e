#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace mirage::half {

inline constexpr double kMax = 65504.0;

/// IEEE 754 binary16 encoding of `x`, round-to-nearest-even. Values beyond the
/// representable range encode as infinity.
inline std::uint16_t from_double(double x)
{
    std::uint16_t sign = std::signbit(x) ? 0x8000u : 0u;
    if (std::isnan(x)) {
        return static_cast<std::uint16_t>(sign | 0x7e00u);
    }
    const double a = std::fabs(x);
    if (std::isinf(a)) {
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    constexpr double kMinNormal = 6.103515625e-05;  // 2^-14
    if (a < kMinNormal) {
        // Subnormal grid has spacing 2^-24; a carry to 1024 lands on the smallest normal.
        const double q = std::nearbyint(std::ldexp(a, 24));
        return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(q));
    }
    int e2 = 0;
    const double frac = std::frexp(a, &e2);  // a = frac * 2^e2, frac in [0.5, 1)
    int exponent = e2 - 1;
    double mant = std::nearbyint((frac * 2.0 - 1.0) * 1024.0);
    if (mant >= 1024.0) {
        mant = 0.0;
        ++exponent;
    }
    if (exponent > 15) {
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>((exponent + 15) << 10) |
                                      static_cast<std::uint16_t>(mant));
}

inline double to_double(std::uint16_t bits)
{
    const bool negative = (bits & 0x8000u) != 0;
    const int exponent = (bits >> 10) & 0x1f;
    const int mant = bits & 0x3ff;
    double value = 0.0;
    if (exponent == 0) {
        value = std::ldexp(static_cast<double>(mant), -24);
    } else if (exponent == 31) {
        value = mant == 0 ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN();
    } else {
        value = std::ldexp(1.0 + mant / 1024.0, exponent - 15);
    }
    return negative ? -value : value;
}

inline double round_trip(double x) { return to_double(from_double(x)); }

/// True when `x` encodes to a finite half value.
inline bool representable(double x) { return std::isfinite(x) && std::isfinite(round_trip(x)); }

}  // namespace mirage::half
