/*
 * Copyright (c) 2026, The fp8rl Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Software E4M3 (1 sign | 4 exponent | 3 mantissa, bias 7, no infinities).
// The only NaN encodings are S.1111.111 (0x7F and 0xFF); the largest finite
// magnitude is 1.75 * 2^8 = 448.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "fp8rl/error.hpp"

namespace fp8rl {

struct Fp8Code {
  std::uint8_t bits = 0;

  constexpr Fp8Code() = default;
  constexpr explicit Fp8Code(std::uint8_t b) : bits(b) {}

  constexpr bool is_nan() const noexcept { return (bits & 0x7F) == 0x7F; }
  constexpr bool sign() const noexcept { return (bits & 0x80) != 0; }

  friend constexpr bool operator==(Fp8Code, Fp8Code) = default;
};

namespace e4m3 {

inline constexpr int kExponentBias = 7;
inline constexpr int kMantissaBits = 3;
inline constexpr double kMaxFinite = 448.0;
inline constexpr double kMinNormal = 0.015625;          // 2^-6
inline constexpr double kMinSubnormal = 0.001953125;    // 2^-9
inline constexpr Fp8Code kPositiveZero{0x00};
inline constexpr Fp8Code kNegativeZero{0x80};
inline constexpr Fp8Code kMaxPositive{0x7E};
inline constexpr Fp8Code kMaxNegative{0xFE};
inline constexpr Fp8Code kNaN{0x7F};

enum class Overflow {
  kSaturate,  // |x| > 448 clamps to +-448
  kThrow,     // |x| > 448 raises OverflowError
};

namespace detail {

constexpr double decode_exact(std::uint8_t bits) {
  const int sign = bits >> 7;
  const int exp = (bits >> 3) & 0xF;
  const int man = bits & 0x7;
  if (exp == 0xF && man == 0x7) return std::numeric_limits<double>::quiet_NaN();
  double mag = 0.0;
  if (exp == 0) {
    mag = kMinNormal * (man / 8.0);
  } else {
    double p = 1.0;
    for (int e = exp - kExponentBias; e > 0; --e) p *= 2.0;
    for (int e = exp - kExponentBias; e < 0; ++e) p *= 0.5;
    mag = p * (1.0 + man / 8.0);
  }
  return sign ? -mag : mag;
}

inline constexpr std::array<float, 256> kDecodeTable = [] {
  std::array<float, 256> t{};
  for (int b = 0; b < 256; ++b) t[b] = static_cast<float>(decode_exact(static_cast<std::uint8_t>(b)));
  return t;
}();

}  // namespace detail

// Exact value of the encoding. Every finite E4M3 value is exactly
// representable in binary32, so the float result carries no rounding.
inline float decode(Fp8Code c) noexcept { return detail::kDecodeTable[c.bits]; }

// Round-to-nearest-even conversion. Works for any binary floating type whose
// precision is at least 4 bits wider than E4M3 (float, double). All scalings
// below are by powers of two and therefore exact.
template <typename Real>
Fp8Code encode(Real x, Overflow overflow = Overflow::kSaturate) {
  static_assert(std::numeric_limits<Real>::is_iec559);
  if (std::isnan(x)) return kNaN;
  const std::uint8_t sign = std::signbit(x) ? 0x80 : 0x00;
  const Real a = std::fabs(x);
  if (a > static_cast<Real>(kMaxFinite)) {
    if (overflow == Overflow::kThrow) {
      throw OverflowError("e4m3 encode: |x| = " + std::to_string(static_cast<double>(a)) +
                          " exceeds 448");
    }
    return Fp8Code(static_cast<std::uint8_t>(sign | kMaxPositive.bits));
  }
  if (a < static_cast<Real>(kMinNormal)) {
    // Subnormal grid has spacing 2^-9; a rounded count of 8 lands exactly on
    // the min normal, whose bit pattern is also 8.
    const Real q = std::nearbyint(std::ldexp(a, 9));
    return Fp8Code(static_cast<std::uint8_t>(sign | static_cast<std::uint8_t>(q)));
  }
  int e2 = 0;
  (void)std::frexp(a, &e2);  // a = f * 2^e2, f in [0.5, 1)
  int exponent = e2 - 1;     // a in [2^exponent, 2^(exponent+1))
  Real q = std::nearbyint(std::ldexp(a, kMantissaBits - exponent));  // in [8, 16]
  if (q == Real(16)) {
    q = Real(8);
    ++exponent;
  }
  const int biased = exponent + kExponentBias;
  const auto man = static_cast<std::uint8_t>(static_cast<int>(q) - 8);
  return Fp8Code(static_cast<std::uint8_t>(sign | (biased << kMantissaBits) | man));
}

// decode(encode(x)) without materializing the code.
template <typename Real>
Real round_trip(Real x, Overflow overflow = Overflow::kSaturate) {
  return static_cast<Real>(decode(encode(x, overflow)));
}

}  // namespace e4m3

}  // namespace fp8rl
