// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/mxformat.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mxdecomp {

namespace {

// Rounding boundaries between consecutive grid magnitudes. All are dyadic,
// so the comparisons below are exact.
constexpr std::array<double, ElementGrid::size - 1> kMidpoints = [] {
  std::array<double, ElementGrid::size - 1> m{};
  for (std::size_t i = 0; i + 1 < ElementGrid::size; ++i) {
    m[i] = 0.5 * (ElementGrid::values[i] + ElementGrid::values[i + 1]);
  }
  return m;
}();

}  // namespace

GridCode GridCode::from_raw(int raw) {
  const int limit = static_cast<int>(ElementGrid::size);
  if (raw <= -limit || raw >= limit) {
    throw std::out_of_range("grid code out of range: " + std::to_string(raw));
  }
  return GridCode(static_cast<std::int8_t>(raw));
}

GridCode GridCode::make(bool negative, unsigned magnitude_index) {
  if (magnitude_index >= ElementGrid::size) {
    throw std::out_of_range("grid magnitude index out of range: " +
                            std::to_string(magnitude_index));
  }
  const int v = static_cast<int>(magnitude_index);
  return GridCode(static_cast<std::int8_t>(negative ? -v : v));
}

GridCode nearest_grid_code(double u) {
  if (!std::isfinite(u)) {
    throw std::domain_error("non-finite input");
  }
  const double a = std::fabs(u);
  unsigned idx = 0;
  // Linear scan: at most seven compares, branch-predictable on real data.
  while (idx < kMidpoints.size() && a > kMidpoints[idx]) {
    ++idx;
  }
  // a <= kMidpoints[idx] here; on an exact tie pick the even index.
  if (idx < kMidpoints.size() && a == kMidpoints[idx] && (idx % 2) == 1) {
    ++idx;
  }
  if (idx == 0) {
    return GridCode{};
  }
  return GridCode::make(u < 0.0, idx);
}

double decode_grid(GridCode code) {
  const unsigned idx = code.magnitude_index();
  if (idx >= ElementGrid::size) {
    throw std::out_of_range("grid code out of range");
  }
  const double mag = ElementGrid::values[idx];
  return code.negative() ? -mag : mag;
}

double ScaleCode::decode() const {
  const double mant = 1.0 + std::ldexp(static_cast<double>(mantissa_code), -mantissa_bits);
  return std::ldexp(mant, exponent);
}

ScaleCode ScaleCode::unit(int mantissa_bits) {
  return ScaleCode{0, 0, mantissa_bits};
}

ScaleCode encode_scale_ceiling(double s_star, int mantissa_bits) {
  if (!std::isfinite(s_star) || s_star <= 0.0) {
    throw std::invalid_argument("scale must be positive and finite");
  }
  if (mantissa_bits < 0 || mantissa_bits > kMaxScaleMantissaBits) {
    throw std::invalid_argument("scale mantissa bits must be in [0, 8]");
  }
  int e2 = 0;
  const double f = std::frexp(s_star, &e2);  // s_star = f * 2^e2, f in [0.5, 1)
  const double significand = 2.0 * f;       // in [1, 2), exact
  int exponent = e2 - 1;
  // (significand - 1) * 2^M is exact: Sterbenz subtraction, power-of-two scale.
  const double frac_steps = std::ldexp(significand - 1.0, mantissa_bits);
  double code = std::ceil(frac_steps);
  const double levels = std::ldexp(1.0, mantissa_bits);
  if (code >= levels) {
    code = 0.0;
    ++exponent;
  }
  return ScaleCode{exponent, static_cast<std::uint32_t>(code), mantissa_bits};
}

}  // namespace mxdecomp
