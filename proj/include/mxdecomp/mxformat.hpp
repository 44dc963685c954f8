// SPDX-License-Identifier: Apache-2.0
//
// E2M1 element grid and E8Mk block-scale codes used by the MXFP4 emulation.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace mxdecomp {

/// Non-negative magnitudes of the E2M1 element grid. The signed grid is
/// {0, +-0.5, +-1, +-1.5, +-2, +-3, +-4, +-6}.
struct ElementGrid {
  static constexpr std::array<double, 8> values{0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
  static constexpr std::size_t size = values.size();
  static constexpr double q_max = 6.0;
  static constexpr double q_min = 0.5;
  /// |u| below this rounds to zero under the ideal scale.
  static constexpr double deadzone_edge = q_min / 2.0;
};

inline constexpr int kMaxScaleMantissaBits = 8;

/// Signed element code: sign plus an index into ElementGrid::values.
/// Stored as a single signed integer in [-7, 7]; zero carries no sign.
class GridCode {
 public:
  constexpr GridCode() = default;

  /// Throws std::out_of_range unless |raw| < ElementGrid::size.
  static GridCode from_raw(int raw);
  static GridCode make(bool negative, unsigned magnitude_index);

  constexpr int raw() const { return value_; }
  constexpr bool negative() const { return value_ < 0; }
  constexpr unsigned magnitude_index() const {
    return static_cast<unsigned>(value_ < 0 ? -value_ : value_);
  }

  friend constexpr bool operator==(GridCode, GridCode) = default;

 private:
  constexpr explicit GridCode(std::int8_t v) : value_(v) {}
  std::int8_t value_ = 0;
};

/// Nearest E2M1 code to u. Saturates at +-q_max. Exact midpoints resolve to
/// the even magnitude index. Throws std::domain_error("non-finite input").
GridCode nearest_grid_code(double u);

/// Exact signed grid value of a code.
double decode_grid(GridCode code);

/// Block scale 2^exponent * (1 + mantissa_code / 2^mantissa_bits).
/// mantissa_bits == 0 is E8M0. The exponent range is not clamped.
struct ScaleCode {
  int exponent = 0;
  std::uint32_t mantissa_code = 0;
  int mantissa_bits = 0;

  double decode() const;

  /// The unit scale 2^0 at the given mantissa width; used for all-zero blocks.
  static ScaleCode unit(int mantissa_bits);

  friend bool operator==(const ScaleCode&, const ScaleCode&) = default;
};

/// Smallest E8Mk value >= s_star. For mantissa_bits == 0 this is
/// 2^ceil(log2 s_star). Throws std::invalid_argument for s_star <= 0,
/// non-finite s_star or mantissa_bits outside [0, 8].
ScaleCode encode_scale_ceiling(double s_star, int mantissa_bits);

}  // namespace mxdecomp
