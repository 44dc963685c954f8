// SPDX-License-Identifier: Apache-2.0
//
// Error corrections built on the block quantizer:
//   MBS  macro-block scaling: one 8-bit mantissa (1 + k/256) per macro block,
//        applied as prescale -> Q -> postscale
//   OF   outlier fallback: x1 = Q(x), x2 = Q(x - x1), x_of = x1 + alpha * x2
//   AQN  scheduled Gaussian weight noise, relative to the tensor RMS

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mxdecomp/quantizer.hpp"
#include "mxdecomp/tensor.hpp"

namespace mxdecomp {

enum class MbsSelection {
  /// argmin over all 256 codes of the macro-block reconstruction error.
  exhaustive,
  /// k = floor((2^delta - 1) * 256) from the macro-block maximum.
  closed_form,
};

struct MbsConfig {
  static constexpr int mantissa_levels = 256;

  std::size_t macro_block_size = 128;
  MbsSelection selection = MbsSelection::exhaustive;

  /// Throws std::invalid_argument unless macro_block_size is a positive
  /// multiple of the block size.
  void validate(const BlockQuantConfig& quant) const;
};

struct OfConfig {
  double alpha = 0.5;
  void validate() const;
};

/// Noise multipliers matched by substring against tensor names; the first
/// matching pattern wins.
struct AqnSchedule {
  double sigma_start = 0.01;
  double sigma_end = 0.001;
  int num_stages = 10;
  std::vector<std::pair<std::string, double>> multipliers{{"post_attention_layernorm", 1.414}};

  void validate() const;
  std::vector<double> stages() const;
  double multiplier_for(std::string_view tensor_name) const;
};

/// Prescale by (1 + code/256), quantize each block with Q, postscale.
void mbs_qdq_with_code(std::span<const double> macro_block, int code, const BlockQuantConfig& quant,
                       std::span<double> out);

/// Mantissa code for one macro block; 0 for an all-zero block. Ties in the
/// exhaustive search resolve to the smallest code.
int mbs_select_mantissa(std::span<const double> macro_block, const BlockQuantConfig& quant,
                        const MbsConfig& config);

struct MbsResult {
  Tensor x_hat;
  /// One code per macro block, row-major along the innermost axis.
  std::vector<std::uint8_t> mantissa_codes;
};

MbsResult mbs_qdq(const Tensor& tensor, const BlockQuantConfig& quant, const MbsConfig& config);

struct OfResult {
  Tensor x_hat;
  Tensor pass1;
  Tensor pass2;
};

/// With `mbs` set, MBS wraps Q in both passes.
OfResult of_qdq(const Tensor& tensor, const OfConfig& of, const BlockQuantConfig& quant,
                const std::optional<MbsConfig>& mbs = std::nullopt);

struct DzRecovery {
  /// Fraction of all elements inside the ideal deadzone.
  double before = 0.0;
  /// Fraction of all elements inside the ideal deadzone whose reconstruction is exactly 0.
  double after = 0.0;
};

DzRecovery dz_recovery_rate(const Tensor& tensor, const Tensor& reconstruction,
                            const BlockQuantConfig& quant);

/// sigma_k = sigma_start * (sigma_end / sigma_start)^(k / (K - 1)).
std::vector<double> aqn_schedule(double sigma_start, double sigma_end, int num_stages);

/// Adds N(0, (sigma * multiplier * rms(x))^2) noise elementwise. Element i of
/// tensor `name` draws from position i of a stream keyed by (seed, name).
Tensor aqn_apply(const Tensor& tensor, double sigma, std::uint64_t seed, double multiplier,
                 std::string_view name = {});

double rms(std::span<const double> values);

}  // namespace mxdecomp
