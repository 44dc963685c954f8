// SPDX-License-Identifier: Apache-2.0
//
// MXFP4 block quantizer Q (coded E8Mk scale), the ideal-scale quantizer Q*
// (scale max|x| / q_max, uncoded), deadzone classification and tensor QDQ.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mxdecomp/mxformat.hpp"
#include "mxdecomp/tensor.hpp"

namespace mxdecomp {

struct BlockQuantConfig {
  std::size_t block_size = 32;
  int scale_mantissa_bits = 0;

  /// Throws std::invalid_argument on block_size == 0 or mantissa bits outside [0, 8].
  void validate() const;
};

struct BlockQuant {
  std::vector<GridCode> codes;
  /// Scale actually applied to the codes.
  double scale = 1.0;
  /// Present for Q; absent for Q*, whose scale is not coded.
  std::optional<ScaleCode> scale_code;
  double ideal_scale = 0.0;
  double block_max = 0.0;

  double dequantized(std::size_t i) const { return scale * decode_grid(codes[i]); }
  std::vector<double> dequantize() const;
};

/// max|x| / q_max; 0 for an all-zero block. Throws std::domain_error on a
/// non-finite element and std::invalid_argument on an empty block.
double ideal_scale(std::span<const double> block);

BlockQuant quantize_block(std::span<const double> block, const BlockQuantConfig& config);
BlockQuant quantize_block_ideal(std::span<const double> block, const BlockQuantConfig& config);

/// mask[i] = |x_i / s*| < q_min / 2, i.e. |x_i| < m_b / 24. The quotient is
/// the one Q* rounds, so a masked element is zero under both Q* and Q.
std::vector<bool> deadzone_mask(std::span<const double> block);

// Allocation-free block kernels used by the tensor-level paths. `out` must
// have the same length as `block`.
void qdq_block_into(std::span<const double> block, int scale_mantissa_bits, std::span<double> out);
void qdq_block_ideal_into(std::span<const double> block, std::span<double> out);

struct QuantizedTensor {
  Shape shape;
  BlockQuantConfig config;
  std::vector<BlockQuant> blocks;
  /// Per-macro-block MBS mantissa codes; empty unless produced by MBS.
  std::vector<std::uint8_t> mbs_mantissas;

  Tensor dequantize() const;
};

QuantizedTensor quantize_tensor(const Tensor& tensor, const BlockQuantConfig& config);

/// Blockwise quantize + dequantize along the innermost axis.
Tensor qdq_tensor(const Tensor& tensor, const BlockQuantConfig& config);
/// Same as qdq_tensor with the ideal (uncoded) scale.
Tensor qdq_tensor_ideal(const Tensor& tensor, const BlockQuantConfig& config);

/// Throws std::domain_error naming the first non-finite element.
void require_finite(std::span<const double> values);

}  // namespace mxdecomp
