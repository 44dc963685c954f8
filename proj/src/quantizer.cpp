// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/quantizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mxdecomp {

namespace {

double block_abs_max(std::span<const double> block) {
  double m = 0.0;
  for (double v : block) {
    if (!std::isfinite(v)) throw std::domain_error("non-finite input");
    m = std::max(m, std::fabs(v));
  }
  return m;
}

void check_block(std::span<const double> block, const BlockQuantConfig& config) {
  if (block.empty()) throw std::invalid_argument("empty block");
  if (block.size() > config.block_size) {
    throw std::invalid_argument("block longer than configured block size");
  }
}

}  // namespace

void BlockQuantConfig::validate() const {
  if (block_size == 0) throw std::invalid_argument("block size must be positive");
  if (scale_mantissa_bits < 0 || scale_mantissa_bits > kMaxScaleMantissaBits) {
    throw std::invalid_argument("scale mantissa bits must be in [0, 8]");
  }
}

std::vector<double> BlockQuant::dequantize() const {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = dequantized(i);
  return out;
}

void require_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::domain_error("non-finite input at element " + std::to_string(i));
    }
  }
}

double ideal_scale(std::span<const double> block) {
  if (block.empty()) throw std::invalid_argument("empty block");
  return block_abs_max(block) / ElementGrid::q_max;
}

BlockQuant quantize_block(std::span<const double> block, const BlockQuantConfig& config) {
  config.validate();
  check_block(block, config);
  BlockQuant q;
  q.block_max = block_abs_max(block);
  q.ideal_scale = q.block_max / ElementGrid::q_max;
  q.codes.resize(block.size());
  if (q.block_max == 0.0) {
    q.scale_code = ScaleCode::unit(config.scale_mantissa_bits);
    q.scale = 1.0;
    return q;
  }
  q.scale_code = encode_scale_ceiling(q.ideal_scale, config.scale_mantissa_bits);
  q.scale = q.scale_code->decode();
  for (std::size_t i = 0; i < block.size(); ++i) {
    q.codes[i] = nearest_grid_code(block[i] / q.scale);
  }
  return q;
}

BlockQuant quantize_block_ideal(std::span<const double> block, const BlockQuantConfig& config) {
  config.validate();
  check_block(block, config);
  BlockQuant q;
  q.block_max = block_abs_max(block);
  q.ideal_scale = q.block_max / ElementGrid::q_max;
  q.codes.resize(block.size());
  if (q.block_max == 0.0) {
    q.scale = 1.0;
    return q;
  }
  q.scale = q.ideal_scale;
  for (std::size_t i = 0; i < block.size(); ++i) {
    q.codes[i] = nearest_grid_code(block[i] / q.scale);
  }
  return q;
}

std::vector<bool> deadzone_mask(std::span<const double> block) {
  std::vector<bool> mask(block.size(), false);
  const double m = block_abs_max(block);
  if (m == 0.0) return mask;
  const double s_star = m / ElementGrid::q_max;
  for (std::size_t i = 0; i < block.size(); ++i) {
    mask[i] = std::fabs(block[i] / s_star) < ElementGrid::deadzone_edge;
  }
  return mask;
}

void qdq_block_into(std::span<const double> block, int scale_mantissa_bits, std::span<double> out) {
  const double m = block_abs_max(block);
  if (m == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double s = encode_scale_ceiling(m / ElementGrid::q_max, scale_mantissa_bits).decode();
  for (std::size_t i = 0; i < block.size(); ++i) {
    out[i] = s * decode_grid(nearest_grid_code(block[i] / s));
  }
}

void qdq_block_ideal_into(std::span<const double> block, std::span<double> out) {
  const double m = block_abs_max(block);
  if (m == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  const double s = m / ElementGrid::q_max;
  for (std::size_t i = 0; i < block.size(); ++i) {
    out[i] = s * decode_grid(nearest_grid_code(block[i] / s));
  }
}

Tensor QuantizedTensor::dequantize() const {
  Tensor out = Tensor::zeros(shape);
  const auto ranges = block_ranges(shape, config.block_size);
  for (std::size_t b = 0; b < ranges.size(); ++b) {
    for (std::size_t i = 0; i < ranges[b].length; ++i) {
      out.data[ranges[b].offset + i] = blocks[b].dequantized(i);
    }
  }
  return out;
}

QuantizedTensor quantize_tensor(const Tensor& tensor, const BlockQuantConfig& config) {
  config.validate();
  QuantizedTensor qt;
  qt.shape = tensor.shape;
  qt.config = config;
  const auto ranges = block_ranges(tensor.shape, config.block_size);
  qt.blocks.resize(ranges.size());
  parallel_for(ranges.size(), [&](std::size_t b) {
    qt.blocks[b] = quantize_block(
        std::span<const double>(tensor.data).subspan(ranges[b].offset, ranges[b].length), config);
  });
  return qt;
}

namespace {

template <typename Kernel>
Tensor blockwise(const Tensor& tensor, std::size_t block_size, Kernel kernel) {
  Tensor out = Tensor::zeros(tensor.shape);
  const auto ranges = block_ranges(tensor.shape, block_size);
  parallel_for(ranges.size(), [&](std::size_t b) {
    const auto r = ranges[b];
    kernel(std::span<const double>(tensor.data).subspan(r.offset, r.length),
           std::span<double>(out.data).subspan(r.offset, r.length));
  });
  return out;
}

}  // namespace

Tensor qdq_tensor(const Tensor& tensor, const BlockQuantConfig& config) {
  config.validate();
  const int bits = config.scale_mantissa_bits;
  return blockwise(tensor, config.block_size,
                   [bits](std::span<const double> in, std::span<double> out) {
                     qdq_block_into(in, bits, out);
                   });
}

Tensor qdq_tensor_ideal(const Tensor& tensor, const BlockQuantConfig& config) {
  config.validate();
  return blockwise(tensor, config.block_size, [](std::span<const double> in, std::span<double> out) {
    qdq_block_ideal_into(in, out);
  });
}

}  // namespace mxdecomp
