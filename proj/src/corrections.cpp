// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/corrections.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mxdecomp/random.hpp"

namespace mxdecomp {

void MbsConfig::validate(const BlockQuantConfig& quant) const {
  quant.validate();
  if (macro_block_size == 0 || macro_block_size % quant.block_size != 0) {
    throw std::invalid_argument("macro block size must be a positive multiple of the block size");
  }
}

void OfConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("OF alpha must be in [0, 1]");
  }
}

void AqnSchedule::validate() const {
  if (!(sigma_end > 0.0) || !(sigma_start >= sigma_end) || !std::isfinite(sigma_start)) {
    throw std::invalid_argument("AQN schedule requires sigma_start >= sigma_end > 0");
  }
  if (num_stages < 1) throw std::invalid_argument("AQN schedule requires at least one stage");
}

std::vector<double> AqnSchedule::stages() const {
  return aqn_schedule(sigma_start, sigma_end, num_stages);
}

double AqnSchedule::multiplier_for(std::string_view tensor_name) const {
  for (const auto& [pattern, mult] : multipliers) {
    if (tensor_name.find(pattern) != std::string_view::npos) return mult;
  }
  return 1.0;
}

void mbs_qdq_with_code(std::span<const double> macro_block, int code, const BlockQuantConfig& quant,
                       std::span<double> out) {
  if (code < 0 || code >= MbsConfig::mantissa_levels) {
    throw std::out_of_range("MBS mantissa code out of range");
  }
  const double prescale = 1.0 + static_cast<double>(code) / MbsConfig::mantissa_levels;
  std::vector<double> scaled(macro_block.size());
  for (std::size_t i = 0; i < macro_block.size(); ++i) scaled[i] = prescale * macro_block[i];
  for (std::size_t start = 0; start < macro_block.size(); start += quant.block_size) {
    const std::size_t len = std::min(quant.block_size, macro_block.size() - start);
    qdq_block_into(std::span<const double>(scaled).subspan(start, len), quant.scale_mantissa_bits,
                   out.subspan(start, len));
  }
  for (double& v : out) v /= prescale;
}

namespace {

int closed_form_code(double block_max) {
  const double s_star = block_max / ElementGrid::q_max;
  const double pow2 = encode_scale_ceiling(s_star, 0).decode();
  const double steps = std::floor((pow2 / s_star - 1.0) * MbsConfig::mantissa_levels);
  int code = static_cast<int>(std::clamp(steps, 0.0, MbsConfig::mantissa_levels - 1.0));
  // Keep the prescaled ideal scale at or below the power of two.
  while (code > 0 &&
         (1.0 + static_cast<double>(code) / MbsConfig::mantissa_levels) * s_star > pow2) {
    --code;
  }
  return code;
}

}  // namespace

int mbs_select_mantissa(std::span<const double> macro_block, const BlockQuantConfig& quant,
                        const MbsConfig& config) {
  config.validate(quant);
  if (macro_block.size() > config.macro_block_size) {
    throw std::invalid_argument("macro block longer than configured macro block size");
  }
  require_finite(macro_block);
  double block_max = 0.0;
  for (double v : macro_block) block_max = std::max(block_max, std::fabs(v));
  if (block_max == 0.0) return 0;
  if (config.selection == MbsSelection::closed_form) return closed_form_code(block_max);

  std::vector<double> recon(macro_block.size());
  int best = 0;
  double best_err = 0.0;
  for (int code = 0; code < MbsConfig::mantissa_levels; ++code) {
    mbs_qdq_with_code(macro_block, code, quant, recon);
    double err = 0.0;
    for (std::size_t i = 0; i < macro_block.size(); ++i) {
      const double d = recon[i] - macro_block[i];
      err += d * d;
    }
    if (code == 0 || err < best_err) {
      best = code;
      best_err = err;
    }
  }
  return best;
}

MbsResult mbs_qdq(const Tensor& tensor, const BlockQuantConfig& quant, const MbsConfig& config) {
  config.validate(quant);
  require_finite(tensor.data);
  MbsResult result;
  result.x_hat = Tensor::zeros(tensor.shape);
  const auto macros = block_ranges(tensor.shape, config.macro_block_size);
  result.mantissa_codes.resize(macros.size());
  parallel_for(
      macros.size(),
      [&](std::size_t m) {
        const auto r = macros[m];
        const auto in = std::span<const double>(tensor.data).subspan(r.offset, r.length);
        const int code = mbs_select_mantissa(in, quant, config);
        result.mantissa_codes[m] = static_cast<std::uint8_t>(code);
        mbs_qdq_with_code(in, code, quant, std::span<double>(result.x_hat.data).subspan(r.offset, r.length));
      },
      8);
  return result;
}

OfResult of_qdq(const Tensor& tensor, const OfConfig& of, const BlockQuantConfig& quant,
                const std::optional<MbsConfig>& mbs) {
  of.validate();
  quant.validate();
  auto q = [&](const Tensor& t) {
    return mbs ? mbs_qdq(t, quant, *mbs).x_hat : qdq_tensor(t, quant);
  };
  OfResult r;
  r.pass1 = q(tensor);
  Tensor residual = Tensor::zeros(tensor.shape);
  for (std::size_t i = 0; i < tensor.numel(); ++i) residual.data[i] = tensor.data[i] - r.pass1.data[i];
  r.pass2 = q(residual);
  r.x_hat = Tensor::zeros(tensor.shape);
  for (std::size_t i = 0; i < tensor.numel(); ++i) {
    r.x_hat.data[i] = r.pass1.data[i] + of.alpha * r.pass2.data[i];
  }
  return r;
}

DzRecovery dz_recovery_rate(const Tensor& tensor, const Tensor& reconstruction,
                            const BlockQuantConfig& quant) {
  quant.validate();
  if (reconstruction.shape != tensor.shape) {
    throw std::invalid_argument("reconstruction shape does not match tensor shape");
  }
  std::size_t dead = 0;
  std::size_t still_zero = 0;
  for (const auto& r : block_ranges(tensor.shape, quant.block_size)) {
    const auto mask = deadzone_mask(std::span<const double>(tensor.data).subspan(r.offset, r.length));
    for (std::size_t i = 0; i < r.length; ++i) {
      if (!mask[i]) continue;
      ++dead;
      if (reconstruction.data[r.offset + i] == 0.0) ++still_zero;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, tensor.numel()));
  return {static_cast<double>(dead) / n, static_cast<double>(still_zero) / n};
}

std::vector<double> aqn_schedule(double sigma_start, double sigma_end, int num_stages) {
  AqnSchedule check;
  check.sigma_start = sigma_start;
  check.sigma_end = sigma_end;
  check.num_stages = num_stages;
  check.validate();
  std::vector<double> out(static_cast<std::size_t>(num_stages));
  out.front() = sigma_start;
  if (num_stages == 1) return out;
  const double ratio = sigma_end / sigma_start;
  for (int k = 1; k + 1 < num_stages; ++k) {
    out[static_cast<std::size_t>(k)] =
        sigma_start * std::pow(ratio, static_cast<double>(k) / static_cast<double>(num_stages - 1));
  }
  out.back() = sigma_end;
  return out;
}

double rms(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double ss = 0.0;
  for (double v : values) ss += v * v;
  return std::sqrt(ss / static_cast<double>(values.size()));
}

Tensor aqn_apply(const Tensor& tensor, double sigma, std::uint64_t seed, double multiplier,
                 std::string_view name) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw std::invalid_argument("AQN sigma must be finite and non-negative");
  }
  Tensor out = tensor;
  const double std_dev = sigma * multiplier * rms(tensor.data);
  if (std_dev == 0.0) return out;
  const std::uint64_t key = combine_key(seed, hash_name(name));
  constexpr std::size_t kChunk = 4096;
  const std::size_t chunks = (tensor.numel() + kChunk - 1) / kChunk;
  parallel_for(
      chunks,
      [&](std::size_t c) {
        const std::size_t end = std::min(tensor.numel(), (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i) {
          out.data[i] += std_dev * normal_at(key, i);
        }
      },
      1);
  return out;
}

}  // namespace mxdecomp
