// SPDX-License-Identifier: Apache-2.0
//
// Statistics built on the decomposition: scale-ratio distribution, cumulative
// scale bias across layers, effective softmax temperature under logit noise,
// GEMM error propagation, effective rank and the cross term vs block size.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mxdecomp/corrections.hpp"
#include "mxdecomp/decomposition.hpp"
#include "mxdecomp/quantizer.hpp"
#include "mxdecomp/tensorstore.hpp"

namespace mxdecomp {

// ---------------------------------------------------------------------------
// Scale ratio gamma = s / s* = 2^delta, delta = ceil(log2 s*) - log2 s*.

struct GammaStats {
  std::vector<double> delta_samples;
  double mean_delta = 0.0;
  double mean_gamma = 0.0;
  double rmse_gamma_minus_1 = 0.0;
  /// sqrt(mean(delta^2)), reported alongside the gamma RMSE.
  double rms_delta = 0.0;
  /// 100 bins over [0, 1).
  Histogram delta_histogram;
  std::size_t blocks = 0;
  std::size_t skipped_zero_blocks = 0;
};

inline constexpr std::size_t kGammaMinBlocks = 1000;

/// Largest |x| of every block along the innermost axis.
std::vector<double> block_maxima(const Tensor& tensor, std::size_t block_size);

/// Zero maxima are skipped and counted. Throws std::invalid_argument when
/// fewer than `min_blocks` non-zero maxima remain.
GammaStats gamma_stats(std::span<const double> maxima, std::size_t min_blocks = kGammaMinBlocks);
GammaStats gamma_stats(const TensorSet& tensors, const BlockQuantConfig& config,
                       std::size_t min_blocks = kGammaMinBlocks);

// ---------------------------------------------------------------------------
// Cumulative scale bias: sum over L layers of per-layer delta.

struct CltConfig {
  int layers = 48;
  std::size_t trials = 100000;
  std::uint64_t seed = 0;
  /// 1: one delta per layer. k > 1: each layer contributes the mean delta of k blocks.
  std::size_t blocks_per_layer = 1;
  /// When non-empty, deltas are resampled from these values instead of Uniform[0, 1).
  std::vector<double> empirical_deltas;
};

struct Band {
  double lo = 0.0;
  double hi = 0.0;
};

struct CltResult {
  int layers = 0;
  std::size_t trials = 0;
  /// Sample std of sum(delta - 1/2).
  double std_centered = 0.0;
  /// sqrt(L / 12) / sqrt(blocks_per_layer) for the uniform sampler.
  double theory_std = 0.0;
  /// Mean of the uncentered sum.
  double mean_sum = 0.0;
  /// One-sigma multiplicative bands exp(+-std) and 2^(+-std) around the centered sum.
  Band band_natural;
  Band band_log2;
  /// 2^(mean_sum +- std), the uncentered reading.
  Band band_uncentered_log2;
};

CltResult cumulative_scale_bias(const CltConfig& config);

// ---------------------------------------------------------------------------
// Effective temperature.

struct TempPrediction {
  double sigma_eta2 = 0.0;
  double var_delta_ell = 0.0;
  double t_eff = 1.0;
};

/// sqrt(1 + 2 sigma_eta^2 / Var(delta logit)). Throws std::invalid_argument
/// ("degenerate policy") when var_delta_ell <= 0.
double effective_temperature_predict(double sigma_eta2, double var_delta_ell);

/// Variance of l_a - l_b over unordered token pairs; above 10^6 pairs a
/// seeded subsample of 10^6 pairs is used.
double logit_difference_variance(std::span<const double> logits, std::uint64_t seed = 0);

std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
double entropy(std::span<const double> probs);

struct TempFit {
  double t_hat = 1.0;
  double kl_at_fit = 0.0;
  double entropy_clean = 0.0;
  double entropy_noisy = 0.0;
  TempPrediction predicted;
};

/// Monte-Carlo noise-averaged softmax, then the temperature T minimizing
/// KL(averaged || softmax(l / T)) by golden-section search on log T in
/// [log 0.5, log 10]. Requires at least 10^4 draws.
TempFit effective_temperature_fit(std::span<const double> logits, double sigma_eta, std::size_t draws,
                                  std::uint64_t seed);

/// sqrt(sigma_grid^2 + sigma_stage^2). Throws std::out_of_range for a bad stage.
double aqn_total_noise(double sigma_grid, const AqnSchedule& schedule, int stage);

// ---------------------------------------------------------------------------
// GEMM error propagation for y = W x with W quantized.

enum class CovarianceMode { isotropic, diagonal, samples };

struct InputCovariance {
  CovarianceMode mode = CovarianceMode::isotropic;
  double variance = 1.0;
  /// Diagonal entries (diagonal mode).
  std::vector<double> diagonal;
  /// Input samples (samples mode), row-major [count, in_features]. The
  /// covariance is their second-moment matrix.
  Tensor samples;
};

struct GemmPropagation {
  double var_scale = 0.0;
  double var_dz = 0.0;
  double var_grid = 0.0;
  /// 2 tr(E_scale^T E_grid S), the term the three-way approximation drops.
  double cross_scale_grid = 0.0;
  /// tr(E_scale^T E_dz S) and tr(E_dz^T E_grid S); exactly zero for isotropic S.
  double cross_scale_dz = 0.0;
  double cross_dz_grid = 0.0;
  /// tr(E^T E S) of the full error.
  double analytic_total = 0.0;
  /// var_scale + var_dz + var_grid.
  double approx_total = 0.0;
  /// |cross_scale_grid| / analytic_total.
  double dropped_cross_fraction = 0.0;
  double monte_carlo = 0.0;
  double monte_carlo_rel_error = 0.0;
  std::size_t samples = 0;
};

struct GemmOptions {
  std::size_t mc_samples = 10000;
  std::uint64_t seed = 0;
  /// When set, W is reconstructed with MBS instead of plain Q.
  std::optional<MbsConfig> mbs;
};

/// W must be 2-D [out, in] with blocks along `in`. Throws std::invalid_argument
/// on shape mismatches.
GemmPropagation gemm_error_propagation(const Tensor& weight, const BlockQuantConfig& quant,
                                       const InputCovariance& cov, const GemmOptions& options = {});

// ---------------------------------------------------------------------------

/// (sum sigma_i)^2 / sum sigma_i^2 of a 2-D matrix. Throws on a zero matrix.
double effective_rank(const Tensor& matrix);

/// x with every ideal-deadzone element set to 0.
Tensor deadzone_truncate(const Tensor& tensor, const BlockQuantConfig& config);

struct CrossTermPoint {
  std::size_t block_size = 0;
  std::size_t blocks = 0;
  /// 2<e_scale, e_grid> / ||e||^2.
  double normalized_cross = 0.0;
  Cosine cos_scale_grid;
  /// RMS over blocks of c_b - E[c_b | gamma_b], where
  /// c_b = mean_i(e_scale * (e_dz + e_grid)) / s*^2 and the conditional mean
  /// is taken over 50 equal-width bins of delta_b.
  double centered_cross_rms = 0.0;
  double mean_block_cross = 0.0;
};

inline constexpr std::size_t kCrossTermGammaBins = 50;

std::vector<CrossTermPoint> cross_term_vs_blocksize(Distribution distribution,
                                                    std::span<const std::size_t> block_sizes,
                                                    std::size_t blocks_per_size, std::uint64_t seed,
                                                    double nu = 5.0, bool negate = false);

}  // namespace mxdecomp
