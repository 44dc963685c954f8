// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/analysis.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mxdecomp/random.hpp"

namespace mxdecomp {

// ---------------------------------------------------------------------------
// gamma / delta

std::vector<double> block_maxima(const Tensor& tensor, std::size_t block_size) {
  std::vector<double> out;
  for (const auto& r : block_ranges(tensor.shape, block_size)) {
    double m = 0.0;
    for (std::size_t i = 0; i < r.length; ++i) m = std::max(m, std::fabs(tensor.data[r.offset + i]));
    out.push_back(m);
  }
  return out;
}

GammaStats gamma_stats(std::span<const double> maxima, std::size_t min_blocks) {
  GammaStats g;
  g.delta_histogram = Histogram(0.0, 1.0, 100);
  double sum_delta = 0.0, sum_gamma = 0.0, sum_sq = 0.0, sum_delta_sq = 0.0;
  for (double m : maxima) {
    if (!std::isfinite(m)) throw std::domain_error("non-finite block maximum");
    if (m == 0.0) {
      ++g.skipped_zero_blocks;
      continue;
    }
    const double s_star = m / ElementGrid::q_max;
    const ScaleCode code = encode_scale_ceiling(s_star, 0);
    const double gamma = code.decode() / s_star;
    double delta = static_cast<double>(code.exponent) - std::log2(s_star);
    delta = std::clamp(delta, 0.0, std::nextafter(1.0, 0.0));
    g.delta_samples.push_back(delta);
    g.delta_histogram.add(delta);
    sum_delta += delta;
    sum_delta_sq += delta * delta;
    sum_gamma += gamma;
    sum_sq += (gamma - 1.0) * (gamma - 1.0);
  }
  g.blocks = g.delta_samples.size();
  if (g.blocks < min_blocks) {
    throw std::invalid_argument("gamma statistics need at least " + std::to_string(min_blocks) +
                                " non-zero blocks, got " + std::to_string(g.blocks));
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, g.blocks));
  g.mean_delta = sum_delta / n;
  g.mean_gamma = sum_gamma / n;
  g.rmse_gamma_minus_1 = std::sqrt(sum_sq / n);
  g.rms_delta = std::sqrt(sum_delta_sq / n);
  return g;
}

GammaStats gamma_stats(const TensorSet& tensors, const BlockQuantConfig& config, std::size_t min_blocks) {
  config.validate();
  std::vector<double> maxima;
  for (const auto& [name, entry] : tensors.entries) {
    const auto m = block_maxima(entry.tensor, config.block_size);
    maxima.insert(maxima.end(), m.begin(), m.end());
  }
  return gamma_stats(maxima, min_blocks);
}

// ---------------------------------------------------------------------------
// cumulative scale bias

CltResult cumulative_scale_bias(const CltConfig& config) {
  if (config.layers < 1) throw std::invalid_argument("layer count must be at least 1");
  if (config.trials < 1000) throw std::invalid_argument("at least 1000 trials are required");
  if (config.blocks_per_layer < 1) throw std::invalid_argument("blocks per layer must be at least 1");
  const auto& emp = config.empirical_deltas;
  const double k = static_cast<double>(config.blocks_per_layer);

  std::vector<double> sums(config.trials);
  parallel_for(config.trials, [&](std::size_t t) {
    Rng rng(config.seed, t);
    double sum = 0.0;
    for (int l = 0; l < config.layers; ++l) {
      double layer = 0.0;
      for (std::size_t b = 0; b < config.blocks_per_layer; ++b) {
        layer += emp.empty() ? rng.uniform() : emp[rng.below(emp.size())];
      }
      sum += layer / k;
    }
    sums[t] = sum;
  }, 1024);

  CltResult r;
  r.layers = config.layers;
  r.trials = config.trials;
  const Summary s = summarize(sums);
  r.mean_sum = s.mean;
  r.std_centered = s.std;  // shifting by L/2 leaves the spread unchanged
  double per_layer_var = 1.0 / 12.0;
  if (!emp.empty()) per_layer_var = std::pow(summarize(emp).std, 2);
  r.theory_std = std::sqrt(config.layers * per_layer_var / k);
  r.band_natural = {std::exp(-r.std_centered), std::exp(r.std_centered)};
  r.band_log2 = {std::exp2(-r.std_centered), std::exp2(r.std_centered)};
  r.band_uncentered_log2 = {std::exp2(r.mean_sum - r.std_centered), std::exp2(r.mean_sum + r.std_centered)};
  return r;
}

// ---------------------------------------------------------------------------
// effective temperature

double effective_temperature_predict(double sigma_eta2, double var_delta_ell) {
  if (!(var_delta_ell > 0.0)) throw std::invalid_argument("degenerate policy");
  if (!(sigma_eta2 >= 0.0)) throw std::invalid_argument("noise variance must be non-negative");
  return std::sqrt(1.0 + 2.0 * sigma_eta2 / var_delta_ell);
}

double logit_difference_variance(std::span<const double> logits, std::uint64_t seed) {
  const std::size_t v = logits.size();
  if (v < 2) throw std::invalid_argument("need at least two logits");
  constexpr std::uint64_t kMaxPairs = 1000000;
  const std::uint64_t pairs = static_cast<std::uint64_t>(v) * (v - 1) / 2;
  // Unordered pairs carry no sign, so the mean difference is zero and the
  // variance is the mean squared difference.
  double sum = 0.0;
  if (pairs <= kMaxPairs) {
    for (std::size_t a = 0; a < v; ++a) {
      for (std::size_t b = a + 1; b < v; ++b) {
        const double d = logits[a] - logits[b];
        sum += d * d;
      }
    }
    return sum / static_cast<double>(pairs);
  }
  Rng rng(seed, 0x7061697273ULL);
  for (std::uint64_t p = 0; p < kMaxPairs; ++p) {
    const std::uint64_t a = rng.below(v);
    std::uint64_t b = rng.below(v - 1);
    if (b >= a) ++b;
    const double d = logits[a] - logits[b];
    sum += d * d;
  }
  return sum / static_cast<double>(kMaxPairs);
}

namespace {

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (logits.empty()) throw std::invalid_argument("empty logits");
  std::vector<double> z(logits.begin(), logits.end());
  for (double& v : z) v /= temperature;
  const double lse = log_sum_exp(z);
  for (double& v : z) v = std::exp(v - lse);
  return z;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

TempFit effective_temperature_fit(std::span<const double> logits, double sigma_eta, std::size_t draws,
                                  std::uint64_t seed) {
  const std::size_t v = logits.size();
  if (v < 2) throw std::invalid_argument("vocabulary must have at least two tokens");
  if (!(sigma_eta >= 0.0)) throw std::invalid_argument("sigma_eta must be non-negative");
  if (draws < 10000) throw std::invalid_argument("at least 10^4 draws are required");

  TempFit fit;
  fit.predicted.var_delta_ell = logit_difference_variance(logits, seed);
  fit.predicted.sigma_eta2 = sigma_eta * sigma_eta;
  fit.predicted.t_eff = effective_temperature_predict(fit.predicted.sigma_eta2, fit.predicted.var_delta_ell);

  const std::vector<double> clean = softmax(logits);
  std::vector<double> averaged = clean;
  if (sigma_eta > 0.0) {
    constexpr std::size_t kChunk = 1024;
    const std::size_t chunks = (draws + kChunk - 1) / kChunk;
    std::vector<std::vector<double>> partial(chunks, std::vector<double>(v, 0.0));
    const std::uint64_t key = combine_key(seed, 0x6c6f67697473ULL);
    parallel_for(chunks, [&](std::size_t c) {
      std::vector<double> z(v);
      auto& acc = partial[c];
      const std::size_t end = std::min(draws, (c + 1) * kChunk);
      for (std::size_t d = c * kChunk; d < end; ++d) {
        for (std::size_t j = 0; j < v; ++j) z[j] = logits[j] + sigma_eta * normal_at(key, d * v + j);
        const double lse = log_sum_exp(z);
        for (std::size_t j = 0; j < v; ++j) acc[j] += std::exp(z[j] - lse);
      }
    }, 1);
    std::fill(averaged.begin(), averaged.end(), 0.0);
    for (const auto& acc : partial) {
      for (std::size_t j = 0; j < v; ++j) averaged[j] += acc[j];
    }
    for (double& p : averaged) p /= static_cast<double>(draws);
  }

  double neg_entropy = 0.0;
  for (double p : averaged) {
    if (p > 0.0) neg_entropy += p * std::log(p);
  }
  std::vector<double> scaled(v);
  auto kl = [&](double log_t) {
    const double t = std::exp(log_t);
    for (std::size_t j = 0; j < v; ++j) scaled[j] = logits[j] / t;
    const double lse = log_sum_exp(scaled);
    double cross = 0.0;
    for (std::size_t j = 0; j < v; ++j) cross += averaged[j] * (scaled[j] - lse);
    return neg_entropy - cross;
  };

  // Golden-section search on log T.
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(0.5);
  double b = std::log(10.0);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = kl(c);
  double fd = kl(d);
  while (b - a > 1e-10) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = kl(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = kl(d);
    }
  }
  const double log_t = 0.5 * (a + b);
  fit.t_hat = std::exp(log_t);
  fit.kl_at_fit = kl(log_t);
  fit.entropy_clean = entropy(clean);
  fit.entropy_noisy = entropy(averaged);
  return fit;
}

double aqn_total_noise(double sigma_grid, const AqnSchedule& schedule, int stage) {
  const auto stages = schedule.stages();
  if (stage < 0 || static_cast<std::size_t>(stage) >= stages.size()) {
    throw std::out_of_range("AQN stage out of range");
  }
  const double s = stages[static_cast<std::size_t>(stage)];
  return std::sqrt(sigma_grid * sigma_grid + s * s);
}

// ---------------------------------------------------------------------------
// GEMM propagation

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;

// tr(A^T B S) for the supported covariance forms.
double weighted_trace(const std::vector<double>& a, const std::vector<double>& b, std::size_t rows,
                      std::size_t cols, const InputCovariance& cov) {
  switch (cov.mode) {
    case CovarianceMode::isotropic: {
      double s = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      return cov.variance * s;
    }
    case CovarianceMode::diagonal: {
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c] * b[r * cols + c] * cov.diagonal[c];
      }
      return s;
    }
    case CovarianceMode::samples: {
      const ConstMap ma(a.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      const ConstMap mb(b.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      const std::size_t n = cov.samples.shape[0];
      const ConstMap xs(cov.samples.data.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols));
      const Eigen::MatrixXd ya = ma * xs.transpose();
      const Eigen::MatrixXd yb = mb * xs.transpose();
      return ya.cwiseProduct(yb).sum() / static_cast<double>(n);
    }
  }
  return 0.0;
}

void validate_covariance(const InputCovariance& cov, std::size_t in_features) {
  switch (cov.mode) {
    case CovarianceMode::isotropic:
      if (!(cov.variance > 0.0)) throw std::invalid_argument("isotropic variance must be positive");
      break;
    case CovarianceMode::diagonal:
      if (cov.diagonal.size() != in_features) {
        throw std::invalid_argument("diagonal covariance length does not match input features");
      }
      for (double d : cov.diagonal) {
        if (!(d > 0.0)) throw std::invalid_argument("diagonal covariance entries must be positive");
      }
      break;
    case CovarianceMode::samples:
      if (cov.samples.shape.size() != 2 || cov.samples.shape[1] != in_features || cov.samples.shape[0] == 0) {
        throw std::invalid_argument("input samples must be [count, in_features]");
      }
      break;
  }
}

}  // namespace

GemmPropagation gemm_error_propagation(const Tensor& weight, const BlockQuantConfig& quant,
                                       const InputCovariance& cov, const GemmOptions& options) {
  if (weight.shape.size() != 2) throw std::invalid_argument("weight must be a 2-D matrix");
  const std::size_t rows = weight.shape[0];
  const std::size_t cols = weight.shape[1];
  validate_covariance(cov, cols);

  const ErrorDecomposition d =
      options.mbs ? decompose_reconstruction(weight, mbs_qdq(weight, quant, *options.mbs).x_hat, quant)
                  : decompose_tensor(weight, quant);

  GemmPropagation g;
  g.var_scale = weighted_trace(d.e_scale, d.e_scale, rows, cols, cov);
  g.var_dz = weighted_trace(d.e_dz, d.e_dz, rows, cols, cov);
  g.var_grid = weighted_trace(d.e_grid, d.e_grid, rows, cols, cov);
  g.cross_scale_grid = 2.0 * weighted_trace(d.e_scale, d.e_grid, rows, cols, cov);
  g.cross_scale_dz = weighted_trace(d.e_scale, d.e_dz, rows, cols, cov);
  g.cross_dz_grid = weighted_trace(d.e_dz, d.e_grid, rows, cols, cov);
  g.analytic_total = weighted_trace(d.e_total, d.e_total, rows, cols, cov);
  if (!options.mbs && cov.mode == CovarianceMode::isotropic &&
      (g.cross_scale_dz != 0.0 || g.cross_dz_grid != 0.0)) {
    throw InvariantViolation("deadzone cross trace is non-zero under isotropic covariance");
  }
  g.approx_total = g.var_scale + g.var_dz + g.var_grid;
  g.dropped_cross_fraction = g.analytic_total > 0.0 ? std::fabs(g.cross_scale_grid) / g.analytic_total : 0.0;

  g.samples = options.mc_samples;
  if (options.mc_samples > 0) {
    const ConstMap e(d.e_total.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    Rng rng(options.seed, 0x67656d6dULL);
    Eigen::VectorXd x(static_cast<Eigen::Index>(cols));
    double acc = 0.0;
    for (std::size_t s = 0; s < options.mc_samples; ++s) {
      if (cov.mode == CovarianceMode::samples) {
        const std::size_t row = rng.below(cov.samples.shape[0]);
        for (std::size_t c = 0; c < cols; ++c) x[static_cast<Eigen::Index>(c)] = cov.samples.data[row * cols + c];
      } else {
        for (std::size_t c = 0; c < cols; ++c) {
          const double var = cov.mode == CovarianceMode::isotropic ? cov.variance : cov.diagonal[c];
          x[static_cast<Eigen::Index>(c)] = std::sqrt(var) * rng.normal();
        }
      }
      acc += (e * x).squaredNorm();
    }
    g.monte_carlo = acc / static_cast<double>(options.mc_samples);
    g.monte_carlo_rel_error =
        g.analytic_total > 0.0 ? std::fabs(g.monte_carlo - g.analytic_total) / g.analytic_total : 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------

double effective_rank(const Tensor& matrix) {
  if (matrix.shape.size() != 2) throw std::invalid_argument("effective rank needs a 2-D matrix");
  require_finite(matrix.data);
  const ConstMap m(matrix.data.data(), static_cast<Eigen::Index>(matrix.shape[0]),
                   static_cast<Eigen::Index>(matrix.shape[1]));
  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
  const double nuclear = sv.sum();
  const double frob2 = sv.squaredNorm();
  if (!(frob2 > 0.0)) throw std::invalid_argument("effective rank of a zero matrix is undefined");
  return nuclear * nuclear / frob2;
}

Tensor deadzone_truncate(const Tensor& tensor, const BlockQuantConfig& config) {
  config.validate();
  Tensor out = tensor;
  for (const auto& r : block_ranges(tensor.shape, config.block_size)) {
    const auto mask = deadzone_mask(std::span<const double>(tensor.data).subspan(r.offset, r.length));
    for (std::size_t i = 0; i < r.length; ++i) {
      if (mask[i]) out.data[r.offset + i] = 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CrossTermPoint> cross_term_vs_blocksize(Distribution distribution,
                                                    std::span<const std::size_t> block_sizes,
                                                    std::size_t blocks_per_size, std::uint64_t seed,
                                                    double nu, bool negate) {
  std::vector<CrossTermPoint> out;
  for (std::size_t bsize : block_sizes) {
    if (bsize < 2) throw std::invalid_argument("block size must be at least 2");
    SynthSpec spec;
    spec.distribution = distribution;
    spec.shape = {blocks_per_size, bsize};
    spec.seed = combine_key(seed, bsize);
    spec.nu = nu;
    spec.block = bsize;
    Tensor x = synth(spec).entries.begin()->second.tensor;
    if (negate) {
      for (double& v : x.data) v = -v;
    }
    const BlockQuantConfig config{bsize, 0};
    const ErrorDecomposition d = decompose_tensor(x, config);

    CrossTermPoint p;
    p.block_size = bsize;
    p.blocks = blocks_per_size;
    p.normalized_cross = d.norm2_total > 0.0 ? 2.0 * d.ip_scale_grid / d.norm2_total : 0.0;
    p.cos_scale_grid = d.cos_scale_grid;

    std::vector<double> c(blocks_per_size, 0.0);
    std::vector<std::size_t> bin(blocks_per_size, 0);
    std::vector<bool> used(blocks_per_size, false);
    for (std::size_t b = 0; b < blocks_per_size; ++b) {
      const std::size_t off = b * bsize;
      double m = 0.0;
      for (std::size_t i = 0; i < bsize; ++i) m = std::max(m, std::fabs(x.data[off + i]));
      if (m == 0.0) continue;
      const double s_star = m / ElementGrid::q_max;
      double acc = 0.0;
      for (std::size_t i = 0; i < bsize; ++i) {
        acc += d.e_scale[off + i] * (d.e_dz[off + i] + d.e_grid[off + i]);
      }
      c[b] = acc / static_cast<double>(bsize) / (s_star * s_star);
      const ScaleCode code = encode_scale_ceiling(s_star, 0);
      const double delta = std::clamp(static_cast<double>(code.exponent) - std::log2(s_star), 0.0,
                                      std::nextafter(1.0, 0.0));
      bin[b] = std::min(kCrossTermGammaBins - 1,
                        static_cast<std::size_t>(delta * static_cast<double>(kCrossTermGammaBins)));
      used[b] = true;
    }
    std::vector<double> bin_sum(kCrossTermGammaBins, 0.0);
    std::vector<std::size_t> bin_count(kCrossTermGammaBins, 0);
    double total = 0.0;
    std::size_t n_used = 0;
    for (std::size_t b = 0; b < blocks_per_size; ++b) {
      if (!used[b]) continue;
      bin_sum[bin[b]] += c[b];
      ++bin_count[bin[b]];
      total += c[b];
      ++n_used;
    }
    double ss = 0.0;
    for (std::size_t b = 0; b < blocks_per_size; ++b) {
      if (!used[b]) continue;
      const double r = c[b] - bin_sum[bin[b]] / static_cast<double>(bin_count[bin[b]]);
      ss += r * r;
    }
    if (n_used > 0) {
      p.centered_cross_rms = std::sqrt(ss / static_cast<double>(n_used));
      p.mean_block_cross = total / static_cast<double>(n_used);
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace mxdecomp
