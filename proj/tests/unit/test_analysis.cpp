// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "generators.hpp"
#include "mxdecomp/analysis.hpp"

using namespace mxdecomp;

namespace {

Tensor random_tensor(std::uint64_t seed, std::size_t rows, std::size_t cols,
                     gen::Family f = gen::Family::gaussian) {
  gen::Pcg32 rng(seed);
  return Tensor({rows, cols}, gen::block(rng, f, rows * cols));
}

}  // namespace

TEST(GammaStats, PowerOfTwoMaximaGiveZeroDelta) {
  std::vector<double> maxima;
  for (int i = 0; i < 1200; ++i) maxima.push_back(6.0 * std::ldexp(1.0, i % 40 - 20));
  const GammaStats g = gamma_stats(maxima);
  EXPECT_EQ(g.blocks, 1200u);
  EXPECT_EQ(g.mean_delta, 0.0);
  EXPECT_EQ(g.mean_gamma, 1.0);
  EXPECT_EQ(g.rmse_gamma_minus_1, 0.0);
  EXPECT_EQ(g.delta_histogram.counts[0], 1200u);
}

TEST(GammaStats, GammaIsTwoToTheDelta) {
  gen::Pcg32 rng(2);
  std::vector<double> maxima;
  for (int i = 0; i < 2000; ++i) maxima.push_back(std::exp(rng.normal() * 3));
  const GammaStats g = gamma_stats(maxima);
  for (std::size_t i = 0; i < g.delta_samples.size(); ++i) {
    const double d = g.delta_samples[i];
    ASSERT_GE(d, 0.0);
    ASSERT_LT(d, 1.0);
    const double s_star = maxima[i] / 6.0;
    ASSERT_NEAR(std::exp2(d), std::exp2(std::ceil(std::log2(s_star))) / s_star, 1e-12);
  }
}

TEST(GammaStats, ZeroBlocksAreSkippedAndCounted) {
  std::vector<double> maxima(1000, 3.0);
  maxima.push_back(0.0);
  maxima.push_back(0.0);
  const GammaStats g = gamma_stats(maxima);
  EXPECT_EQ(g.skipped_zero_blocks, 2u);
  EXPECT_EQ(g.blocks, 1000u);
}

TEST(GammaStats, TooFewBlocksIsAnError) {
  EXPECT_THROW(gamma_stats(std::vector<double>(999, 1.0)), std::invalid_argument);
  EXPECT_NO_THROW(gamma_stats(std::vector<double>(5, 1.0), 5));
}

TEST(GammaStats, LogUniformMaximaGiveUniformDelta) {
  // Theory for Uniform delta: E[2^delta] = 1/ln 2, E[delta] = 1/2.
  gen::Pcg32 rng(10);
  std::vector<double> maxima;
  for (int i = 0; i < 100000; ++i) maxima.push_back(std::exp2(rng.unit() * 20.0 - 10.0));
  const GammaStats g = gamma_stats(maxima);
  EXPECT_NEAR(g.mean_delta, 0.5, 0.005);
  EXPECT_NEAR(g.mean_gamma, 1.0 / std::log(2.0), 0.005);
  // E[(2^d - 1)^2] = 3 / (2 ln 2) - 2 / ln 2 + 1 for Uniform d.
  const double rmse = std::sqrt(1.5 / std::log(2.0) - 2.0 / std::log(2.0) + 1.0);
  EXPECT_NEAR(g.rmse_gamma_minus_1, rmse, 0.005);
  EXPECT_NEAR(g.rms_delta, std::sqrt(1.0 / 3.0), 0.005);
}

TEST(GammaStats, TensorSetOverload) {
  TensorSet set;
  set.add("a", random_tensor(1, 64, 256));
  const GammaStats g = gamma_stats(set, {32, 0}, 100);
  EXPECT_EQ(g.blocks, 64u * 8u);
}

TEST(CumulativeScaleBias, SingleLayerMatchesUniformVariance) {
  CltConfig c;
  c.layers = 1;
  c.trials = 100000;
  const CltResult r = cumulative_scale_bias(c);
  EXPECT_NEAR(r.theory_std, std::sqrt(1.0 / 12.0), 1e-12);
  EXPECT_NEAR(r.std_centered, 0.2887, 0.003);
}

TEST(CumulativeScaleBias, StdWithinThreeStandardErrors) {
  for (int layers : {12, 36, 48}) {
    CltConfig c;
    c.layers = layers;
    c.trials = 100000;
    c.seed = static_cast<std::uint64_t>(layers);
    const CltResult r = cumulative_scale_bias(c);
    // Standard error of a sample std is about sigma / sqrt(2 n).
    const double se = r.theory_std / std::sqrt(2.0 * c.trials);
    EXPECT_NEAR(r.std_centered, r.theory_std, 3.0 * se * 1.1) << layers;
    EXPECT_NEAR(r.mean_sum, layers / 2.0, 5.0 * r.theory_std / std::sqrt(c.trials));
  }
}

TEST(CumulativeScaleBias, BandsAroundCentredSum) {
  CltConfig c;
  c.layers = 36;
  c.trials = 100000;
  const CltResult r = cumulative_scale_bias(c);
  EXPECT_NEAR(r.theory_std, std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(r.band_natural.lo, std::exp(-r.std_centered), 1e-12);
  EXPECT_NEAR(r.band_natural.hi, std::exp(r.std_centered), 1e-12);
  EXPECT_NEAR(r.band_natural.lo, 0.18, 0.01);
  EXPECT_NEAR(r.band_natural.hi, 5.6, 0.2);
  EXPECT_NEAR(r.band_log2.lo * r.band_log2.hi, 1.0, 1e-12);
}

TEST(CumulativeScaleBias, BlockAveragingShrinksSpread) {
  CltConfig c;
  c.layers = 48;
  c.trials = 20000;
  c.blocks_per_layer = 16;
  const CltResult r = cumulative_scale_bias(c);
  EXPECT_NEAR(r.theory_std, 0.5, 1e-12);
  EXPECT_NEAR(r.std_centered, 0.5, 0.02);
}

TEST(CumulativeScaleBias, EmpiricalSampler) {
  CltConfig c;
  c.layers = 10;
  c.trials = 5000;
  c.empirical_deltas = {0.25, 0.75};
  const CltResult r = cumulative_scale_bias(c);
  EXPECT_NEAR(r.theory_std, std::sqrt(10.0 * 0.25 * 0.25 * 2.0), 1e-12);
}

TEST(CumulativeScaleBias, Preconditions) {
  CltConfig c;
  c.layers = 0;
  EXPECT_THROW(cumulative_scale_bias(c), std::invalid_argument);
  c.layers = 4;
  c.trials = 999;
  EXPECT_THROW(cumulative_scale_bias(c), std::invalid_argument);
}

TEST(CumulativeScaleBias, Deterministic) {
  CltConfig c;
  c.trials = 5000;
  c.seed = 9;
  set_worker_count(1);
  const CltResult a = cumulative_scale_bias(c);
  set_worker_count(6);
  const CltResult b = cumulative_scale_bias(c);
  set_worker_count(0);
  EXPECT_EQ(a.std_centered, b.std_centered);
  EXPECT_EQ(a.mean_sum, b.mean_sum);
}

TEST(EffectiveTemperature, ClosedForm) {
  EXPECT_EQ(effective_temperature_predict(0.0, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(effective_temperature_predict(1.0, 2.0), std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(effective_temperature_predict(8.0, 2.0), 3.0);
  try {
    effective_temperature_predict(1.0, 0.0);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "degenerate policy");
  }
}

TEST(EffectiveTemperature, PairVarianceEqualsTwiceCorrectedVariance) {
  const std::vector<double> l{0.3, -1.0, 2.0, 0.7, 0.1};
  double mean = 0.0;
  for (double v : l) mean += v;
  mean /= 5.0;
  double ss = 0.0;
  for (double v : l) ss += (v - mean) * (v - mean);
  EXPECT_NEAR(logit_difference_variance(l), 2.0 * ss / 4.0, 1e-12);
}

TEST(EffectiveTemperature, LargeVocabularyIsSubsampled) {
  gen::Pcg32 rng(1);
  std::vector<double> l(3000);
  for (double& v : l) v = rng.normal();
  double mean = 0.0;
  for (double x : l) mean += x;
  mean /= static_cast<double>(l.size());
  double ss = 0.0;
  for (double x : l) ss += (x - mean) * (x - mean);
  const double exact = 2.0 * ss / static_cast<double>(l.size() - 1);
  const double v = logit_difference_variance(l, 5);
  EXPECT_NEAR(v, exact, 0.01 * exact);
  EXPECT_EQ(v, logit_difference_variance(l, 5));
}

TEST(EffectiveTemperature, NoNoiseFitsUnitTemperature) {
  gen::Pcg32 rng(3);
  std::vector<double> l(100);
  for (double& v : l) v = rng.normal();
  const TempFit f = effective_temperature_fit(l, 0.0, 10000, 1);
  EXPECT_NEAR(f.t_hat, 1.0, 1e-6);
  EXPECT_EQ(f.predicted.t_eff, 1.0);
}

TEST(EffectiveTemperature, NoiseRaisesEntropy) {
  gen::Pcg32 rng(4);
  std::vector<double> l(50);
  for (double& v : l) v = 2.0 * rng.normal();
  const TempFit f = effective_temperature_fit(l, 1.0, 20000, 2);
  EXPECT_GT(f.entropy_noisy, f.entropy_clean);
  EXPECT_GT(f.t_hat, 1.0);
}

TEST(EffectiveTemperature, TwoTokenCaseFollowsProbitApproximation) {
  // For two tokens the averaged probability is E[sigmoid(d + sqrt(2) sigma z)],
  // close to sigmoid(d / sqrt(1 + pi sigma^2 / 4)).
  const std::vector<double> l{1.0, -1.0};
  const double sigma = 1.0;
  const TempFit f = effective_temperature_fit(l, sigma, 200000, 7);
  const double probit_t = std::sqrt(1.0 + M_PI * 2.0 * sigma * sigma / 8.0);
  EXPECT_NEAR(f.t_hat, probit_t, 0.03 * probit_t);
}

TEST(EffectiveTemperature, Preconditions) {
  const std::vector<double> one{1.0};
  EXPECT_THROW(effective_temperature_fit(one, 0.1, 10000, 0), std::invalid_argument);
  const std::vector<double> two{1.0, 0.0};
  EXPECT_THROW(effective_temperature_fit(two, 0.1, 9999, 0), std::invalid_argument);
  EXPECT_THROW(effective_temperature_fit(two, -0.1, 10000, 0), std::invalid_argument);
}

TEST(Softmax, SumsToOneAndTemperatureFlattens) {
  const std::vector<double> l{1.0, 2.0, 3.0};
  const auto p = softmax(l);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-15);
  EXPECT_GT(entropy(softmax(l, 3.0)), entropy(p));
}

TEST(AqnTotalNoise, ClosedForm) {
  AqnSchedule s;
  s.sigma_start = 4.0;
  s.sigma_end = 4.0;
  s.num_stages = 2;
  EXPECT_DOUBLE_EQ(aqn_total_noise(3.0, s, 0), 5.0);
  EXPECT_THROW(aqn_total_noise(3.0, s, 2), std::out_of_range);
  EXPECT_THROW(aqn_total_noise(3.0, s, -1), std::out_of_range);
  const AqnSchedule d;
  double prev = INFINITY;
  for (int k = 0; k < d.num_stages; ++k) {
    const double t = aqn_total_noise(0.02, d, k);
    EXPECT_LE(t, prev);
    prev = t;
  }
}

TEST(Gemm, IsotropicUnitTraceIsFrobeniusNorm) {
  const Tensor w = random_tensor(1, 32, 64);
  InputCovariance cov;
  const GemmPropagation g = gemm_error_propagation(w, {32, 0}, cov, {0, 0, std::nullopt});
  const ErrorDecomposition d = decompose_tensor(w, {32, 0});
  EXPECT_NEAR(g.analytic_total, d.norm2_total, 1e-12 * d.norm2_total);
  EXPECT_NEAR(g.var_scale, d.norm2_scale, 1e-12 * d.norm2_scale);
  EXPECT_NEAR(g.var_grid, d.norm2_grid, 1e-12 * d.norm2_grid);
  EXPECT_NEAR(g.var_dz, d.norm2_dz, 1e-12 * d.norm2_dz);
  EXPECT_EQ(g.cross_scale_dz, 0.0);
  EXPECT_EQ(g.cross_dz_grid, 0.0);
  EXPECT_NEAR(g.analytic_total, g.approx_total + g.cross_scale_grid, 1e-10 * g.analytic_total);
}

TEST(Gemm, MonteCarloMatchesTrace) {
  const Tensor w = random_tensor(2, 64, 64);
  InputCovariance cov;
  cov.variance = 2.5;
  const GemmPropagation g = gemm_error_propagation(w, {32, 0}, cov, {10000, 3, std::nullopt});
  EXPECT_LE(g.monte_carlo_rel_error, 0.02);
}

TEST(Gemm, DiagonalAndSampleCovariances) {
  const Tensor w = random_tensor(3, 16, 64);
  gen::Pcg32 rng(4);
  InputCovariance diag;
  diag.mode = CovarianceMode::diagonal;
  for (int i = 0; i < 64; ++i) diag.diagonal.push_back(0.5 + rng.unit());
  const GemmPropagation gd = gemm_error_propagation(w, {32, 0}, diag, {20000, 1, std::nullopt});
  EXPECT_LE(gd.monte_carlo_rel_error, 0.03);
  EXPECT_EQ(gd.cross_scale_dz, 0.0);

  InputCovariance samp;
  samp.mode = CovarianceMode::samples;
  samp.samples = random_tensor(5, 500, 64);
  const GemmPropagation gs = gemm_error_propagation(w, {32, 0}, samp, {0, 1, std::nullopt});
  // Second-moment trace equals the mean of ||E x||^2 over the samples.
  const ErrorDecomposition d = decompose_tensor(w, {32, 0});
  double acc = 0.0;
  for (std::size_t s = 0; s < 500; ++s) {
    for (std::size_t r = 0; r < 16; ++r) {
      double y = 0.0;
      for (std::size_t c = 0; c < 64; ++c) y += d.e_total[r * 64 + c] * samp.samples.data[s * 64 + c];
      acc += y * y;
    }
  }
  EXPECT_NEAR(gs.analytic_total, acc / 500.0, 1e-10 * gs.analytic_total);
}

TEST(Gemm, ShapeErrors) {
  InputCovariance cov;
  EXPECT_THROW(gemm_error_propagation(Tensor::vector({1.0, 2.0}), {32, 0}, cov), std::invalid_argument);
  InputCovariance diag;
  diag.mode = CovarianceMode::diagonal;
  diag.diagonal = {1.0, 1.0};
  EXPECT_THROW(gemm_error_propagation(random_tensor(1, 4, 8), {8, 0}, diag), std::invalid_argument);
  InputCovariance bad;
  bad.variance = 0.0;
  EXPECT_THROW(gemm_error_propagation(random_tensor(1, 4, 8), {8, 0}, bad), std::invalid_argument);
}

TEST(EffectiveRank, IdentityAndRankOne) {
  Tensor eye = Tensor::zeros({6, 6});
  for (int i = 0; i < 6; ++i) eye.data[i * 6 + i] = 1.0;
  EXPECT_NEAR(effective_rank(eye), 6.0, 1e-10);
  Tensor r1 = Tensor::zeros({4, 5});
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 5; ++j) r1.data[i * 5 + j] = (i + 1.0) * (j - 2.0);
  }
  EXPECT_NEAR(effective_rank(r1), 1.0, 1e-10);
  EXPECT_THROW(effective_rank(Tensor::zeros({3, 3})), std::invalid_argument);
  EXPECT_THROW(effective_rank(Tensor::vector({1.0})), std::invalid_argument);
}

TEST(DeadzoneTruncate, ZeroesExactlyTheMask) {
  const Tensor x({1, 8}, {0.03, 0.1, 0.3, 0.5, 0.9, 1.5, 2.0, 4.0});
  const Tensor t = deadzone_truncate(x, {8, 0});
  EXPECT_EQ(t.data, (std::vector<double>{0, 0, 0.3, 0.5, 0.9, 1.5, 2.0, 4.0}));
}

TEST(CrossTerm, SignFlipGivesIdenticalStatistics) {
  const std::vector<std::size_t> sizes{8, 32};
  const auto a = cross_term_vs_blocksize(Distribution::gaussian, sizes, 2000, 1);
  const auto b = cross_term_vs_blocksize(Distribution::gaussian, sizes, 2000, 1, 5.0, true);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].normalized_cross, b[i].normalized_cross);
    EXPECT_EQ(a[i].cos_scale_grid.value, b[i].cos_scale_grid.value);
    EXPECT_EQ(a[i].centered_cross_rms, b[i].centered_cross_rms);
  }
}

TEST(CrossTerm, GaussianReferenceAtBlock32) {
  const std::vector<std::size_t> sizes{32};
  const auto p = cross_term_vs_blocksize(Distribution::gaussian, sizes, 100000, 0);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_TRUE(p[0].cos_scale_grid.defined);
  // Measured reference for i.i.d. N(0,1) blocks of 32.
  EXPECT_NEAR(p[0].cos_scale_grid.value, -0.67, 0.02);
  EXPECT_LT(p[0].normalized_cross, 0.0);
}

TEST(CrossTerm, CentredCrossTermShrinksWithBlockSize) {
  const std::vector<std::size_t> sizes{8, 512};
  const auto p = cross_term_vs_blocksize(Distribution::gaussian, sizes, 20000, 4);
  EXPECT_GT(p[0].centered_cross_rms, p[1].centered_cross_rms);
}

TEST(CrossTerm, RejectsTinyBlocks) {
  const std::vector<std::size_t> sizes{1};
  EXPECT_THROW(cross_term_vs_blocksize(Distribution::gaussian, sizes, 10, 0), std::invalid_argument);
}
