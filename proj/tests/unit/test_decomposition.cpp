// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "generators.hpp"
#include "mxdecomp/decomposition.hpp"
#include "mxdecomp/tensorstore.hpp"
#include "oracles.hpp"

using namespace mxdecomp;

namespace {

const std::vector<double> kWorkedBlock{0.03, 0.1, 0.3, 0.5, 0.9, 1.5, 2.0, 4.0};

Tensor random_tensor(std::uint64_t seed, std::size_t rows, std::size_t cols,
                     gen::Family f = gen::Family::gaussian) {
  gen::Pcg32 rng(seed);
  return Tensor({rows, cols}, gen::block(rng, f, rows * cols));
}

void expect_near_all(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

}  // namespace

TEST(DecomposeTensor, WorkedBlockComponents) {
  const ErrorDecomposition d = decompose_tensor(Tensor({1, 8}, kWorkedBlock), {8, 0});
  expect_near_all(d.e_scale, {0, 0, 0.167, -0.167, 0, 0.167, 0, 0}, 5e-4);
  expect_near_all(d.e_dz, {-0.03, -0.10, 0, 0, 0, 0, 0, 0}, 5e-4);
  expect_near_all(d.e_grid, {0, 0, 0.033, 0.167, 0.100, -0.167, 0, 0}, 5e-4);
  EXPECT_NEAR(d.ip_scale_grid, -0.050, 5e-4);
  EXPECT_EQ(d.dz_count, 2u);
  EXPECT_DOUBLE_EQ(d.dz_fraction, 0.25);
}

TEST(DecomposeTensor, WorkedBlockIdentityAndOrthogonality) {
  const ErrorDecomposition d = decompose_tensor(Tensor({1, 8}, kWorkedBlock), {8, 0});
  EXPECT_LE(verify_identity(d), 1e-10);
  EXPECT_NEAR(2.0 * d.ip_scale_grid, -0.100, 1e-3);
  const Orthogonality o = orthogonality_check(d);
  EXPECT_EQ(o.scale_dz, 0.0);
  EXPECT_EQ(o.dz_grid, 0.0);
}

TEST(DecomposeTensor, OnGridBlockHasNoError) {
  const ErrorDecomposition d = decompose_tensor(Tensor({1, 4}, {6, 3, 1.5, 0.5}), {4, 0});
  EXPECT_EQ(d.norm2_total, 0.0);
  EXPECT_EQ(d.norm2_scale, 0.0);
  EXPECT_EQ(d.norm2_dz, 0.0);
  EXPECT_EQ(d.norm2_grid, 0.0);
  EXPECT_FALSE(d.cos_scale_grid.defined);
  EXPECT_EQ(d.cos_scale_grid.value, 0.0);
}

TEST(DecomposeTensor, ComponentsSumToQdqError) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor(seed, 32, 160, static_cast<gen::Family>(seed % 3));
    for (int m : {0, 3, 8}) {
      const ErrorDecomposition d = decompose_tensor(x, {32, m});
      const Tensor q = qdq_tensor(x, {32, m});
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double direct = q.data[i] - x.data[i];
        ASSERT_EQ(d.e_total[i], direct);
        const double sum = d.e_scale[i] + d.e_dz[i] + d.e_grid[i];
        ASSERT_LE(std::fabs(sum - direct), 1e-12 * std::max(1.0, std::fabs(x.data[i])));
        ASSERT_TRUE(d.e_dz[i] == 0.0 || d.e_grid[i] == 0.0);
      }
    }
  }
}

TEST(DecomposeTensor, MatchesBlockOracle) {
  gen::Pcg32 rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(48);
    const auto x = gen::block(rng, static_cast<gen::Family>(trial % 3), n);
    const int m = static_cast<int>(rng.below(9));
    const auto ref = oracle::decompose_block(x, m);
    const ErrorDecomposition d = decompose_tensor(Tensor::vector(x), {64, m});
    ASSERT_EQ(d.e_scale, ref.e_scale);
    ASSERT_EQ(d.e_dz, ref.e_dz);
    ASSERT_EQ(d.e_grid, ref.e_grid);
  }
}

TEST(VerifyIdentity, ZeroTensorHasZeroResidual) {
  const ErrorDecomposition d = decompose_tensor(Tensor::zeros({4, 32}), {32, 0});
  EXPECT_EQ(verify_identity(d), 0.0);
  EXPECT_EQ(d.dz_fraction, 0.0);
}

TEST(VerifyIdentity, RandomBlocksStayBelowTolerance) {
  gen::Pcg32 rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = gen::block(rng, static_cast<gen::Family>(trial % 3), 32, std::exp(rng.normal() * 3));
    const ErrorDecomposition d = decompose_tensor(Tensor::vector(x), {32, trial % 9});
    worst = std::max(worst, verify_identity(d));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(OrthogonalityCheck, ExactZeroIncludingAdversarialBlocks) {
  gen::Pcg32 rng(5);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto x = trial % 2 ? gen::adversarial_block(rng, 32, std::exp(rng.normal() * 4))
                             : gen::block(rng, static_cast<gen::Family>(trial % 3), 32);
    const ErrorDecomposition d = decompose_tensor(Tensor::vector(x), {32, trial % 9});
    const Orthogonality o = orthogonality_check(d);
    ASSERT_EQ(o.scale_dz, 0.0) << trial;
    ASSERT_EQ(o.dz_grid, 0.0) << trial;
  }
}

TEST(OrthogonalityCheck, EmptyDeadzoneGivesZero) {
  const ErrorDecomposition d = decompose_tensor(Tensor({1, 4}, {1.0, -1.1, 0.9, 1.3}), {4, 0});
  EXPECT_EQ(d.dz_count, 0u);
  EXPECT_EQ(orthogonality_check(d).scale_dz, 0.0);
  EXPECT_EQ(orthogonality_check(d).dz_grid, 0.0);
}

TEST(DecomposeReconstruction, PlainQdqMatchesDecomposeTensor) {
  const Tensor x = random_tensor(3, 8, 64);
  const ErrorDecomposition a = decompose_tensor(x, {32, 0});
  const ErrorDecomposition b = decompose_reconstruction(x, qdq_tensor(x, {32, 0}), {32, 0});
  EXPECT_EQ(a.e_scale, b.e_scale);
  EXPECT_EQ(a.e_grid, b.e_grid);
  EXPECT_EQ(a.e_dz, b.e_dz);
  EXPECT_THROW(decompose_reconstruction(x, Tensor::zeros({8, 63}), {32, 0}), std::invalid_argument);
}

TEST(DecomposeReconstruction, FullIdentityHoldsForArbitraryReconstruction) {
  const Tensor x = random_tensor(8, 8, 64);
  Tensor y = x;
  gen::Pcg32 rng(2);
  for (double& v : y.data) v += 0.1 * rng.normal();
  const ErrorDecomposition d = decompose_reconstruction(x, y, {32, 0});
  EXPECT_LE(verify_identity_full(d), 1e-12);
}

TEST(Cosine, UndefinedForZeroVectors) {
  EXPECT_FALSE(cosine(0.0, 0.0, 1.0).defined);
  EXPECT_EQ(cosine(0.0, 0.0, 1.0).value, 0.0);
  const Cosine c = cosine(-1.0, 1.0, 4.0);
  EXPECT_TRUE(c.defined);
  EXPECT_DOUBLE_EQ(c.value, -0.5);
}

TEST(Histogram, EdgesAndCentre) {
  Histogram h(-1.0, 1.0, kCosineHistogramBins);
  EXPECT_EQ(h.bin_of(-1.0), 0u);
  EXPECT_EQ(h.bin_of(1.0), kCosineHistogramBins - 1);
  EXPECT_EQ(h.bin_of(0.0), 100u);
  EXPECT_EQ(h.bin_of(-5.0), 0u);
  EXPECT_EQ(h.bin_of(5.0), kCosineHistogramBins - 1);
}

TEST(Summarize, SampleStd) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const Summary s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(s.count, 4u);
  EXPECT_EQ(summarize(std::vector<double>{}).count, 0u);
}

TEST(LayerType, SecondToLastComponent) {
  EXPECT_EQ(layer_type_of("model.layers.0.self_attn.q_proj.weight"), "q_proj");
  EXPECT_EQ(layer_type_of("a.b"), "a");
  EXPECT_EQ(layer_type_of("weight"), "");
}

TEST(TensorStats, SharesAccountForTotal) {
  TensorSet set;
  for (int i = 0; i < 6; ++i) {
    set.add("layers." + std::to_string(i) + (i % 2 ? ".q_proj" : ".k_proj") + ".weight",
            random_tensor(static_cast<std::uint64_t>(i), 16, 128, static_cast<gen::Family>(i % 3)));
  }
  const DecompReport r = tensor_stats(set, {32, 0});
  ASSERT_EQ(r.tensors.size(), 6u);
  for (std::size_t i = 1; i < r.tensors.size(); ++i) EXPECT_LT(r.tensors[i - 1].name, r.tensors[i].name);
  for (const auto& t : r.tensors) {
    EXPECT_TRUE(t.shares_defined);
    EXPECT_NEAR(t.share_scale + t.share_dz + t.share_grid + t.cross_share, 1.0, 1e-9);
  }
  EXPECT_EQ(r.groups.size(), 2u);
  EXPECT_EQ(r.groups.at("q_proj").share_scale.count, 3u);
  EXPECT_EQ(r.aggregate.share_scale.count, 6u);
  std::size_t hist_total = 0;
  for (auto c : r.hist_scale_grid.counts) hist_total += c;
  EXPECT_EQ(hist_total, 6u);
  EXPECT_LE(r.max_identity_residual, 1e-9);
}

TEST(TensorStats, OnGridTensorFlagsZeroError) {
  TensorSet set;
  set.add("on_grid", Tensor({1, 4}, {6, 3, 1.5, 0.5}));
  const DecompReport r = tensor_stats(set, {4, 0});
  EXPECT_FALSE(r.tensors[0].shares_defined);
  EXPECT_EQ(r.tensors[0].mse_total, 0.0);
  EXPECT_EQ(r.tensors[0].share_scale, 0.0);
  EXPECT_EQ(r.aggregate.share_scale.count, 0u);
}

TEST(TensorStats, EmptySetIsAnError) {
  EXPECT_THROW(tensor_stats(TensorSet{}, {32, 0}), std::invalid_argument);
}

TEST(TensorStats, IndependentOfWorkerCount) {
  TensorSet set;
  for (int i = 0; i < 5; ++i) set.add("t" + std::to_string(i), random_tensor(100 + i, 32, 64));
  set_worker_count(1);
  const DecompReport a = tensor_stats(set, {32, 0});
  set_worker_count(5);
  const DecompReport b = tensor_stats(set, {32, 0});
  set_worker_count(0);
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    EXPECT_EQ(a.tensors[i].share_scale, b.tensors[i].share_scale);
    EXPECT_EQ(a.tensors[i].cos_scale_grid.value, b.tensors[i].cos_scale_grid.value);
  }
  EXPECT_EQ(a.aggregate.cos_scale_grid.mean, b.aggregate.cos_scale_grid.mean);
}

TEST(ScalePrecisionSweep, GridInvarianceAndFloor) {
  const Tensor x = random_tensor(0, 512, 512);
  const std::vector<int> bits{0, 1, 2, 3, 4, 5, 6, 7, 8};
  const SweepResult r = scale_precision_sweep(x, bits, 32);
  EXPECT_TRUE(r.grid_invariant);
  EXPECT_TRUE(r.monotone_total);
  ASSERT_EQ(r.points.size(), 9u);
  for (const auto& p : r.points) {
    EXPECT_EQ(p.mse_grid, r.points[0].mse_grid);
    EXPECT_EQ(p.mse_dz, r.points[0].mse_dz);
  }
  EXPECT_GE(r.floor_ratio, 1.0);
  EXPECT_LE(r.floor_ratio, 1.01);
}

TEST(ScalePrecisionSweep, OnGridTensorIsFlatZero) {
  const Tensor x({2, 4}, {6, 3, 1.5, 0.5, -6, 0, 3, 1});
  const std::vector<int> bits{0, 4, 8};
  const SweepResult r = scale_precision_sweep(x, bits, 4);
  for (const auto& p : r.points) EXPECT_EQ(p.mse_total, 0.0);
  EXPECT_EQ(r.floor_ratio, 1.0);
}

TEST(ScalePrecisionSweep, IsEveryWidthIdentityExact) {
  gen::Pcg32 rng(123);
  for (int f = 0; f < 3; ++f) {
    const Tensor x({64, 64}, gen::block(rng, static_cast<gen::Family>(f), 64 * 64));
    for (int m = 0; m <= 8; ++m) {
      EXPECT_LE(verify_identity(decompose_tensor(x, {32, m})), 1e-9);
    }
  }
}
