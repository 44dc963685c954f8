// SPDX-License-Identifier: Apache-2.0
//
// Exact three-way split of the MXFP4 quantization error:
//
//   e = Q(x) - x = (Q(x) - Q*(x))            scale
//                + (Q*(x) - x) * 1[dead]     deadzone
//                + (Q*(x) - x) * 1[live]     grid
//
// The deadzone component is orthogonal to both others on every input, which
// leaves a single cross term in ||e||^2.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mxdecomp/quantizer.hpp"
#include "mxdecomp/tensor.hpp"

namespace mxdecomp {

struct TensorSet;

/// Raised when an identity that must hold on every finite input does not.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Cosine similarity; `defined` is false when either vector is zero, in
/// which case value is 0.
struct Cosine {
  double value = 0.0;
  bool defined = false;
};

Cosine cosine(double inner, double norm2_a, double norm2_b);

struct ErrorDecomposition {
  Shape shape;
  std::vector<double> e_scale;
  std::vector<double> e_dz;
  std::vector<double> e_grid;
  /// Reconstruction minus input, computed directly.
  std::vector<double> e_total;

  double norm2_total = 0.0;
  double norm2_scale = 0.0;
  double norm2_dz = 0.0;
  double norm2_grid = 0.0;
  double ip_scale_grid = 0.0;
  double ip_scale_dz = 0.0;
  double ip_dz_grid = 0.0;

  Cosine cos_scale_grid;
  Cosine cos_scale_dz;
  Cosine cos_dz_grid;

  std::size_t dz_count = 0;
  double dz_fraction = 0.0;

  std::size_t numel() const { return e_total.size(); }
};

ErrorDecomposition decompose_tensor(const Tensor& tensor, const BlockQuantConfig& config);

/// Decomposition of an arbitrary reconstruction x_hat of x (e.g. MBS output):
/// e_scale = x_hat - Q*(x); the deadzone and grid parts depend only on x.
ErrorDecomposition decompose_reconstruction(const Tensor& tensor, const Tensor& reconstruction,
                                            const BlockQuantConfig& config);

/// |‖e‖² - (‖e_scale‖² + ‖e_dz‖² + ‖e_grid‖² + 2<e_scale, e_grid>)| / max(‖e‖², eps).
double verify_identity(const ErrorDecomposition& d);

/// Same with all three cross terms. This is the identity that holds for an
/// arbitrary reconstruction, whose deadzone entries need not be zero.
double verify_identity_full(const ErrorDecomposition& d);

struct Orthogonality {
  double scale_dz = 0.0;
  double dz_grid = 0.0;
};

/// The two deadzone inner products. Both are exactly 0.0 for Q.
Orthogonality orthogonality_check(const ErrorDecomposition& d);

/// Per-tensor Table-1 style statistics.
struct TensorRecord {
  std::string name;
  Shape shape;
  std::size_t numel = 0;
  double share_scale = 0.0;
  double share_dz = 0.0;
  double share_grid = 0.0;
  double cross_share = 0.0;
  Cosine cos_scale_grid;
  Cosine cos_scale_dz;
  Cosine cos_dz_grid;
  double dz_fraction = 0.0;
  double mse_total = 0.0;
  double identity_residual = 0.0;
  /// False when mse_total == 0; shares are then reported as 0.
  bool shares_defined = false;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

/// Fixed-range histogram: `bins` equal-width bins over [lo, hi]; values at
/// or beyond the edges land in the first or last bin.
struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;

  Histogram() = default;
  Histogram(double lo_, double hi_, std::size_t bins) : lo(lo_), hi(hi_), counts(bins, 0) {}

  std::size_t bin_of(double v) const;
  void add(double v) { ++counts[bin_of(v)]; }
};

inline constexpr std::size_t kCosineHistogramBins = 201;

struct DecompAggregate {
  Summary share_scale;
  Summary share_dz;
  Summary share_grid;
  Summary cross_share;
  Summary cos_scale_grid;
  Summary cos_scale_dz;
  Summary cos_dz_grid;
  Summary dz_fraction;
  Summary mse_total;
};

struct DecompReport {
  BlockQuantConfig config;
  /// Sorted by tensor name.
  std::vector<TensorRecord> tensors;
  /// Means and stds over tensors with shares_defined.
  DecompAggregate aggregate;
  /// Grouped by layer type (the second-to-last dotted name component),
  /// only for names that carry one.
  std::map<std::string, DecompAggregate> groups;
  Histogram hist_scale_grid;
  Histogram hist_scale_dz;
  Histogram hist_dz_grid;
  double max_identity_residual = 0.0;
};

TensorRecord make_record(const std::string& name, const ErrorDecomposition& d);

/// Throws std::invalid_argument on an empty set.
DecompReport tensor_stats(const TensorSet& tensors, const BlockQuantConfig& config);

/// Layer-type key of a dotted tensor name ("a.b.q_proj.weight" -> "q_proj");
/// empty when the name has fewer than two components.
std::string layer_type_of(const std::string& name);

struct SweepPoint {
  int mantissa_bits = 0;
  double mse_total = 0.0;
  double mse_scale = 0.0;
  double mse_grid = 0.0;
  double mse_dz = 0.0;
  /// 2<e_scale, e_grid> / numel.
  double cross = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  /// mse_grid + mse_dz, identical for every point.
  double floor_mse = 0.0;
  /// e_grid and e_dz bitwise equal across all mantissa widths.
  bool grid_invariant = true;
  bool monotone_total = true;
  /// mse_total at the widest mantissa divided by floor_mse (1 when both are 0).
  double floor_ratio = 1.0;
};

SweepResult scale_precision_sweep(const Tensor& tensor, std::span<const int> mantissa_bits,
                                  std::size_t block_size);

}  // namespace mxdecomp
