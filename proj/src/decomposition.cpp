// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mxdecomp/tensorstore.hpp"

namespace mxdecomp {

namespace {

// Fills Q*(x) and the deadzone mask for one block. Uses the same quotient for
// the rounding and the mask so the two never disagree.
void ideal_block(std::span<const double> x, std::span<double> q_star, std::span<unsigned char> dead) {
  double m = 0.0;
  for (double v : x) {
    if (!std::isfinite(v)) throw std::domain_error("non-finite input");
    m = std::max(m, std::fabs(v));
  }
  if (m == 0.0) {
    std::fill(q_star.begin(), q_star.end(), 0.0);
    std::fill(dead.begin(), dead.end(), 0);
    return;
  }
  const double s = m / ElementGrid::q_max;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double u = x[i] / s;
    q_star[i] = s * decode_grid(nearest_grid_code(u));
    dead[i] = std::fabs(u) < ElementGrid::deadzone_edge ? 1 : 0;
  }
}

struct IdealParts {
  std::vector<double> q_star;
  std::vector<unsigned char> dead;
};

IdealParts ideal_parts(const Tensor& tensor, std::size_t block_size) {
  IdealParts p;
  p.q_star.assign(tensor.numel(), 0.0);
  p.dead.assign(tensor.numel(), 0);
  const auto ranges = block_ranges(tensor.shape, block_size);
  parallel_for(ranges.size(), [&](std::size_t b) {
    const auto r = ranges[b];
    ideal_block(std::span<const double>(tensor.data).subspan(r.offset, r.length),
                std::span<double>(p.q_star).subspan(r.offset, r.length),
                std::span<unsigned char>(p.dead).subspan(r.offset, r.length));
  });
  return p;
}

ErrorDecomposition assemble(const Tensor& x, const std::vector<double>& x_hat, const IdealParts& ideal) {
  const std::size_t n = x.numel();
  ErrorDecomposition d;
  d.shape = x.shape;
  d.e_scale.resize(n);
  d.e_dz.resize(n);
  d.e_grid.resize(n);
  d.e_total.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double elem = ideal.q_star[i] - x.data[i];
    d.e_scale[i] = x_hat[i] - ideal.q_star[i];
    d.e_total[i] = x_hat[i] - x.data[i];
    if (ideal.dead[i]) {
      d.e_dz[i] = elem;
      d.e_grid[i] = 0.0;
      ++d.dz_count;
    } else {
      d.e_dz[i] = 0.0;
      d.e_grid[i] = elem;
    }
  }
  // Sequential reductions keep the result independent of the worker count.
  for (std::size_t i = 0; i < n; ++i) {
    d.norm2_total += d.e_total[i] * d.e_total[i];
    d.norm2_scale += d.e_scale[i] * d.e_scale[i];
    d.norm2_dz += d.e_dz[i] * d.e_dz[i];
    d.norm2_grid += d.e_grid[i] * d.e_grid[i];
    d.ip_scale_grid += d.e_scale[i] * d.e_grid[i];
    d.ip_scale_dz += d.e_scale[i] * d.e_dz[i];
    d.ip_dz_grid += d.e_dz[i] * d.e_grid[i];
  }
  d.cos_scale_grid = cosine(d.ip_scale_grid, d.norm2_scale, d.norm2_grid);
  d.cos_scale_dz = cosine(d.ip_scale_dz, d.norm2_scale, d.norm2_dz);
  d.cos_dz_grid = cosine(d.ip_dz_grid, d.norm2_dz, d.norm2_grid);
  d.dz_fraction = n == 0 ? 0.0 : static_cast<double>(d.dz_count) / static_cast<double>(n);
  return d;
}

}  // namespace

Cosine cosine(double inner, double norm2_a, double norm2_b) {
  if (norm2_a <= 0.0 || norm2_b <= 0.0) return {};
  return {inner / std::sqrt(norm2_a * norm2_b), true};
}

ErrorDecomposition decompose_tensor(const Tensor& tensor, const BlockQuantConfig& config) {
  config.validate();
  const IdealParts ideal = ideal_parts(tensor, config.block_size);
  const Tensor q = qdq_tensor(tensor, config);
  return assemble(tensor, q.data, ideal);
}

ErrorDecomposition decompose_reconstruction(const Tensor& tensor, const Tensor& reconstruction,
                                            const BlockQuantConfig& config) {
  config.validate();
  if (reconstruction.shape != tensor.shape) {
    throw std::invalid_argument("reconstruction shape does not match tensor shape");
  }
  const IdealParts ideal = ideal_parts(tensor, config.block_size);
  return assemble(tensor, reconstruction.data, ideal);
}

double verify_identity(const ErrorDecomposition& d) {
  const double rhs = d.norm2_scale + d.norm2_dz + d.norm2_grid + 2.0 * d.ip_scale_grid;
  const double denom = std::max(d.norm2_total, std::numeric_limits<double>::min());
  return std::fabs(d.norm2_total - rhs) / denom;
}

double verify_identity_full(const ErrorDecomposition& d) {
  const double rhs = d.norm2_scale + d.norm2_dz + d.norm2_grid +
                     2.0 * (d.ip_scale_grid + d.ip_scale_dz + d.ip_dz_grid);
  const double denom = std::max(d.norm2_total, std::numeric_limits<double>::min());
  return std::fabs(d.norm2_total - rhs) / denom;
}

Orthogonality orthogonality_check(const ErrorDecomposition& d) {
  return {d.ip_scale_dz, d.ip_dz_grid};
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::size_t Histogram::bin_of(double v) const {
  const std::size_t bins = counts.size();
  const double t = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(t > 0.0)) return 0;
  const auto idx = static_cast<std::size_t>(t);
  return std::min(idx, bins - 1);
}

TensorRecord make_record(const std::string& name, const ErrorDecomposition& d) {
  TensorRecord r;
  r.name = name;
  r.shape = d.shape;
  r.numel = d.numel();
  r.cos_scale_grid = d.cos_scale_grid;
  r.cos_scale_dz = d.cos_scale_dz;
  r.cos_dz_grid = d.cos_dz_grid;
  r.dz_fraction = d.dz_fraction;
  r.mse_total = r.numel == 0 ? 0.0 : d.norm2_total / static_cast<double>(r.numel);
  r.identity_residual = verify_identity(d);
  if (d.norm2_total > 0.0) {
    r.shares_defined = true;
    r.share_scale = d.norm2_scale / d.norm2_total;
    r.share_dz = d.norm2_dz / d.norm2_total;
    r.share_grid = d.norm2_grid / d.norm2_total;
    r.cross_share = 2.0 * d.ip_scale_grid / d.norm2_total;
  }
  return r;
}

std::string layer_type_of(const std::string& name) {
  const auto last = name.rfind('.');
  if (last == std::string::npos || last == 0) return {};
  const auto prev = name.rfind('.', last - 1);
  const std::size_t begin = prev == std::string::npos ? 0 : prev + 1;
  return name.substr(begin, last - begin);
}

namespace {

DecompAggregate aggregate_records(const std::vector<const TensorRecord*>& records) {
  std::vector<double> ss, sd, sg, cr, csg, csd, cdg, dz, mse;
  for (const TensorRecord* r : records) {
    if (!r->shares_defined) continue;
    ss.push_back(r->share_scale);
    sd.push_back(r->share_dz);
    sg.push_back(r->share_grid);
    cr.push_back(r->cross_share);
    csg.push_back(r->cos_scale_grid.value);
    csd.push_back(r->cos_scale_dz.value);
    cdg.push_back(r->cos_dz_grid.value);
    dz.push_back(r->dz_fraction);
    mse.push_back(r->mse_total);
  }
  return {summarize(ss), summarize(sd), summarize(sg), summarize(cr), summarize(csg),
          summarize(csd), summarize(cdg), summarize(dz), summarize(mse)};
}

}  // namespace

DecompReport tensor_stats(const TensorSet& tensors, const BlockQuantConfig& config) {
  if (tensors.empty()) throw std::invalid_argument("tensor set is empty");
  config.validate();
  DecompReport report;
  report.config = config;
  report.hist_scale_grid = Histogram(-1.0, 1.0, kCosineHistogramBins);
  report.hist_scale_dz = Histogram(-1.0, 1.0, kCosineHistogramBins);
  report.hist_dz_grid = Histogram(-1.0, 1.0, kCosineHistogramBins);
  for (const auto& [name, entry] : tensors.entries) {
    const ErrorDecomposition d = decompose_tensor(entry.tensor, config);
    TensorRecord r = make_record(name, d);
    report.max_identity_residual = std::max(report.max_identity_residual, r.identity_residual);
    if (r.shares_defined) {
      report.hist_scale_grid.add(r.cos_scale_grid.value);
      report.hist_scale_dz.add(r.cos_scale_dz.value);
      report.hist_dz_grid.add(r.cos_dz_grid.value);
    }
    report.tensors.push_back(std::move(r));
  }
  std::vector<const TensorRecord*> all;
  std::map<std::string, std::vector<const TensorRecord*>> by_group;
  for (const TensorRecord& r : report.tensors) {
    all.push_back(&r);
    const std::string key = layer_type_of(r.name);
    if (!key.empty()) by_group[key].push_back(&r);
  }
  report.aggregate = aggregate_records(all);
  for (const auto& [key, recs] : by_group) report.groups[key] = aggregate_records(recs);
  return report;
}

SweepResult scale_precision_sweep(const Tensor& tensor, std::span<const int> mantissa_bits,
                                  std::size_t block_size) {
  if (mantissa_bits.empty()) throw std::invalid_argument("empty mantissa list");
  SweepResult result;
  const double n = std::max<double>(1.0, static_cast<double>(tensor.numel()));
  std::vector<double> ref_grid, ref_dz;
  for (int bits : mantissa_bits) {
    const BlockQuantConfig config{block_size, bits};
    const ErrorDecomposition d = decompose_tensor(tensor, config);
    if (result.points.empty()) {
      ref_grid = d.e_grid;
      ref_dz = d.e_dz;
      result.floor_mse = (d.norm2_grid + d.norm2_dz) / n;
    } else if (d.e_grid != ref_grid || d.e_dz != ref_dz) {
      result.grid_invariant = false;
    }
    SweepPoint p;
    p.mantissa_bits = bits;
    p.mse_total = d.norm2_total / n;
    p.mse_scale = d.norm2_scale / n;
    p.mse_grid = d.norm2_grid / n;
    p.mse_dz = d.norm2_dz / n;
    p.cross = 2.0 * d.ip_scale_grid / n;
    if (!result.points.empty() && p.mse_total > result.points.back().mse_total) {
      result.monotone_total = false;
    }
    result.points.push_back(p);
  }
  const double last = result.points.back().mse_total;
  result.floor_ratio = result.floor_mse > 0.0 ? last / result.floor_mse : 1.0;
  return result;
}

}  // namespace mxdecomp
