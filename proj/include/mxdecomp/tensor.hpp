// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace mxdecomp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor with values widened to double.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);

  static Tensor zeros(Shape s);
  static Tensor vector(std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  /// Extent of the fastest-varying axis (numel for rank-0 tensors).
  std::size_t inner_extent() const;
  std::size_t rows() const;

  std::span<const double> values() const { return data; }
  std::span<double> values() { return data; }
};

/// A contiguous run of elements inside one row of the innermost axis.
struct BlockRange {
  std::size_t offset = 0;
  std::size_t length = 0;
};

/// Splits every row of the innermost axis into ceil(inner / block) ranges;
/// the last range of a row may be short.
std::vector<BlockRange> block_ranges(const Shape& shape, std::size_t block);

/// Runs fn(i) for i in [0, n) on a fixed pool of workers. Each index is
/// processed exactly once, so callers that write per-index outputs get
/// results independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t min_per_worker = 64);

/// Override the worker count (0 restores the hardware default).
void set_worker_count(std::size_t workers);
std::size_t worker_count();

}  // namespace mxdecomp
