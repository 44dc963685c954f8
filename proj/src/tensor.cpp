// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <thread>

namespace mxdecomp {

namespace {
std::atomic<std::size_t> g_workers{0};
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor data size does not match shape");
  }
}

Tensor Tensor::zeros(Shape s) {
  const std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

std::size_t Tensor::inner_extent() const {
  return shape.empty() ? data.size() : shape.back();
}

std::size_t Tensor::rows() const {
  const std::size_t inner = inner_extent();
  return inner == 0 ? 0 : data.size() / inner;
}

std::vector<BlockRange> block_ranges(const Shape& shape, std::size_t block) {
  if (block == 0) {
    throw std::invalid_argument("block size must be positive");
  }
  const std::size_t numel = shape_numel(shape);
  const std::size_t inner = shape.empty() ? numel : shape.back();
  std::vector<BlockRange> out;
  if (inner == 0) return out;
  const std::size_t rows = numel / inner;
  out.reserve(rows * ((inner + block - 1) / block));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t start = 0; start < inner; start += block) {
      out.push_back({r * inner + start, std::min(block, inner - start)});
    }
  }
  return out;
}

void set_worker_count(std::size_t workers) { g_workers.store(workers); }

std::size_t worker_count() {
  const std::size_t w = g_workers.load();
  if (w != 0) return w;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t min_per_worker) {
  if (n == 0) return;
  const std::size_t by_size = std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_per_worker));
  const std::size_t workers = std::min(worker_count(), by_size);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  const std::size_t chunk = std::max<std::size_t>(1, min_per_worker / 4);
  auto worker = [&] {
    try {
      for (;;) {
        const std::size_t begin = next.fetch_add(chunk);
        if (begin >= n || failed.load()) return;
        const std::size_t end = std::min(n, begin + chunk);
        for (std::size_t i = begin; i < end; ++i) fn(i);
      }
    } catch (...) {
      if (!failed.exchange(true)) failure = std::current_exception();
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace mxdecomp
