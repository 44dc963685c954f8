// SPDX-License-Identifier: Apache-2.0
//
// Named tensor sets: the checkpoint container codec and seeded synthetic data.
//
// Container layout (all integers little-endian):
//   [0, 8)        u64 N, length of the JSON header
//   [8, 8 + N)    JSON object: name -> {"dtype", "shape", "data_offsets": [begin, end)}
//                 offsets are relative to byte 8 + N; "__metadata__" is ignored
//   [8 + N, ...)  raw tensor bytes

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mxdecomp/tensor.hpp"

namespace mxdecomp {

enum class DType { F64, F32, F16, BF16 };

std::string_view dtype_name(DType d);
std::size_t dtype_size(DType d);
/// Throws FormatError for names outside F64/F32/F16/BF16.
DType parse_dtype(std::string_view name);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorEntry {
  DType dtype = DType::F64;
  Tensor tensor;
};

struct TensorSet {
  std::map<std::string, TensorEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t size() const { return entries.size(); }
  void add(std::string name, Tensor t, DType dtype = DType::F64);
};

/// Parses a container file. Throws FormatError with a descriptive message on
/// malformed headers, overlapping or out-of-bounds offsets, unknown dtypes,
/// size mismatches and non-finite values.
TensorSet load_container(const std::filesystem::path& path);
TensorSet parse_container(std::string_view bytes);

/// Writes a container with tensors in name order; replaces `path` atomically.
void save_container(const TensorSet& set, const std::filesystem::path& path);
std::string serialize_container(const TensorSet& set);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// Exact half-precision conversions.
double half_to_double(std::uint16_t bits);
double bfloat16_to_double(std::uint16_t bits);
std::uint16_t double_to_half(double v);
std::uint16_t double_to_bfloat16(double v);

enum class Distribution { gaussian, laplace, student_t, lognormal_max_blocks };

/// Seeded synthetic tensors. `count` tensors named "<prefix>.<index>" with a
/// zero-padded index so name order equals generation order.
struct SynthSpec {
  Distribution distribution = Distribution::gaussian;
  Shape shape{256, 256};
  std::uint64_t seed = 0;
  std::size_t count = 1;
  /// Student-t degrees of freedom; must exceed 4.
  double nu = 5.0;
  /// lognormal_max_blocks: log-scale spread and block length of the per-block
  /// magnitude factor.
  double log_sigma = 2.0;
  std::size_t block = 32;
  std::string prefix = "synth";

  void validate() const;
};

std::string_view distribution_name(Distribution d);
Distribution parse_distribution(std::string_view name);

TensorSet synth(const SynthSpec& spec);

/// Parses "dist[,key=value...]:DIMxDIM...[@count]", e.g. "gaussian:256x256@64"
/// or "student_t,nu=5:128x128". A JSON object with the SynthSpec field names
/// is accepted as well. Throws std::invalid_argument.
SynthSpec parse_synth_spec(std::string_view text, std::uint64_t seed);

}  // namespace mxdecomp
