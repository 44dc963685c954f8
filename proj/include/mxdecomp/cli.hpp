// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands: decompose, sweep, mbs, of, gamma,
// cltsum, temp, gemm, aqn. Exit codes: 0 success, 2 input or configuration
// error, 3 internal invariant violation.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mxdecomp/analysis.hpp"
#include "mxdecomp/corrections.hpp"
#include "mxdecomp/quantizer.hpp"
#include "mxdecomp/report.hpp"

namespace mxdecomp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitInvariant = 3;

/// Relative MSE-identity residual above which a command aborts with exit 3.
inline constexpr double kIdentityTolerance = 1e-9;

enum class OutputFormat { json, csv };

struct RunConfig {
  std::string subcommand;
  std::string input;
  std::string synth;
  std::uint64_t seed = 0;
  BlockQuantConfig quant;
  MbsConfig mbs;
  bool with_mbs = false;
  OfConfig of;
  AqnSchedule aqn;
  OutputFormat format = OutputFormat::json;
  std::string out;
  bool timing = true;
  std::size_t threads = 0;

  // sweep
  std::vector<int> sweep_bits{0, 1, 2, 3, 4, 5, 6, 7, 8};
  // gamma
  std::size_t min_blocks = kGammaMinBlocks;
  // cltsum
  int layers = 48;
  std::size_t trials = 100000;
  std::size_t blocks_per_layer = 1;
  bool empirical = false;
  // temp
  std::size_t vocab = 100;
  std::vector<double> ratios{0.0, 0.25, 0.5, 1.0};
  std::size_t draws = 100000;
  // gemm
  std::string covariance = "isotropic";
  double variance = 1.0;
  std::string activations;
  std::size_t mc_samples = 10000;
  // aqn
  std::optional<int> stage;
  std::string noised_out;
};

Json to_json(const RunConfig& c);

/// Runs one command and returns the report text. Throws on errors.
std::string execute(const RunConfig& config);

/// Parses argv, runs the command, writes the report to --out (atomically)
/// or to `out`, and maps errors to exit codes with a message on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mxdecomp
