// SPDX-License-Identifier: Apache-2.0
//
// JSON and CSV encodings of analysis results. Object keys are sorted and
// every float is rounded to 12 significant digits, so equal inputs give
// equal bytes.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mxdecomp/analysis.hpp"
#include "mxdecomp/corrections.hpp"
#include "mxdecomp/decomposition.hpp"

namespace mxdecomp {

using Json = nlohmann::json;

inline constexpr std::string_view kArtifactName = "mxdecomp";
inline constexpr std::string_view kArtifactVersion = "1.0.0";
inline constexpr std::string_view kReportSchemaVersion = "1";

/// v rounded to `digits` significant decimal digits (%.{digits}g then parsed).
double round_sig(double v, int digits = 12);
/// %.12g, with "nan"/"inf"/"-inf" spelled out.
std::string format_number(double v);

/// Rounds every float in `j` in place.
void round_floats(Json& j);
/// Rounded, sorted, two-space indented, trailing newline.
std::string render_json(Json j);

/// A flat table: one header row and rows of scalar JSON values.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Json>> rows;
};

/// `# key: value` comment lines for every entry of `meta` (values as compact
/// JSON), then the header and rows. Numbers use format_number.
std::string render_csv(const Json& meta, const Table& table);

Json to_json(const Cosine& c);
Json to_json(const Summary& s);
Json to_json(const Histogram& h);
Json to_json(const BlockQuantConfig& c);
Json to_json(const TensorRecord& r);
Json to_json(const DecompAggregate& a);
Json to_json(const DecompReport& r);
Json to_json(const SweepResult& r);
Json to_json(const GammaStats& g);
Json to_json(const CltResult& r);
Json to_json(const TempFit& f);
Json to_json(const GemmPropagation& g);
Json to_json(const CrossTermPoint& p);
Json to_json(const AqnSchedule& s);

/// Component summary of one decomposition (norms divided by numel).
Json decomposition_summary(const ErrorDecomposition& d);

/// One CSV row per tensor with shares, cosines and the deadzone fraction.
Table decomp_table(const DecompReport& r);

}  // namespace mxdecomp
