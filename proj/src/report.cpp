// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace mxdecomp {

double round_sig(double v, int digits) {
  if (!std::isfinite(v) || v == 0.0) return v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return std::strtod(buf, nullptr);
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void round_floats(Json& j) {
  if (j.is_number_float()) {
    j = round_sig(j.get<double>());
  } else if (j.is_structured()) {
    for (auto& child : j) round_floats(child);
  }
}

std::string render_json(Json j) {
  round_floats(j);
  return j.dump(2) + "\n";
}

namespace {

std::string csv_cell(const Json& v) {
  if (v.is_number_float()) return format_number(v.get<double>());
  if (v.is_number()) return v.dump();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_null()) return "";
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  return quoted + "\"";
}

}  // namespace

std::string render_csv(const Json& meta, const Table& table) {
  std::ostringstream out;
  Json rounded = meta;
  round_floats(rounded);
  for (const auto& [key, value] : rounded.items()) out << "# " << key << ": " << value.dump() << "\n";
  for (std::size_t i = 0; i < table.columns.size(); ++i) out << (i ? "," : "") << table.columns[i];
  out << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_cell(row[i]);
    out << "\n";
  }
  return out.str();
}

Json to_json(const Cosine& c) { return {{"value", c.defined ? c.value : 0.0}, {"defined", c.defined}}; }

Json to_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}, {"count", s.count}}; }

Json to_json(const Histogram& h) { return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; }

Json to_json(const BlockQuantConfig& c) {
  return {{"block_size", c.block_size}, {"scale_mantissa_bits", c.scale_mantissa_bits}};
}

Json to_json(const TensorRecord& r) {
  return {{"name", r.name},
          {"shape", r.shape},
          {"numel", r.numel},
          {"share_scale", r.share_scale},
          {"share_dz", r.share_dz},
          {"share_grid", r.share_grid},
          {"cross_share", r.cross_share},
          {"cos_scale_grid", to_json(r.cos_scale_grid)},
          {"cos_scale_dz", to_json(r.cos_scale_dz)},
          {"cos_dz_grid", to_json(r.cos_dz_grid)},
          {"dz_fraction", r.dz_fraction},
          {"mse_total", r.mse_total},
          {"identity_residual", r.identity_residual},
          {"shares_defined", r.shares_defined}};
}

Json to_json(const DecompAggregate& a) {
  return {{"share_scale", to_json(a.share_scale)},     {"share_dz", to_json(a.share_dz)},
          {"share_grid", to_json(a.share_grid)},       {"cross_share", to_json(a.cross_share)},
          {"cos_scale_grid", to_json(a.cos_scale_grid)}, {"cos_scale_dz", to_json(a.cos_scale_dz)},
          {"cos_dz_grid", to_json(a.cos_dz_grid)},     {"dz_fraction", to_json(a.dz_fraction)},
          {"mse_total", to_json(a.mse_total)}};
}

Json to_json(const DecompReport& r) {
  Json tensors = Json::array();
  for (const auto& t : r.tensors) tensors.push_back(to_json(t));
  Json groups = Json::object();
  for (const auto& [k, g] : r.groups) groups[k] = to_json(g);
  return {{"quant", to_json(r.config)},
          {"tensors", tensors},
          {"aggregate", to_json(r.aggregate)},
          {"groups", groups},
          {"histograms",
           {{"cos_scale_grid", to_json(r.hist_scale_grid)},
            {"cos_scale_dz", to_json(r.hist_scale_dz)},
            {"cos_dz_grid", to_json(r.hist_dz_grid)}}},
          {"max_identity_residual", r.max_identity_residual}};
}

Json to_json(const SweepResult& r) {
  Json points = Json::array();
  for (const auto& p : r.points) {
    points.push_back({{"mantissa_bits", p.mantissa_bits},
                      {"mse_total", p.mse_total},
                      {"mse_scale", p.mse_scale},
                      {"mse_grid", p.mse_grid},
                      {"mse_dz", p.mse_dz},
                      {"cross", p.cross}});
  }
  return {{"points", points},
          {"floor_mse", r.floor_mse},
          {"grid_invariant", r.grid_invariant},
          {"monotone_total", r.monotone_total},
          {"floor_ratio", r.floor_ratio}};
}

Json to_json(const GammaStats& g) {
  return {{"mean_delta", g.mean_delta},
          {"mean_gamma", g.mean_gamma},
          {"rmse_gamma_minus_1", g.rmse_gamma_minus_1},
          {"rms_delta", g.rms_delta},
          {"delta_histogram", to_json(g.delta_histogram)},
          {"blocks", g.blocks},
          {"skipped_zero_blocks", g.skipped_zero_blocks}};
}

namespace {
Json to_json(const Band& b) { return {{"lo", b.lo}, {"hi", b.hi}}; }
}  // namespace

Json to_json(const CltResult& r) {
  return {{"layers", r.layers},
          {"trials", r.trials},
          {"std_centered", r.std_centered},
          {"theory_std", r.theory_std},
          {"mean_sum", r.mean_sum},
          {"band_natural", to_json(r.band_natural)},
          {"band_log2", to_json(r.band_log2)},
          {"band_uncentered_log2", to_json(r.band_uncentered_log2)}};
}

Json to_json(const TempFit& f) {
  return {{"t_hat", f.t_hat},
          {"kl_at_fit", f.kl_at_fit},
          {"entropy_clean", f.entropy_clean},
          {"entropy_noisy", f.entropy_noisy},
          {"sigma_eta2", f.predicted.sigma_eta2},
          {"var_delta_logit", f.predicted.var_delta_ell},
          {"t_eff_predicted", f.predicted.t_eff}};
}

Json to_json(const GemmPropagation& g) {
  return {{"var_scale", g.var_scale},
          {"var_dz", g.var_dz},
          {"var_grid", g.var_grid},
          {"cross_scale_grid", g.cross_scale_grid},
          {"cross_scale_dz", g.cross_scale_dz},
          {"cross_dz_grid", g.cross_dz_grid},
          {"analytic_total", g.analytic_total},
          {"approx_total", g.approx_total},
          {"dropped_cross_fraction", g.dropped_cross_fraction},
          {"monte_carlo", g.monte_carlo},
          {"monte_carlo_rel_error", g.monte_carlo_rel_error},
          {"samples", g.samples}};
}

Json to_json(const CrossTermPoint& p) {
  return {{"block_size", p.block_size},
          {"blocks", p.blocks},
          {"normalized_cross", p.normalized_cross},
          {"cos_scale_grid", to_json(p.cos_scale_grid)},
          {"centered_cross_rms", p.centered_cross_rms},
          {"mean_block_cross", p.mean_block_cross}};
}

Json to_json(const AqnSchedule& s) {
  Json mult = Json::array();
  for (const auto& [pattern, m] : s.multipliers) mult.push_back({{"pattern", pattern}, {"multiplier", m}});
  return {{"sigma_start", s.sigma_start},
          {"sigma_end", s.sigma_end},
          {"num_stages", s.num_stages},
          {"multipliers", mult},
          {"stages", s.stages()}};
}

Json decomposition_summary(const ErrorDecomposition& d) {
  const double n = static_cast<double>(std::max<std::size_t>(1, d.numel()));
  return {{"mse_total", d.norm2_total / n},
          {"mse_scale", d.norm2_scale / n},
          {"mse_dz", d.norm2_dz / n},
          {"mse_grid", d.norm2_grid / n},
          {"cross", 2.0 * d.ip_scale_grid / n},
          {"cross_scale_dz", 2.0 * d.ip_scale_dz / n},
          {"cross_dz_grid", 2.0 * d.ip_dz_grid / n},
          {"cos_scale_grid", to_json(d.cos_scale_grid)},
          {"dz_fraction", d.dz_fraction},
          {"identity_residual", verify_identity_full(d)}};
}

Table decomp_table(const DecompReport& r) {
  Table t;
  t.columns = {"name",           "numel",        "share_scale",  "share_dz",    "share_grid",
               "cross_share",    "cos_scale_grid", "cos_scale_dz", "cos_dz_grid", "dz_fraction",
               "mse_total",      "identity_residual", "shares_defined"};
  for (const auto& rec : r.tensors) {
    const Json j = to_json(rec);
    t.rows.push_back({j["name"], j["numel"], j["share_scale"], j["share_dz"], j["share_grid"], j["cross_share"],
                      j["cos_scale_grid"]["value"], j["cos_scale_dz"]["value"], j["cos_dz_grid"]["value"],
                      j["dz_fraction"], j["mse_total"], j["identity_residual"], j["shares_defined"]});
  }
  return t;
}

}  // namespace mxdecomp
