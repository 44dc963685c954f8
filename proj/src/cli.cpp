// SPDX-License-Identifier: Apache-2.0

#include "mxdecomp/cli.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <stdexcept>

#include "mxdecomp/random.hpp"
#include "mxdecomp/tensorstore.hpp"

namespace mxdecomp {

namespace {

std::string_view selection_name(MbsSelection s) {
  return s == MbsSelection::exhaustive ? "exhaustive" : "closed_form";
}

TensorSet load_input(const RunConfig& c) {
  if (!c.input.empty() && !c.synth.empty()) throw std::invalid_argument("--input and --synth are exclusive");
  if (!c.input.empty()) return load_container(c.input);
  if (!c.synth.empty()) return synth(parse_synth_spec(c.synth, c.seed));
  throw std::invalid_argument("one of --input or --synth is required");
}

bool has_input(const RunConfig& c) { return !c.input.empty() || !c.synth.empty(); }

void check_identity(const ErrorDecomposition& d, const std::string& name) {
  const double r = verify_identity_full(d);
  if (!(r <= kIdentityTolerance)) {
    throw InvariantViolation("MSE identity residual " + format_number(r) + " exceeds tolerance for '" + name + "'");
  }
}

struct Output {
  Json result;
  Table table;
  /// Scalars echoed as a CSV comment line.
  Json csv_summary;
};

Output cmd_decompose(const RunConfig& c) {
  const TensorSet set = load_input(c);
  const DecompReport report = tensor_stats(set, c.quant);
  if (!(report.max_identity_residual <= kIdentityTolerance)) {
    throw InvariantViolation("MSE identity residual " + format_number(report.max_identity_residual) +
                             " exceeds tolerance");
  }
  Output o;
  o.result = to_json(report);
  o.table = decomp_table(report);
  o.csv_summary = {{"aggregate", o.result["aggregate"]}, {"max_identity_residual", report.max_identity_residual}};
  return o;
}

Output cmd_sweep(const RunConfig& c) {
  const TensorSet set = load_input(c);
  Output o;
  o.result = {{"tensors", Json::array()}};
  o.table.columns = {"name", "mantissa_bits", "mse_total", "mse_scale", "mse_grid", "mse_dz", "cross"};
  Json floors = Json::object();
  for (const auto& [name, entry] : set.entries) {
    const SweepResult r = scale_precision_sweep(entry.tensor, c.sweep_bits, c.quant.block_size);
    if (!r.grid_invariant) throw InvariantViolation("grid and deadzone errors changed with the scale precision");
    Json j = to_json(r);
    j["name"] = name;
    for (const auto& p : j["points"]) {
      o.table.rows.push_back({name, p["mantissa_bits"], p["mse_total"], p["mse_scale"], p["mse_grid"],
                              p["mse_dz"], p["cross"]});
    }
    floors[name] = {{"floor_mse", j["floor_mse"]}, {"floor_ratio", j["floor_ratio"]},
                    {"monotone_total", j["monotone_total"]}};
    o.result["tensors"].push_back(std::move(j));
  }
  o.csv_summary = floors;
  return o;
}

Json before_after(const std::string& name, const Tensor& x, const Tensor& x_hat, const BlockQuantConfig& quant) {
  const ErrorDecomposition before = decompose_tensor(x, quant);
  const ErrorDecomposition after = decompose_reconstruction(x, x_hat, quant);
  check_identity(before, name);
  check_identity(after, name);
  if (before.ip_scale_dz != 0.0 || before.ip_dz_grid != 0.0) {
    throw InvariantViolation("deadzone component is not orthogonal for '" + name + "'");
  }
  const DzRecovery dz = dz_recovery_rate(x, x_hat, quant);
  const double n = static_cast<double>(std::max<std::size_t>(1, x.numel()));
  const double floor = (after.norm2_dz + after.norm2_grid) / n;
  Json j = {{"name", name},
            {"before", decomposition_summary(before)},
            {"after", decomposition_summary(after)},
            {"floor_mse", floor},
            {"total_over_floor", floor > 0.0 ? after.norm2_total / n / floor : 1.0},
            {"dz_rate_before", dz.before},
            {"dz_rate_after", dz.after}};
  j["scale_reduction"] = after.norm2_scale > 0.0 ? Json(before.norm2_scale / after.norm2_scale) : Json(nullptr);
  return j;
}

Table before_after_table(const Json& tensors) {
  Table t;
  t.columns = {"name",         "mse_total_before", "mse_total_after", "mse_scale_before", "mse_scale_after",
               "scale_reduction", "floor_mse",      "total_over_floor", "dz_rate_before",   "dz_rate_after"};
  for (const auto& j : tensors) {
    t.rows.push_back({j["name"], j["before"]["mse_total"], j["after"]["mse_total"], j["before"]["mse_scale"],
                      j["after"]["mse_scale"], j["scale_reduction"], j["floor_mse"], j["total_over_floor"],
                      j["dz_rate_before"], j["dz_rate_after"]});
  }
  return t;
}

Output cmd_mbs(const RunConfig& c) {
  c.mbs.validate(c.quant);
  const TensorSet set = load_input(c);
  Output o;
  o.result = {{"tensors", Json::array()}};
  for (const auto& [name, entry] : set.entries) {
    const MbsResult r = mbs_qdq(entry.tensor, c.quant, c.mbs);
    Json j = before_after(name, entry.tensor, r.x_hat, c.quant);
    j["mantissa_codes"] = r.mantissa_codes;
    o.result["tensors"].push_back(std::move(j));
  }
  o.table = before_after_table(o.result["tensors"]);
  o.csv_summary = Json::object();
  return o;
}

Output cmd_of(const RunConfig& c) {
  c.of.validate();
  if (c.with_mbs) c.mbs.validate(c.quant);
  const TensorSet set = load_input(c);
  const std::optional<MbsConfig> mbs = c.with_mbs ? std::optional<MbsConfig>(c.mbs) : std::nullopt;
  Output o;
  o.result = {{"tensors", Json::array()}};
  for (const auto& [name, entry] : set.entries) {
    const OfResult r = of_qdq(entry.tensor, c.of, c.quant, mbs);
    o.result["tensors"].push_back(before_after(name, entry.tensor, r.x_hat, c.quant));
  }
  o.table = before_after_table(o.result["tensors"]);
  o.csv_summary = Json::object();
  return o;
}

Output cmd_gamma(const RunConfig& c) {
  const TensorSet set = load_input(c);
  const GammaStats g = gamma_stats(set, c.quant, c.min_blocks);
  Output o;
  o.result = to_json(g);
  o.table.columns = {"bin_lo", "bin_hi", "count"};
  const auto& h = g.delta_histogram;
  const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    o.table.rows.push_back({h.lo + static_cast<double>(i) * width, h.lo + static_cast<double>(i + 1) * width,
                            h.counts[i]});
  }
  o.csv_summary = o.result;
  o.csv_summary.erase("delta_histogram");
  return o;
}

Output cmd_cltsum(const RunConfig& c) {
  CltConfig cfg;
  cfg.layers = c.layers;
  cfg.trials = c.trials;
  cfg.seed = c.seed;
  cfg.blocks_per_layer = c.blocks_per_layer;
  if (has_input(c)) cfg.empirical_deltas = gamma_stats(load_input(c), c.quant, 1).delta_samples;
  const CltResult r = cumulative_scale_bias(cfg);
  Output o;
  o.result = to_json(r);
  o.result["sampler"] = cfg.empirical_deltas.empty() ? "uniform" : "empirical";
  o.table.columns = {"layers", "trials", "std_centered", "theory_std", "mean_sum"};
  o.table.rows.push_back({o.result["layers"], o.result["trials"], o.result["std_centered"],
                          o.result["theory_std"], o.result["mean_sum"]});
  o.csv_summary = {{"band_natural", o.result["band_natural"]},
                   {"band_log2", o.result["band_log2"]},
                   {"band_uncentered_log2", o.result["band_uncentered_log2"]},
                   {"sampler", o.result["sampler"]}};
  return o;
}

Output cmd_temp(const RunConfig& c) {
  std::vector<double> logits;
  if (has_input(c)) {
    const TensorSet set = load_input(c);
    logits = set.entries.begin()->second.tensor.data;
  } else {
    if (c.vocab < 2) throw std::invalid_argument("--vocab must be at least 2");
    Rng rng(c.seed, hash_name("logits"));
    logits.resize(c.vocab);
    for (double& v : logits) v = rng.normal();
  }
  const double var = logit_difference_variance(logits, c.seed);
  Output o;
  o.result = {{"vocab", logits.size()}, {"var_delta_logit", var}, {"draws", c.draws}, {"rows", Json::array()}};
  o.table.columns = {"ratio", "sigma_eta2", "t_eff_predicted", "t_hat", "relative_error", "kl_at_fit",
                     "entropy_clean", "entropy_noisy"};
  for (double ratio : c.ratios) {
    if (!(ratio >= 0.0) || !std::isfinite(ratio)) throw std::invalid_argument("ratios must be non-negative");
    const double sigma_eta = std::sqrt(ratio * var / 2.0);
    const TempFit fit = effective_temperature_fit(logits, sigma_eta, c.draws, c.seed);
    Json row = to_json(fit);
    row["ratio"] = ratio;
    row["relative_error"] = std::fabs(fit.t_hat - fit.predicted.t_eff) / fit.predicted.t_eff;
    o.table.rows.push_back({row["ratio"], row["sigma_eta2"], row["t_eff_predicted"], row["t_hat"],
                            row["relative_error"], row["kl_at_fit"], row["entropy_clean"], row["entropy_noisy"]});
    o.result["rows"].push_back(std::move(row));
  }
  o.csv_summary = {{"vocab", o.result["vocab"]}, {"var_delta_logit", var}, {"draws", c.draws}};
  return o;
}

Output cmd_gemm(const RunConfig& c) {
  const TensorSet set = load_input(c);
  InputCovariance cov;
  if (c.covariance == "isotropic") {
    cov.mode = CovarianceMode::isotropic;
    cov.variance = c.variance;
  } else {
    if (c.activations.empty()) throw std::invalid_argument("--activations is required for this covariance mode");
    const TensorSet acts = load_container(c.activations);
    if (acts.empty()) throw std::invalid_argument("activation container is empty");
    const Tensor& a = acts.entries.begin()->second.tensor;
    if (a.shape.size() != 2 || a.shape[0] == 0) throw std::invalid_argument("activations must be [count, in]");
    if (c.covariance == "diagonal") {
      cov.mode = CovarianceMode::diagonal;
      cov.diagonal.assign(a.shape[1], 0.0);
      for (std::size_t r = 0; r < a.shape[0]; ++r) {
        for (std::size_t j = 0; j < a.shape[1]; ++j) cov.diagonal[j] += a.data[r * a.shape[1] + j] * a.data[r * a.shape[1] + j];
      }
      for (double& d : cov.diagonal) d /= static_cast<double>(a.shape[0]);
    } else {
      cov.mode = CovarianceMode::samples;
      cov.samples = a;
    }
  }
  GemmOptions opts;
  opts.mc_samples = c.mc_samples;
  opts.seed = c.seed;
  if (c.with_mbs) opts.mbs = c.mbs;
  Output o;
  o.result = {{"covariance", c.covariance}, {"tensors", Json::array()}};
  o.table.columns = {"name", "var_scale", "var_dz", "var_grid", "cross_scale_grid", "cross_scale_dz",
                     "cross_dz_grid", "analytic_total", "approx_total", "dropped_cross_fraction", "monte_carlo",
                     "monte_carlo_rel_error"};
  for (const auto& [name, entry] : set.entries) {
    Json j = to_json(gemm_error_propagation(entry.tensor, c.quant, cov, opts));
    j["name"] = name;
    std::vector<Json> row{name};
    for (std::size_t k = 1; k < o.table.columns.size(); ++k) row.push_back(j[o.table.columns[k]]);
    o.table.rows.push_back(std::move(row));
    o.result["tensors"].push_back(std::move(j));
  }
  o.csv_summary = {{"covariance", c.covariance}};
  return o;
}

Output cmd_aqn(const RunConfig& c) {
  c.aqn.validate();
  const std::vector<double> stages = c.aqn.stages();
  if (c.stage && (*c.stage < 0 || static_cast<std::size_t>(*c.stage) >= stages.size())) {
    throw std::invalid_argument("--stage out of range");
  }
  if (!c.noised_out.empty() && !c.stage) throw std::invalid_argument("--noised-out requires --stage");
  Output o;
  o.result = {{"schedule", to_json(c.aqn)}};
  o.table.columns = {"stage", "sigma"};
  for (std::size_t k = 0; k < stages.size(); ++k) o.table.rows.push_back({k, stages[k]});
  o.csv_summary = {{"schedule", o.result["schedule"]}};
  if (!has_input(c)) {
    if (!c.noised_out.empty()) throw std::invalid_argument("--noised-out requires --input or --synth");
    return o;
  }
  const TensorSet set = load_input(c);
  Json tensors = Json::array();
  TensorSet noised;
  for (const auto& [name, entry] : set.entries) {
    const double mult = c.aqn.multiplier_for(name);
    const double r = rms(entry.tensor.data);
    Json j = {{"name", name}, {"multiplier", mult}, {"rms", r}};
    if (c.stage) {
      const double sigma = stages[static_cast<std::size_t>(*c.stage)];
      j["noise_std"] = sigma * mult * r;
      if (!c.noised_out.empty()) noised.add(name, aqn_apply(entry.tensor, sigma, c.seed, mult, name));
    }
    tensors.push_back(std::move(j));
  }
  o.result["tensors"] = tensors;
  if (c.stage) o.result["stage"] = *c.stage;
  if (!c.noised_out.empty()) save_container(noised, c.noised_out);
  o.csv_summary["tensors"] = tensors;
  return o;
}

}  // namespace

Json to_json(const RunConfig& c) {
  Json mult = Json::array();
  for (const auto& [pattern, m] : c.aqn.multipliers) mult.push_back({{"pattern", pattern}, {"multiplier", m}});
  Json j = {{"subcommand", c.subcommand},
            {"input", c.input},
            {"synth", c.synth},
            {"seed", c.seed},
            {"block_size", c.quant.block_size},
            {"scale_mantissa_bits", c.quant.scale_mantissa_bits},
            {"macro_block", c.mbs.macro_block_size},
            {"selection", selection_name(c.mbs.selection)},
            {"with_mbs", c.with_mbs},
            {"of_alpha", c.of.alpha},
            {"sigma_start", c.aqn.sigma_start},
            {"sigma_end", c.aqn.sigma_end},
            {"stages", c.aqn.num_stages},
            {"multipliers", mult},
            {"format", c.format == OutputFormat::json ? "json" : "csv"},
            {"out", c.out},
            {"sweep_bits", c.sweep_bits},
            {"min_blocks", c.min_blocks},
            {"layers", c.layers},
            {"trials", c.trials},
            {"blocks_per_layer", c.blocks_per_layer},
            {"vocab", c.vocab},
            {"ratios", c.ratios},
            {"draws", c.draws},
            {"covariance", c.covariance},
            {"variance", c.variance},
            {"activations", c.activations},
            {"mc_samples", c.mc_samples},
            {"noised_out", c.noised_out}};
  j["stage"] = c.stage ? Json(*c.stage) : Json(nullptr);
  return j;
}

std::string execute(const RunConfig& c) {
  const auto start = std::chrono::steady_clock::now();
  c.quant.validate();
  if (c.threads > 0) set_worker_count(c.threads);

  static const std::map<std::string, Output (*)(const RunConfig&)> commands{
      {"decompose", cmd_decompose}, {"sweep", cmd_sweep},   {"mbs", cmd_mbs},   {"of", cmd_of},
      {"gamma", cmd_gamma},         {"cltsum", cmd_cltsum}, {"temp", cmd_temp}, {"gemm", cmd_gemm},
      {"aqn", cmd_aqn}};
  const auto it = commands.find(c.subcommand);
  if (it == commands.end()) throw std::invalid_argument("unknown subcommand '" + c.subcommand + "'");
  Output o = it->second(c);

  Json meta = {{"artifact", kArtifactName},
               {"version", kArtifactVersion},
               {"schema_version", kReportSchemaVersion},
               {"command", c.subcommand},
               {"seed", c.seed},
               {"config", to_json(c)}};
  if (c.timing) {
    meta["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  if (c.format == OutputFormat::csv) {
    if (!o.csv_summary.empty()) meta["summary"] = o.csv_summary;
    return render_csv(meta, o.table);
  }
  meta["result"] = std::move(o.result);
  return render_json(std::move(meta));
}

namespace {

void add_input_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--input", c.input, "Tensor container file");
  sub->add_option("--synth", c.synth, "Synthetic spec, e.g. gaussian:256x256@64 or a JSON object");
}

void add_quant_options(CLI::App* sub, RunConfig& c) {
  sub->add_option("--block-size", c.quant.block_size, "Block size B")->capture_default_str();
  sub->add_option("--scale-mantissa-bits", c.quant.scale_mantissa_bits, "Scale mantissa bits M (0..8)")
      ->capture_default_str();
}

void add_mbs_options(CLI::App* sub, RunConfig& c) {
  static const std::map<std::string, MbsSelection> selections{{"exhaustive", MbsSelection::exhaustive},
                                                              {"closed_form", MbsSelection::closed_form}};
  sub->add_option("--macro-block", c.mbs.macro_block_size, "MBS macro block size")->capture_default_str();
  sub->add_option("--selection", c.mbs.selection, "MBS mantissa selection")
      ->transform(CLI::CheckedTransformer(selections));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig c;
  CLI::App app{"MXFP4 quantization-error decomposition toolkit", "mxdecomp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kArtifactVersion));

  std::string format = "json";
  std::vector<std::string> multipliers;
  int stage = -1;

  struct Spec {
    const char* name;
    const char* help;
  };
  const Spec specs[] = {
      {"decompose", "Three-way error decomposition per tensor"},
      {"sweep", "Scale-precision sweep over mantissa widths"},
      {"mbs", "Macro-block scaling before/after report"},
      {"of", "Outlier-fallback before/after report"},
      {"gamma", "Scale-ratio statistics over blocks"},
      {"cltsum", "Cumulative scale bias across layers"},
      {"temp", "Predicted vs fitted effective temperature"},
      {"gemm", "GEMM error propagation"},
      {"aqn", "AQN schedule listing and noised tensors"},
  };
  for (const auto& s : specs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    sub->add_option("--format", format, "Report format")->check(CLI::IsMember({"json", "csv"}));
    sub->add_option("--out", c.out, "Report path (standard output when omitted)");
    sub->add_flag("--no-timing{false}", c.timing, "Omit the wall-clock duration for byte-stable reports");
    sub->add_option("--threads", c.threads, "Worker threads (0 = hardware concurrency)");
    add_input_options(sub, c);
    add_quant_options(sub, c);
    const std::string name = s.name;
    if (name == "sweep") {
      sub->add_option("--bits", c.sweep_bits, "Mantissa widths")->delimiter(',');
    } else if (name == "mbs") {
      add_mbs_options(sub, c);
    } else if (name == "of" || name == "gemm") {
      if (name == "of") sub->add_option("--of-alpha", c.of.alpha, "Second-pass weight")->capture_default_str();
      sub->add_flag("--with-mbs", c.with_mbs, "Wrap Q with macro-block scaling");
      add_mbs_options(sub, c);
      if (name == "gemm") {
        sub->add_option("--covariance", c.covariance, "Input covariance")
            ->check(CLI::IsMember({"isotropic", "diagonal", "samples"}));
        sub->add_option("--variance", c.variance, "Isotropic input variance")->capture_default_str();
        sub->add_option("--activations", c.activations, "Container with one [count, in] activation tensor");
        sub->add_option("--mc-samples", c.mc_samples, "Monte-Carlo samples")->capture_default_str();
      }
    } else if (name == "gamma") {
      sub->add_option("--min-blocks", c.min_blocks, "Minimum non-zero blocks")->capture_default_str();
    } else if (name == "cltsum") {
      sub->add_option("--layers", c.layers, "Layer count L")->capture_default_str();
      sub->add_option("--trials", c.trials, "Monte-Carlo trials")->capture_default_str();
      sub->add_option("--blocks-per-layer", c.blocks_per_layer, "Blocks averaged per layer")->capture_default_str();
    } else if (name == "temp") {
      sub->add_option("--vocab", c.vocab, "Vocabulary size of the synthetic logits")->capture_default_str();
      sub->add_option("--ratios", c.ratios, "Values of 2 sigma_eta^2 / Var(logit difference)")->delimiter(',');
      sub->add_option("--draws", c.draws, "Monte-Carlo draws")->capture_default_str();
    } else if (name == "aqn") {
      sub->add_option("--sigma-start", c.aqn.sigma_start, "First-stage sigma")->capture_default_str();
      sub->add_option("--sigma-end", c.aqn.sigma_end, "Last-stage sigma")->capture_default_str();
      sub->add_option("--stages", c.aqn.num_stages, "Number of stages")->capture_default_str();
      sub->add_option("--multiplier", multipliers, "pattern=value noise multiplier (repeatable)");
      sub->add_option("--stage", stage, "Stage whose sigma is applied");
      sub->add_option("--noised-out", c.noised_out, "Write noised tensors to this container");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInput;
  }

  c.subcommand = app.get_subcommands().front()->get_name();
  c.format = format == "csv" ? OutputFormat::csv : OutputFormat::json;
  if (stage >= 0) c.stage = stage;

  try {
    if (!multipliers.empty()) {
      c.aqn.multipliers.clear();
      for (const auto& m : multipliers) {
        const auto eq = m.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--multiplier expects pattern=value");
        std::size_t used = 0;
        const std::string value = m.substr(eq + 1);
        const double v = std::stod(value, &used);
        if (used != value.size() || !(v >= 0.0)) throw std::invalid_argument("bad multiplier value '" + value + "'");
        c.aqn.multipliers.emplace_back(m.substr(0, eq), v);
      }
    }
    const std::string report = execute(c);
    if (c.out.empty()) {
      out << report;
    } else {
      write_file_atomic(c.out, report);
    }
    return kExitOk;
  } catch (const InvariantViolation& e) {
    err << "mxdecomp: invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::invalid_argument& e) {
    err << "mxdecomp: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::domain_error& e) {
    err << "mxdecomp: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::out_of_range& e) {
    err << "mxdecomp: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::runtime_error& e) {
    err << "mxdecomp: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "mxdecomp: internal error: " << e.what() << "\n";
    return kExitInvariant;
  }
}

}  // namespace mxdecomp
