#pragma once

// Analysis pipeline shared by the command-line tool and the verification suites, and the
// BoundReport serializations (JSON is canonical, CSV is a flat projection).

#include <algorithm>
#include <chrono>
#include <ctime>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mazur/bounds.hpp"
#include "mazur/config.hpp"
#include "mazur/correlation.hpp"
#include "mazur/gibbs.hpp"

namespace mazur {

inline constexpr int report_schema_version = 1;

struct AnalysisParams {
  CorrelationOptions dynamics;
  std::vector<int> degrees = {0, 1, 2, 3};
  int saturation_degree = 3;
  int d_probe = 5;
  double jitter = 1e-12;
  BootstrapOptions bootstrap;
  bool estimate_C = true;

  static AnalysisParams from(const RunConfig& cfg) {
    AnalysisParams p;
    p.dynamics = cfg.dynamics;
    p.degrees = cfg.bounds.degrees;
    p.saturation_degree = cfg.saturation_degree();
    p.d_probe = cfg.d_probe();
    p.jitter = cfg.bounds.jitter;
    p.bootstrap = {cfg.bounds.bootstrap, cfg.bounds.bootstrap_seed, cfg.bounds.jitter};
    return p;
  }

  int max_degree() const {
    return std::max(d_probe, *std::max_element(degrees.begin(), degrees.end()));
  }
};

struct ObservableAnalysis {
  std::string observable;
  std::optional<CEstimate> c_norm, c_direct;
  OverlapData overlaps;
  BoundSequence bounds;  ///< std_error filled from the bootstrap
  BoundResult mazur_strict;
  SaturationReport saturation;
  std::vector<std::string> warnings;
};

struct Analysis {
  std::size_t label_changes = 0;
  double max_drift = 0.0;
  std::vector<ObservableAnalysis> observables;
};

namespace detail {

inline void append_unique(std::vector<std::string>& out, const std::vector<std::string>& in) {
  for (const auto& w : in)
    if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
}

}  // namespace detail

/// Estimates C(A) for every observable from one set of trajectories, then bounds, bootstrap
/// errors and the saturation diagnostic on the full ensemble.
inline Analysis analyze(const SystemSpec& sys, const GibbsEnsemble& ens, const std::vector<std::string>& texts,
                        const AnalysisParams& params, const Labeler* labeler = nullptr) {
  std::vector<Expression> obs;
  for (const auto& t : texts) obs.push_back(sys.parse_observable(t));

  Analysis out;
  std::optional<TrajectoryAverages> run;
  if (params.estimate_C) {
    run = run_trajectories(sys, obs, ens, params.dynamics, labeler);
    out.label_changes = run->label_changes;
    out.max_drift = run->max_drift;
  }

  for (std::size_t o = 0; o < obs.size(); ++o) {
    ObservableAnalysis a;
    a.observable = texts[o];
    detail::append_unique(a.warnings, ens.warnings);
    if (run) {
      auto [norm, direct] = estimates_from(*run, o, obs[o]);
      detail::append_unique(a.warnings, norm.warnings);
      detail::append_unique(a.warnings, direct.warnings);
      a.c_norm = norm;
      a.c_direct = direct;
    }
    a.overlaps = build_overlap_data(ens, sys, obs[o], params.max_degree(), labeler);
    detail::append_unique(a.warnings, a.overlaps.warnings);

    a.bounds = bound_sequence(a.overlaps, params.degrees, params.jitter);
    const auto boot = bootstrap_bounds(a.overlaps, params.degrees, params.bootstrap);
    for (std::size_t i = 0; i < params.degrees.size(); ++i) {
      a.bounds.plain[i].std_error = boot.plain[i];
      if (!a.bounds.partitioned.empty()) a.bounds.partitioned[i].std_error = boot.partitioned[i];
    }
    if (boot.failed > 0)
      a.warnings.push_back(std::to_string(boot.failed) + " bootstrap resamples failed to factorize");
    a.mazur_strict = mazur_strict_bound(a.overlaps, params.jitter);
    a.mazur_strict.std_error = boot.mazur_strict;

    for (const auto& b : a.bounds.plain)
      if (b.escalations > 0)
        a.warnings.push_back("Gram jitter escalated to " + std::to_string(b.jitter) + " at degree " +
                             std::to_string(b.d));
    for (std::size_t i = 0; i < a.bounds.partitioned.size(); ++i) {
      const auto& p = a.bounds.partitioned[i];
      const auto& u = a.bounds.plain[i];
      if (p.value < u.value - 3.0 * std::hypot(p.std_error, u.std_error))
        a.warnings.push_back("partitioned bound below the unpartitioned bound at degree " + std::to_string(p.d));
    }

    std::optional<stats::MeanError> c_hat;
    if (a.c_norm) c_hat = stats::MeanError{a.c_norm->value, a.c_norm->std_error};
    a.saturation = saturation_diagnostic(a.overlaps, params.saturation_degree, params.d_probe, c_hat, params.bootstrap);
    out.observables.push_back(std::move(a));
  }
  return out;
}

/// Everything the `bound` command reports for one observable.
struct BoundReport {
  std::string system;
  int r = 1;
  std::string hamiltonian;
  std::vector<std::string> conserved;
  std::string observable;
  double beta = 1.0;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  double acceptance_rate = 0.0;
  double proposal_scale = 0.0;
  std::vector<double> ess;
  double T = 0.0, dt = 0.0;
  std::size_t trajectories = 0;
  std::size_t label_changes = 0;
  std::vector<std::string> cell_names;
  std::vector<std::size_t> cell_counts;
  ObservableAnalysis analysis;
  std::vector<std::string> warnings;
};

inline BoundReport make_report(const SystemSpec& sys, const GibbsEnsemble& ens, const Analysis& an, std::size_t o,
                               const AnalysisParams& params) {
  BoundReport rep;
  rep.system = sys.name;
  rep.r = sys.r;
  rep.hamiltonian = sys.hamiltonian.to_string();
  for (const auto& c : sys.conserved) rep.conserved.push_back(c.to_string());
  rep.observable = an.observables[o].observable;
  rep.beta = ens.beta;
  rep.seed = ens.seed;
  rep.n_samples = ens.size();
  rep.acceptance_rate = ens.acceptance_rate;
  rep.proposal_scale = ens.proposal_scale;
  rep.ess = ens.ess;
  rep.T = static_cast<double>(step_count(params.dynamics.T, params.dynamics.dt)) * params.dynamics.dt;
  rep.dt = params.dynamics.dt;
  rep.trajectories = an.observables[o].c_norm ? an.observables[o].c_norm->n_ensemble : 0;
  rep.label_changes = an.label_changes;
  rep.cell_names = an.observables[o].overlaps.cell_names;
  rep.cell_counts = an.observables[o].overlaps.cell_counts;
  rep.analysis = an.observables[o];
  rep.warnings = an.observables[o].warnings;
  return rep;
}

namespace detail {

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::ordered_json bound_json(const BoundResult& b, const std::vector<std::string>& cells = {}) {
  nlohmann::ordered_json j;
  j["d"] = b.d;
  j["value"] = b.value;
  j["std_error"] = b.std_error;
  j["condition_number"] = b.condition_number;
  j["scaled_condition_number"] = b.scaled_condition_number;
  j["jitter"] = b.jitter;
  j["jitter_escalations"] = b.escalations;
  if (!b.per_cell.empty()) {
    nlohmann::ordered_json pc;
    for (std::size_t i = 0; i < b.per_cell.size(); ++i) pc[i < cells.size() ? cells[i] : std::to_string(i)] = b.per_cell[i];
    j["per_cell"] = pc;
  }
  return j;
}

inline nlohmann::ordered_json estimate_json(const CEstimate& e) {
  nlohmann::ordered_json j;
  j["value"] = e.value;
  j["std_error"] = e.std_error;
  j["value_half_T"] = e.value_half;
  j["std_error_half_T"] = e.std_error_half;
  return j;
}

}  // namespace detail

/// JSON form. With timestamp = false the output is a pure function of config and seed.
inline nlohmann::ordered_json to_json(const BoundReport& rep, bool timestamp = true) {
  const auto& a = rep.analysis;
  nlohmann::ordered_json j;
  j["schema_version"] = report_schema_version;
  if (timestamp) j["generated_at"] = detail::utc_timestamp();
  j["system"] = {{"name", rep.system}, {"r", rep.r}, {"hamiltonian", rep.hamiltonian}, {"conserved", rep.conserved}};
  j["observable"] = rep.observable;
  j["beta"] = rep.beta;
  j["ensemble"] = {{"n", rep.n_samples},
                   {"seed", rep.seed},
                   {"acceptance_rate", rep.acceptance_rate},
                   {"proposal_scale", rep.proposal_scale},
                   {"effective_sample_size", rep.ess}};
  j["dynamics"] = {{"T", rep.T}, {"dt", rep.dt}, {"trajectories", rep.trajectories}};

  nlohmann::ordered_json c = nlohmann::ordered_json::object();
  if (a.c_norm) c[to_string(CMethod::NormOfOrbitalAverage)] = detail::estimate_json(*a.c_norm);
  if (a.c_direct) c[to_string(CMethod::DirectTimeIntegral)] = detail::estimate_json(*a.c_direct);
  j["C"] = c;

  nlohmann::ordered_json bounds = nlohmann::ordered_json::array();
  for (const auto& b : a.bounds.plain) bounds.push_back(detail::bound_json(b));
  j["bounds"] = bounds;
  j["mazur_strict"] = detail::bound_json(a.mazur_strict);

  if (!a.bounds.partitioned.empty()) {
    nlohmann::ordered_json part;
    nlohmann::ordered_json cells = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < rep.cell_names.size(); ++i)
      cells.push_back({{"name", rep.cell_names[i]}, {"samples", rep.cell_counts[i]}});
    part["cells"] = cells;
    part["trajectories_changing_cell"] = rep.label_changes;
    nlohmann::ordered_json values = nlohmann::ordered_json::array();
    for (const auto& b : a.bounds.partitioned) values.push_back(detail::bound_json(b, rep.cell_names));
    part["bounds"] = values;
    j["partitioned"] = part;
  }

  const auto& s = a.saturation;
  nlohmann::ordered_json sat;
  sat["d"] = s.d;
  sat["d_probe"] = s.d_probe;
  sat["bound_d"] = s.bound_d;
  sat["bound_d_probe"] = s.bound_probe;
  sat["residual"] = s.residual;
  sat["consistent_with_saturation"] = s.consistent_with_saturation;
  sat["verdict"] = s.verdict;
  sat["note"] = s.note;
  if (s.c_hat) sat["C"] = {{"value", *s.c_hat}, {"std_error", *s.c_hat_stderr}};
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& e : s.entries)
    entries.push_back({{"n", e.index.n},
                       {"overlap", e.overlap},
                       {"overlap_std_error", e.overlap_stderr},
                       {"orthonormal_component", e.orthogonal},
                       {"orthonormal_component_std_error", e.orthogonal_stderr}});
  sat["entries"] = entries;
  j["saturation"] = sat;
  j["warnings"] = rep.warnings;
  return j;
}

/// Flat CSV: one row per estimate or bound.
inline void write_csv(std::ostream& os, const BoundReport& rep) {
  const auto& a = rep.analysis;
  os << "kind,d,cell,value,std_error,condition_number,jitter\n";
  auto row = [&](const std::string& kind, const std::string& d, const std::string& cell, double v, double se,
                 double cond, double jit) {
    os << kind << "," << d << "," << cell << "," << format_double(v) << "," << format_double(se) << ","
       << format_double(cond) << "," << format_double(jit) << "\n";
  };
  if (a.c_norm) row("C_norm_of_orbital_average", "", "", a.c_norm->value, a.c_norm->std_error, 0, 0);
  if (a.c_direct) row("C_direct_time_integral", "", "", a.c_direct->value, a.c_direct->std_error, 0, 0);
  for (const auto& b : a.bounds.plain)
    row("bound", std::to_string(b.d), "", b.value, b.std_error, b.condition_number, b.jitter);
  const auto& m = a.mazur_strict;
  row("mazur_strict", "1", "", m.value, m.std_error, m.condition_number, m.jitter);
  for (const auto& b : a.bounds.partitioned) {
    row("partitioned", std::to_string(b.d), "", b.value, b.std_error, b.condition_number, b.jitter);
    for (std::size_t i = 0; i < b.per_cell.size(); ++i)
      row("partitioned_cell", std::to_string(b.d), rep.cell_names[i], b.per_cell[i], 0.0, b.condition_number, b.jitter);
  }
}

/// Gram matrix with its standard errors, one row per entry.
inline void write_gram_csv(std::ostream& os, const OverlapData& od) {
  os << "a,b,n_a,n_b,value,std_error\n";
  for (Eigen::Index a = 0; a < od.gram.rows(); ++a)
    for (Eigen::Index b = 0; b < od.gram.cols(); ++b)
      os << a << "," << b << ",\"" << od.basis.indices[static_cast<std::size_t>(a)].to_string() << "\",\""
         << od.basis.indices[static_cast<std::size_t>(b)].to_string() << "\"," << format_double(od.gram(a, b)) << ","
         << format_double(od.gram_stderr.size() ? od.gram_stderr(a, b) : 0.0) << "\n";
}

/// Overlaps (and per-cell overlaps) with standard errors.
inline void write_overlaps_csv(std::ostream& os, const OverlapData& od) {
  os << "index,n,value,std_error";
  for (const auto& c : od.cell_names) os << "," << c << "," << c << "_std_error";
  os << "\n";
  for (Eigen::Index i = 0; i < od.overlaps.size(); ++i) {
    os << i << ",\"" << od.basis.indices[static_cast<std::size_t>(i)].to_string() << "\","
       << format_double(od.overlaps(i)) << ","
       << format_double(od.overlaps_stderr.size() ? od.overlaps_stderr(i) : 0.0);
    for (std::size_t c = 0; c < od.per_cell.size(); ++c)
      os << "," << format_double(od.per_cell[c](i)) << ","
         << format_double(od.per_cell_stderr.size() > c ? od.per_cell_stderr[c](i) : 0.0);
    os << "\n";
  }
}

}  // namespace mazur
