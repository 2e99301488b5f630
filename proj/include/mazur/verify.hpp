#pragma once

// Verification suites: oscillator, product and pendulum. Each produces a list of checks
// tagged with the acceptance criterion they belong to, with measured values and tolerances.

#include <chrono>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "mazur/bounds.hpp"
#include "mazur/correlation.hpp"
#include "mazur/dynamics.hpp"
#include "mazur/gibbs.hpp"
#include "mazur/regular.hpp"
#include "mazur/report.hpp"
#include "mazur/stats.hpp"

namespace mazur {

struct Check {
  int criterion = 0;
  std::string suite;
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double reference = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct SuiteSettings {
  double beta = 1.0;
  SamplerOptions sampler;
  CorrelationOptions dynamics;
  std::vector<std::string> observables;
  std::vector<std::pair<std::string, std::string>> labeler;
  std::vector<int> degrees = {0, 1, 2, 3, 4, 5, 6};
  int saturation_degree = 2;
  int d_probe = 4;
  std::size_t bootstrap = 200;
};

/// Default settings per suite. Trajectories start from an evenly strided subset of the ensemble.
inline SuiteSettings suite_settings(const std::string& suite, std::uint64_t seed = 20261018) {
  SuiteSettings s;
  s.sampler.n = 100'000;
  s.sampler.seed = seed;
  s.dynamics.dt = 1e-2;
  if (suite == "oscillator") {
    s.observables = {"q1^2", "q1", "H^2"};
    s.dynamics.T = 32.0 * std::numbers::pi;  // whole periods
    s.dynamics.max_samples = 40'000;
  } else if (suite == "product") {
    s.observables = {"q1^2", "q1^2*q2^2", "H^2"};
    s.dynamics.T = 200.0;
    s.dynamics.max_samples = 20'000;
  } else if (suite == "pendulum") {
    s.observables = {"p1"};
    s.labeler = {{"rotators_plus", "p1 > 0 && H > 1"}, {"rotators_minus", "p1 < 0 && H > 1"}, {"librators", "H <= 1"}};
    s.dynamics.T = 200.0;
    s.dynamics.max_samples = 20'000;
  } else {
    throw ValidationError("unknown suite '" + suite + "' (valid: oscillator, product, pendulum, all)");
  }
  return s;
}

inline std::vector<std::string> suite_names() { return {"oscillator", "product", "pendulum"}; }

struct SuiteResult {
  std::string suite;
  SuiteSettings settings;
  GibbsEnsemble ensemble;
  Analysis analysis;
  std::vector<std::optional<double>> norm_AH;  ///< per observable, regular systems only
  std::vector<Check> checks;
  std::vector<std::string> warnings;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
};

namespace detail {

inline Check make_check(int criterion, const std::string& suite, std::string name, bool passed, double measured,
                        double reference, double tolerance, std::string detail = {}) {
  return {criterion, suite, std::move(name), passed, measured, reference, tolerance, std::move(detail)};
}

/// Error of leapfrog on the unit oscillator from (1, 0) at t = 10 against cos/sin.
inline double oscillator_error(double dt) {
  const auto sys = systems::harmonic_oscillator();
  Leapfrog lf(sys, dt);
  std::vector<double> x = {1.0, 0.0};
  const std::size_t n = step_count(10.0, dt);
  for (std::size_t i = 0; i < n; ++i) lf.step(x, i + 1);
  const double t = static_cast<double>(n) * dt;
  return std::hypot(x[0] - std::cos(t), x[1] + std::sin(t));
}

}  // namespace detail

/// Leapfrog error ratio e(dt)/e(dt/2) on the oscillator; about 4 for a second-order method.
inline double convergence_ratio(double dt = 0.1) {
  return detail::oscillator_error(dt) / detail::oscillator_error(dt / 2.0);
}

inline SuiteResult run_suite(const std::string& suite, const SuiteSettings& s) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult res;
  res.suite = suite;
  res.settings = s;
  const SystemSpec sys = systems::by_name(suite);
  res.ensemble = sample_gibbs(sys, s.beta, s.sampler);
  detail::append_unique(res.warnings, res.ensemble.warnings);

  std::optional<Labeler> labeler;
  if (!s.labeler.empty()) {
    labeler.emplace();
    for (const auto& [name, text] : s.labeler) {
      labeler->names.push_back(name);
      labeler->cells.push_back(parse_predicate(text, sys.r, sys.macros()));
    }
  }

  AnalysisParams params;
  params.dynamics = s.dynamics;
  params.degrees = s.degrees;
  params.saturation_degree = s.saturation_degree;
  params.d_probe = s.d_probe;
  params.bootstrap.resamples = s.bootstrap;
  params.bootstrap.seed = s.sampler.seed + 1;
  res.analysis = analyze(sys, res.ensemble, s.observables, params, labeler ? &*labeler : nullptr);

  auto add = [&](Check c) { res.checks.push_back(std::move(c)); };
  const double beta = s.beta;

  for (const auto& a : res.analysis.observables) {
    detail::append_unique(res.warnings, a.warnings);
    const std::string& A = a.observable;
    const auto& cn = *a.c_norm;
    const auto& cd = *a.c_direct;

    // Main inequality.
    for (const auto& b : a.bounds.plain) {
      const double sigma = std::hypot(cn.total_error(), b.std_error);
      add(detail::make_check(3, suite, A + ": C + 3 sigma >= bound_" + std::to_string(b.d),
                             cn.value + 3.0 * sigma >= b.value, b.value, cn.value, 3.0 * sigma));
    }
    for (const auto& b : a.bounds.partitioned) {
      const double sigma = std::hypot(cn.total_error(), b.std_error);
      add(detail::make_check(3, suite, A + ": C + 3 sigma >= partitioned bound_" + std::to_string(b.d),
                             cn.value + 3.0 * sigma >= b.value, b.value, cn.value, 3.0 * sigma));
    }

    // Monotonicity in d.
    auto monotone = [&](const std::vector<BoundResult>& seq, const std::string& label) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        if (seq[i].d > 5) continue;
        const double tol = 1e-12 * std::fabs(seq[i].value);
        add(detail::make_check(4, suite,
                               A + ": " + label + "_" + std::to_string(seq[i + 1].d) + " >= " + label + "_" +
                                   std::to_string(seq[i].d),
                               seq[i + 1].value >= seq[i].value - tol, seq[i + 1].value, seq[i].value, tol));
      }
    };
    monotone(a.bounds.plain, "bound");
    if (!a.bounds.partitioned.empty()) monotone(a.bounds.partitioned, "partitioned");

    // Estimator cross-validation.
    const double sig7 = 3.0 * std::hypot(cn.total_error(), cd.total_error());
    add(detail::make_check(7, suite, A + ": norm vs direct estimator", std::fabs(cn.value - cd.value) <= sig7,
                           cn.value, cd.value, sig7));
  }

  auto find = [&](const std::string& text) -> const ObservableAnalysis* {
    for (const auto& a : res.analysis.observables)
      if (a.observable == text) return &a;
    return nullptr;
  };
  auto bound_at = [](const ObservableAnalysis& a, int d) -> const BoundResult& {
    for (const auto& b : a.bounds.plain)
      if (b.d == d) return b;
    throw ValidationError("degree " + std::to_string(d) + " not computed");
  };

  // Level-set identity on regular systems.
  res.norm_AH.assign(s.observables.size(), std::nullopt);
  if (!sys.regular_factors.empty()) {
    for (std::size_t o = 0; o < s.observables.size(); ++o) {
      const auto& a = res.analysis.observables[o];
      const double nrm = norm_AH_squared(sys, sys.parse_observable(a.observable), beta);
      res.norm_AH[o] = nrm;
      if (a.observable == "q1") continue;
      const double sigma = 3.0 * a.c_norm->total_error();
      add(detail::make_check(5, suite, a.observable + ": ||A^H||_D^2 vs C", std::fabs(nrm - a.c_norm->value) <= sigma,
                             a.c_norm->value, nrm, sigma));
    }
  }

  if (suite == "oscillator") {
    if (const auto* a = find("q1^2")) {
      const double ref = 2.0 / (beta * beta);
      add(detail::make_check(1, suite, "q1^2: C (norm) within 5% of 2/beta^2",
                             std::fabs(a->c_norm->value - ref) <= 0.05 * ref, a->c_norm->value, ref, 0.05 * ref));
      add(detail::make_check(1, suite, "q1^2: C (direct) within 5% of 2/beta^2",
                             std::fabs(a->c_direct->value - ref) <= 0.05 * ref, a->c_direct->value, ref, 0.05 * ref));
      const double b1 = bound_at(*a, 1).value;
      add(detail::make_check(1, suite, "q1^2: bound_1 within 5% of 2/beta^2", std::fabs(b1 - ref) <= 0.05 * ref, b1,
                             ref, 0.05 * ref));
      for (int d : {2, 3}) {
        const double bd = bound_at(*a, d).value;
        add(detail::make_check(1, suite, "q1^2: bound_" + std::to_string(d) + " within 2% of bound_1",
                               std::fabs(bd - b1) <= 0.02 * b1, bd, b1, 0.02 * b1));
      }

      // Orthogonalized basis reproduces the raw bound where the Gram is well conditioned.
      for (int d = 0; d <= 6; ++d) {
        const auto raw = polynomial_bound(a->overlaps, d);
        if (!(raw.condition_number < 1e6)) continue;
        const auto orth = orthogonalize(a->overlaps, d);
        const double ob = polynomial_bound(orth.data, d).value;
        const double rel = std::fabs(ob - raw.value) / std::max(std::fabs(raw.value), 1e-300);
        add(detail::make_check(8, suite, "q1^2: orthogonalized vs raw bound_" + std::to_string(d), rel <= 1e-8, ob,
                               raw.value, 1e-8, "relative difference " + std::to_string(rel)));
      }
    }
    if (const auto* a = find("q1")) {
      add(detail::make_check(2, suite, "q1: |C| (norm) < 1e-3", std::fabs(a->c_norm->value) < 1e-3, a->c_norm->value,
                             0.0, 1e-3));
      add(detail::make_check(2, suite, "q1: |C| (direct) < 1e-3", std::fabs(a->c_direct->value) < 1e-3,
                             a->c_direct->value, 0.0, 1e-3));
      for (int d = 0; d <= 3; ++d) {
        const double bd = bound_at(*a, d).value;
        add(detail::make_check(2, suite, "q1: bound_" + std::to_string(d) + " < 1e-3", bd < 1e-3, bd, 0.0, 1e-3));
      }
    }

    const double ratio = convergence_ratio();
    add(detail::make_check(8, suite, "leapfrog convergence ratio e(dt)/e(dt/2) in [3, 5]", ratio >= 3.0 && ratio <= 5.0,
                           ratio, 4.0, 1.0));

    std::vector<double> energy(res.ensemble.size());
    for (std::size_t i = 0; i < energy.size(); ++i) energy[i] = sys.hamiltonian(res.ensemble.sample(i));
    const double ks = stats::ks_statistic(energy, [&](double e) { return e <= 0.0 ? 0.0 : -std::expm1(-beta * e); });
    const double n_eff = std::min(static_cast<double>(energy.size()), stats::effective_sample_size(energy));
    const double critical = 1.628 / std::sqrt(n_eff);  // Kolmogorov distribution, alpha = 0.01
    add(detail::make_check(8, suite, "KS test of sampled energies against Exp(beta), alpha = 0.01", ks < critical, ks,
                           0.0, critical, "effective sample size " + std::to_string(n_eff)));
  }

  if (suite == "pendulum") {
    if (const auto* a = find("p1")) {
      const int d6 = 6;
      const auto& u = bound_at(*a, d6);
      add(detail::make_check(6, suite, "p1: unpartitioned bound_6 within 3 sigma of 0", u.value < 3.0 * u.std_error,
                             u.value, 0.0, 3.0 * u.std_error));
      const BoundResult* p6 = nullptr;
      for (const auto& b : a->bounds.partitioned)
        if (b.d == d6) p6 = &b;
      if (p6) {
        add(detail::make_check(6, suite, "p1: partitioned bound_6 strictly positive", p6->value > 3.0 * p6->std_error,
                               p6->value, 0.0, 3.0 * p6->std_error));
        const double target = 0.8 * a->c_norm->value;
        add(detail::make_check(6, suite, "p1: partitioned bound_6 >= 0.8 C", p6->value >= target, p6->value, target, 0.0,
                               "ratio " + std::to_string(p6->value / a->c_norm->value)));
      }
      for (std::size_t i = 0; i < a->bounds.partitioned.size(); ++i) {
        const auto& p = a->bounds.partitioned[i];
        const auto& b = a->bounds.plain[i];
        const double sigma = 3.0 * std::hypot(p.std_error, b.std_error);
        add(detail::make_check(6, suite, "p1: partitioned >= unpartitioned - 3 sigma at d=" + std::to_string(p.d),
                               p.value >= b.value - sigma, p.value, b.value, sigma));
      }
    }
  }

  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

/// Runs one suite or, for "all", every suite.
inline std::vector<SuiteResult> verify(const std::string& name, std::uint64_t seed = 20261018) {
  std::vector<SuiteResult> out;
  if (name == "all") {
    for (const auto& s : suite_names()) out.push_back(run_suite(s, suite_settings(s, seed)));
  } else {
    out.push_back(run_suite(name, suite_settings(name, seed)));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const std::vector<SuiteResult>& results) {
  nlohmann::ordered_json j;
  j["schema_version"] = report_schema_version;
  std::size_t failures = 0;
  nlohmann::ordered_json suites = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json s;
    s["suite"] = r.suite;
    s["passed"] = r.passed();
    s["seconds"] = r.seconds;
    nlohmann::ordered_json checks = nlohmann::ordered_json::array();
    for (const auto& c : r.checks) {
      failures += c.passed ? 0 : 1;
      nlohmann::ordered_json jc = {{"criterion", c.criterion}, {"name", c.name},         {"passed", c.passed},
                                   {"measured", c.measured},   {"reference", c.reference}, {"tolerance", c.tolerance}};
      if (!c.detail.empty()) jc["detail"] = c.detail;
      checks.push_back(jc);
    }
    s["checks"] = checks;
    s["warnings"] = r.warnings;
    suites.push_back(s);
  }
  j["suites"] = suites;
  j["failures"] = failures;
  return j;
}

}  // namespace mazur
