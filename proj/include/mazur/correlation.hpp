#pragma once

// Time-averaged autocorrelation C(A) = lim (1/T) int_0^T <A^0, A^t>_beta dt, estimated two ways
// from the same trajectories:
//   norm_of_orbital_average: mean over the ensemble of Abar_T(m)^2
//   direct_time_integral:    phi(t) = mean of A(m) A(gamma_m(t)) on the step grid, then (1/T) int phi
// Both are reported at horizons T and T/2.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mazur/dynamics.hpp"
#include "mazur/expr.hpp"
#include "mazur/gibbs.hpp"
#include "mazur/parallel.hpp"
#include "mazur/stats.hpp"

namespace mazur {

enum class CMethod { NormOfOrbitalAverage, DirectTimeIntegral };

inline const char* to_string(CMethod m) {
  return m == CMethod::NormOfOrbitalAverage ? "norm_of_orbital_average" : "direct_time_integral";
}

struct CEstimate {
  CMethod method = CMethod::NormOfOrbitalAverage;
  double value = 0.0;
  double std_error = 0.0;
  double T = 0.0;
  double dt = 0.0;
  std::size_t n_ensemble = 0;
  double value_half = 0.0;  ///< same estimator at horizon T/2
  double std_error_half = 0.0;
  std::vector<std::string> warnings;

  /// Change between horizons T/2 and T, a proxy for the remaining finite-horizon bias.
  double horizon_error() const { return std::fabs(value - value_half); }
  /// Statistical and horizon errors combined in quadrature.
  double total_error() const { return std::hypot(std_error, horizon_error()); }
};

struct CorrelationOptions {
  double T = 100.0;
  double dt = 1e-2;
  std::size_t max_samples = 0;  ///< trajectories launched from an evenly strided subset; 0 = all
  IntegrationOptions integration;
};

/// Cells of a flow-invariant partition; a point gets the index of the first matching predicate.
struct Labeler {
  std::vector<std::string> names;
  std::vector<Predicate> cells;

  std::size_t size() const noexcept { return cells.size(); }

  /// Cell index, or size() when no predicate matches.
  std::size_t operator()(std::span<const double> x) const {
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (cells[i](x)) return i;
    return cells.size();
  }
};

/// Trapezoidal time average of A along the trajectory from m over [0, T].
inline double orbital_average(const SystemSpec& sys, const Expression& A, const PhaseState& m, double T,
                              double dt, const IntegrationOptions& opts = {}) {
  if (m.dims() != sys.r) throw ValidationError("state dimension does not match system");
  const std::size_t n = step_count(T, dt);
  if (n == 0) throw ValidationError("T must cover at least one step of size dt");
  if (n > opts.step_cap) throw ValidationError("T/dt exceeds the step cap");
  if (A.is_constant()) return A(m.flat());
  Leapfrog lf(sys, dt);
  PhaseState x = m;
  double sum = 0.5 * A(x.flat());
  for (std::size_t i = 1; i <= n; ++i) {
    lf.step(x.flat(), i);
    sum += (i == n ? 0.5 : 1.0) * A(x.flat());
  }
  return sum / static_cast<double>(n);
}

/// Per-sample trajectory results shared by both estimators.
struct TrajectoryAverages {
  std::size_t steps = 0;
  std::size_t half_steps = 0;
  double dt = 0.0;
  std::size_t n = 0;
  /// [observable][sample]
  std::vector<std::vector<double>> start, average, average_half;
  /// [observable][step]: sum over samples of A(m) A(gamma_m(t_j)), summed in fixed chunk order.
  std::vector<std::vector<double>> correlation_sum;
  double max_drift = 0.0;
  std::size_t label_changes = 0;
  std::vector<std::string> warnings;
};

/// Integrates every ensemble sample over [0, T] once and accumulates all observables.
inline TrajectoryAverages run_trajectories(const SystemSpec& sys, std::span<const Expression> observables,
                                           const GibbsEnsemble& ens, const CorrelationOptions& opts,
                                           const Labeler* labeler = nullptr) {
  if (ens.r != sys.r) throw ValidationError("ensemble dimension does not match system");
  const std::size_t steps = step_count(opts.T, opts.dt);
  if (steps < 2) throw ValidationError("T must cover at least two steps of size dt");
  if (steps > opts.integration.step_cap)
    throw ValidationError("T/dt = " + std::to_string(steps) + " exceeds the step cap");

  const GibbsEnsemble sub = subsample(ens, opts.max_samples);
  const std::size_t n = sub.size();
  const std::size_t n_obs = observables.size();

  TrajectoryAverages out;
  out.steps = steps;
  out.half_steps = steps / 2;
  out.dt = opts.dt;
  out.n = n;
  out.start.assign(n_obs, std::vector<double>(n));
  out.average.assign(n_obs, std::vector<double>(n));
  out.average_half.assign(n_obs, std::vector<double>(n));
  out.correlation_sum.assign(n_obs, std::vector<double>(steps + 1, 0.0));

  constexpr std::size_t chunk = 16;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  const std::size_t checkpoint = std::max<std::size_t>(1, steps / 16);
  std::vector<double> drift(n, 0.0);
  std::vector<unsigned char> changed(n, 0);

  auto process_chunk = [&](std::size_t c, std::vector<std::vector<double>>& corr) {
    for (auto& v : corr) std::fill(v.begin(), v.end(), 0.0);
    Leapfrog lf(sys, opts.dt);
    std::vector<double> a0(n_obs), sum(n_obs), sum_half(n_obs), h0(sys.k());
    const std::size_t end = std::min(n, (c + 1) * chunk);
    for (std::size_t s = c * chunk; s < end; ++s) {
      auto init = sub.sample(s);
      std::vector<double> x(init.begin(), init.end());
      lf.invalidate();
      for (std::size_t j = 0; j < sys.k(); ++j) h0[j] = sys.conserved[j](x);
      const std::size_t label0 = labeler ? (*labeler)(x) : 0;
      for (std::size_t o = 0; o < n_obs; ++o) {
        a0[o] = observables[o](x);
        sum[o] = 0.5 * a0[o];
        corr[o][0] += a0[o] * a0[o];
      }
      for (std::size_t i = 1; i <= steps; ++i) {
        lf.step(x, i);
        for (std::size_t o = 0; o < n_obs; ++o) {
          const double a = observables[o](x);
          corr[o][i] += a0[o] * a;
          if (i == out.half_steps) sum_half[o] = sum[o] + 0.5 * a;
          sum[o] += (i == steps ? 0.5 : 1.0) * a;
        }
        if (i % checkpoint == 0 || i == steps) {
          for (std::size_t j = 0; j < sys.k(); ++j)
            drift[s] = std::max(drift[s], relative_deviation(sys.conserved[j](x), h0[j]));
          if (labeler && (*labeler)(x) != label0) changed[s] = 1;
        }
      }
      for (std::size_t o = 0; o < n_obs; ++o) {
        out.start[o][s] = a0[o];
        if (observables[o].is_constant()) {
          out.average[o][s] = out.average_half[o][s] = a0[o];
        } else {
          out.average[o][s] = sum[o] / static_cast<double>(steps);
          out.average_half[o][s] = sum_half[o] / static_cast<double>(out.half_steps);
        }
      }
    }
  };

  // Chunks are processed in waves; partial correlation sums are added in chunk order.
  const std::size_t wave = std::max<std::size_t>(1, thread_count());
  std::vector<std::vector<std::vector<double>>> buffers(
      std::min(wave, n_chunks), std::vector<std::vector<double>>(n_obs, std::vector<double>(steps + 1)));
  for (std::size_t first = 0; first < n_chunks; first += wave) {
    const std::size_t count = std::min(wave, n_chunks - first);
    parallel_for(count, [&](std::size_t b) { process_chunk(first + b, buffers[b]); }, 1);
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t o = 0; o < n_obs; ++o)
        for (std::size_t i = 0; i <= steps; ++i) out.correlation_sum[o][i] += buffers[b][o][i];
  }

  out.max_drift = *std::max_element(drift.begin(), drift.end());
  if (out.max_drift > opts.integration.drift_tolerance)
    out.warnings.push_back("max relative drift of conserved quantities along trajectories " +
                           std::to_string(out.max_drift) + " exceeds tolerance " +
                           std::to_string(opts.integration.drift_tolerance));
  for (unsigned char c : changed) out.label_changes += c;
  if (labeler && out.label_changes > 0)
    out.warnings.push_back("labeler is not flow-invariant: " + std::to_string(out.label_changes) + " of " +
                           std::to_string(n) + " trajectories changed cell");
  return out;
}

/// Both estimators for observable `o` of a finished trajectory run.
inline std::pair<CEstimate, CEstimate> estimates_from(const TrajectoryAverages& run, std::size_t o,
                                                      const Expression& A) {
  const std::size_t n = run.n;
  CEstimate norm, direct;
  for (CEstimate* e : {&norm, &direct}) {
    e->T = static_cast<double>(run.steps) * run.dt;
    e->dt = run.dt;
    e->n_ensemble = n;
    e->warnings = run.warnings;
  }
  norm.method = CMethod::NormOfOrbitalAverage;
  direct.method = CMethod::DirectTimeIntegral;

  if (A.is_constant()) {
    const double c = A(std::vector<double>(static_cast<std::size_t>(2 * A.dims()), 0.0));
    norm.value = norm.value_half = direct.value = direct.value_half = c * c;
    return {norm, direct};
  }

  std::vector<double> sq(n), sq_half(n), cross(n), cross_half(n);
  for (std::size_t s = 0; s < n; ++s) {
    sq[s] = run.average[o][s] * run.average[o][s];
    sq_half[s] = run.average_half[o][s] * run.average_half[o][s];
    cross[s] = run.start[o][s] * run.average[o][s];
    cross_half[s] = run.start[o][s] * run.average_half[o][s];
  }
  const auto full = stats::batch_means(sq), half = stats::batch_means(sq_half);
  norm.value = full.mean;
  norm.std_error = full.std_error;
  norm.value_half = half.mean;
  norm.std_error_half = half.std_error;

  auto trapezoid = [&](std::size_t upto) {
    const auto& phi = run.correlation_sum[o];
    double s = 0.5 * (phi[0] + phi[upto]);
    for (std::size_t i = 1; i < upto; ++i) s += phi[i];
    return s / static_cast<double>(upto) / static_cast<double>(n);
  };
  direct.value = trapezoid(run.steps);
  direct.value_half = trapezoid(run.half_steps);
  direct.std_error = stats::batch_means(cross).std_error;
  direct.std_error_half = stats::batch_means(cross_half).std_error;

  for (CEstimate* e : {&norm, &direct}) {
    if (e->value < -3.0 * e->total_error())
      e->warnings.push_back(std::string(to_string(e->method)) + " estimate is negative beyond noise");
  }
  return {norm, direct};
}

inline CEstimate estimate_C_norm(const SystemSpec& sys, const Expression& A, const GibbsEnsemble& ens,
                                 const CorrelationOptions& opts) {
  const auto run = run_trajectories(sys, std::span<const Expression>(&A, 1), ens, opts);
  return estimates_from(run, 0, A).first;
}

inline CEstimate estimate_C_direct(const SystemSpec& sys, const Expression& A, const GibbsEnsemble& ens,
                                   const CorrelationOptions& opts) {
  const auto run = run_trajectories(sys, std::span<const Expression>(&A, 1), ens, opts);
  return estimates_from(run, 0, A).second;
}

/// Trajectory-based check that every sample keeps its cell label over [0, T].
inline std::size_t labeler_violations(const SystemSpec& sys, const Labeler& labeler, const GibbsEnsemble& ens,
                                      const CorrelationOptions& opts) {
  const Expression zero = Expression::constant(0.0, sys.r);
  return run_trajectories(sys, std::span<const Expression>(&zero, 1), ens, opts, &labeler).label_changes;
}

}  // namespace mazur
