#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mazur/error.hpp"
#include "mazur/expr.hpp"

namespace mazur {

/// Point (q, p) of a 2r-dimensional phase space, stored contiguously as (q1..qr, p1..pr).
class PhaseState {
 public:
  PhaseState() = default;
  explicit PhaseState(int r) : x_(static_cast<std::size_t>(2 * r), 0.0) {}
  PhaseState(std::vector<double> q, std::vector<double> p) {
    if (q.size() != p.size() || q.empty()) throw ValidationError("PhaseState: q and p must have equal length >= 1");
    x_ = std::move(q);
    x_.insert(x_.end(), p.begin(), p.end());
  }
  static PhaseState from_flat(std::vector<double> x) {
    if (x.empty() || x.size() % 2 != 0) throw ValidationError("PhaseState: flat vector must have even length >= 2");
    PhaseState s;
    s.x_ = std::move(x);
    return s;
  }

  int dims() const noexcept { return static_cast<int>(x_.size() / 2); }
  double& q(int i) { return x_[static_cast<std::size_t>(i)]; }
  double& p(int i) { return x_[static_cast<std::size_t>(dims() + i)]; }
  double q(int i) const { return x_[static_cast<std::size_t>(i)]; }
  double p(int i) const { return x_[static_cast<std::size_t>(dims() + i)]; }

  std::span<double> flat() noexcept { return x_; }
  std::span<const double> flat() const noexcept { return x_; }

  bool finite() const {
    for (double v : x_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const PhaseState&, const PhaseState&) = default;

 private:
  std::vector<double> x_;
};

/// Metadata for systems whose level sets are connected closed orbits (or products of them).
/// Consumed by the level-set averaging code.
struct RegularFactor {
  int q_index = 0;            ///< coordinate index of this 1-DOF factor
  Expression energy;          ///< factor energy as a function on the full phase space
  double ground_energy = 0.0; ///< minimum of the factor energy
  double q_equilibrium = 0.0; ///< q at the minimum
};

struct SystemSpec {
  std::string name;
  int r = 1;
  Expression hamiltonian;
  std::vector<Expression> conserved;  ///< conserved[0] is the Hamiltonian
  std::vector<std::string> conserved_text;
  std::vector<bool> periodic;         ///< q_i lives on a circle of period 2*pi

  std::vector<Expression> dH_dq;  ///< depends on q only
  std::vector<Expression> dH_dp;  ///< depends on p only

  /// Non-empty when the system is ergodically regular with connected 1-DOF factors.
  std::vector<RegularFactor> regular_factors;

  std::size_t k() const noexcept { return conserved.size(); }

  /// Names usable inside observables: H and H1..Hk.
  Macros macros() const {
    Macros m;
    m.emplace("H", hamiltonian);
    for (std::size_t i = 0; i < conserved.size(); ++i) m.emplace("H" + std::to_string(i + 1), conserved[i]);
    return m;
  }

  Expression parse_observable(std::string_view text) const { return parse(text, r, macros()); }
};

/// Builds a system from expression text. `extra_conserved` are H2..Hk; H1 is the Hamiltonian.
/// Rejects Hamiltonians that are not separable as T(p) + V(q).
inline SystemSpec make_system(std::string name, int r, std::string_view hamiltonian,
                              const std::vector<std::string>& extra_conserved = {},
                              std::vector<bool> periodic = {}) {
  SystemSpec sys;
  sys.name = std::move(name);
  sys.r = r;
  sys.hamiltonian = parse(hamiltonian, r);
  sys.conserved.push_back(sys.hamiltonian);
  sys.conserved_text.emplace_back(hamiltonian);
  for (const auto& text : extra_conserved) {
    sys.conserved.push_back(parse(text, r, sys.macros()));
    sys.conserved_text.push_back(text);
  }
  if (periodic.empty()) periodic.assign(static_cast<std::size_t>(r), false);
  if (periodic.size() != static_cast<std::size_t>(r))
    throw ValidationError("periodic flags must have one entry per coordinate");
  sys.periodic = std::move(periodic);

  for (int i = 0; i < r; ++i) {
    sys.dH_dq.push_back(sys.hamiltonian.derivative(i));
    sys.dH_dp.push_back(sys.hamiltonian.derivative(r + i));
  }
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < r; ++j) {
      if (sys.dH_dq[static_cast<std::size_t>(i)].depends_on(r + j) ||
          sys.dH_dp[static_cast<std::size_t>(i)].depends_on(j))
        throw ValidationError("Hamiltonian '" + std::string(hamiltonian) +
                              "' is not separable as T(p) + V(q); only separable systems are supported");
    }
  }
  return sys;
}

namespace systems {

/// H = (q1^2 + p1^2)/2.
inline SystemSpec harmonic_oscillator() {
  auto sys = make_system("oscillator", 1, "(q1^2 + p1^2)/2");
  sys.regular_factors.push_back({0, sys.hamiltonian, 0.0, 0.0});
  return sys;
}

/// Two uncoupled oscillators with frequencies 1 and sqrt(2); H2 is the second oscillator's energy.
inline SystemSpec two_oscillators() {
  auto sys = make_system("product", 2, "(q1^2 + p1^2)/2 + (p2^2 + 2*q2^2)/2", {"(p2^2 + 2*q2^2)/2"});
  sys.regular_factors.push_back({0, parse("(q1^2 + p1^2)/2", 2), 0.0, 0.0});
  sys.regular_factors.push_back({1, parse("(p2^2 + 2*q2^2)/2", 2), 0.0, 0.0});
  return sys;
}

/// H = p^2/2 - cos q on the cylinder. Level sets above the separatrix have two components.
inline SystemSpec pendulum() { return make_system("pendulum", 1, "p1^2/2 - cos(q1)", {}, {true}); }

inline std::vector<std::string> names() { return {"oscillator", "product", "pendulum"}; }

inline SystemSpec by_name(std::string_view name) {
  if (name == "oscillator") return harmonic_oscillator();
  if (name == "product") return two_oscillators();
  if (name == "pendulum") return pendulum();
  throw ValidationError("unknown built-in system '" + std::string(name) +
                        "' (valid: oscillator, product, pendulum)");
}

}  // namespace systems

/// Kick-drift-kick leapfrog for separable H. Caches the force at the current position.
class Leapfrog {
 public:
  Leapfrog(const SystemSpec& sys, double dt)
      : sys_(&sys), dt_(dt), force_(static_cast<std::size_t>(sys.r)), velocity_(static_cast<std::size_t>(sys.r)) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("time step dt must be > 0");
  }

  double dt() const noexcept { return dt_; }

  /// Advances x in place by one step. `step_index` is reported in errors.
  void step(std::span<double> x, std::size_t step_index = 0) {
    const int r = sys_->r;
    if (!cached_) update_force(x);
    for (int i = 0; i < r; ++i) x[static_cast<std::size_t>(r + i)] -= 0.5 * dt_ * force_[static_cast<std::size_t>(i)];
    for (int i = 0; i < r; ++i) velocity_[static_cast<std::size_t>(i)] = sys_->dH_dp[static_cast<std::size_t>(i)](x);
    for (int i = 0; i < r; ++i) x[static_cast<std::size_t>(i)] += dt_ * velocity_[static_cast<std::size_t>(i)];
    update_force(x);
    for (int i = 0; i < r; ++i) x[static_cast<std::size_t>(r + i)] -= 0.5 * dt_ * force_[static_cast<std::size_t>(i)];
    for (double v : x)
      if (!std::isfinite(v))
        throw NumericError("integrator produced a non-finite state at step " + std::to_string(step_index));
  }

  /// Must be called whenever x is modified outside step().
  void invalidate() noexcept { cached_ = false; }

 private:
  void update_force(std::span<const double> x) {
    for (int i = 0; i < sys_->r; ++i) force_[static_cast<std::size_t>(i)] = sys_->dH_dq[static_cast<std::size_t>(i)](x);
    cached_ = true;
  }

  const SystemSpec* sys_;
  double dt_;
  std::vector<double> force_;
  std::vector<double> velocity_;
  bool cached_ = false;
};

/// One leapfrog step from s.
inline PhaseState step_verlet(const SystemSpec& sys, const PhaseState& s, double dt) {
  if (s.dims() != sys.r) throw ValidationError("state dimension does not match system");
  Leapfrog lf(sys, dt);
  PhaseState out = s;
  lf.step(out.flat());
  return out;
}

struct IntegrationOptions {
  std::size_t step_cap = 100'000'000;
  double drift_tolerance = 1e-4;
};

/// Number of steps covering [0, T] on a grid of spacing dt.
inline std::size_t step_count(double T, double dt) {
  if (!(T > 0.0) || !(dt > 0.0)) throw ValidationError("T and dt must be > 0");
  return static_cast<std::size_t>(std::floor(T / dt * (1.0 + 1e-12)));
}

struct Trajectory {
  double dt = 0.0;
  std::vector<PhaseState> states;
  std::vector<double> drift;
  std::vector<std::string> warnings;
};

/// Relative deviation used for drift: |f - f0| / max(1, |f0|).
inline double relative_deviation(double f, double f0) {
  return std::fabs(f - f0) / std::max(1.0, std::fabs(f0));
}

inline std::vector<double> conserved_drift(const Trajectory& traj, std::span<const Expression> quantities) {
  if (traj.states.empty()) throw ValidationError("conserved_drift: empty trajectory");
  std::vector<double> drift(quantities.size(), 0.0);
  for (std::size_t i = 0; i < quantities.size(); ++i) {
    const double f0 = quantities[i](traj.states.front().flat());
    for (const auto& s : traj.states) drift[i] = std::max(drift[i], relative_deviation(quantities[i](s.flat()), f0));
  }
  return drift;
}

inline std::vector<double> conserved_drift(const Trajectory& traj, const SystemSpec& sys) {
  return conserved_drift(traj, std::span<const Expression>(sys.conserved));
}

inline Trajectory integrate(const SystemSpec& sys, const PhaseState& s0, double T, double dt,
                            const IntegrationOptions& opts = {}) {
  if (s0.dims() != sys.r) throw ValidationError("state dimension does not match system");
  const std::size_t n = step_count(T, dt);
  if (n > opts.step_cap)
    throw ValidationError("T/dt = " + std::to_string(n) + " exceeds the step cap " + std::to_string(opts.step_cap));
  Trajectory traj;
  traj.dt = dt;
  traj.states.reserve(n + 1);
  traj.states.push_back(s0);
  Leapfrog lf(sys, dt);
  PhaseState x = s0;
  for (std::size_t i = 1; i <= n; ++i) {
    lf.step(x.flat(), i);
    traj.states.push_back(x);
  }
  traj.drift = conserved_drift(traj, sys);
  for (std::size_t i = 0; i < traj.drift.size(); ++i) {
    if (traj.drift[i] > opts.drift_tolerance)
      traj.warnings.push_back("drift of conserved quantity H" + std::to_string(i + 1) + " = " +
                              std::to_string(traj.drift[i]) + " exceeds tolerance " +
                              std::to_string(opts.drift_tolerance));
  }
  return traj;
}

/// Wraps periodic coordinates into [-pi, pi).
inline void wrap_periodic(const SystemSpec& sys, std::span<double> x) {
  for (int i = 0; i < sys.r; ++i) {
    if (!sys.periodic[static_cast<std::size_t>(i)]) continue;
    double& q = x[static_cast<std::size_t>(i)];
    q = q - 2.0 * std::numbers::pi * std::floor((q + std::numbers::pi) / (2.0 * std::numbers::pi));
  }
}

}  // namespace mazur
