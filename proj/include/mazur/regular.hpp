#pragma once

// Level-set (microcanonical) averages A^H for ergodically regular systems and the norm
// ||A^H||_D^2 under the measure Vol(L_a) exp(-beta a) da / Z. For a 1-DOF connected level set
// the microcanonical average is the one-period time average and Vol(L_a) is the period T(a).
// For products of 1-DOF factors the level set is a torus, the average is taken over a
// product grid of factor phases and the volume is the product of the factor periods.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/legendre.hpp>

#include "mazur/correlation.hpp"
#include "mazur/dynamics.hpp"
#include "mazur/error.hpp"
#include "mazur/expr.hpp"
#include "mazur/gibbs.hpp"
#include "mazur/parallel.hpp"

namespace mazur {

struct LevelSetAverage {
  std::vector<double> alpha;  ///< energies (one per factor for products)
  double value = 0.0;
  std::vector<double> period;  ///< per factor
  std::string component;       ///< "closed", "rotation+" or "rotation-" per factor, comma separated
};

struct LevelSetOptions {
  double dt = 1e-3;
  double max_time = 1e4;            ///< period search limit
  double energy_tolerance = 1e-9;   ///< relative, after correction
  std::size_t min_points = 64;      ///< per period
  std::size_t torus_points = 64;    ///< phase grid per factor on product systems
};

namespace detail {

/// Scales the momentum p_j so that energy(x) = alpha. Returns false when impossible.
inline bool correct_energy(const Expression& energy, std::span<double> x, int r, int j, double alpha) {
  const auto pj = static_cast<std::size_t>(r + j);
  if (x[pj] == 0.0) x[pj] = 1.0;
  const double base = x[pj];
  auto f = [&](double s) {
    x[pj] = s * base;
    return energy(x) - alpha;
  };
  if (f(0.0) > 0.0) return false;
  double hi = 1.0;
  while (f(hi) < 0.0) {
    hi *= 2.0;
    if (hi > 1e12) return false;
  }
  double lo = 0.0;
  for (int it = 0; it < 200 && hi - lo > 1e-16 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  f(0.5 * (lo + hi));
  return true;
}

/// Closed orbit of the 1-DOF motion in coordinate j (other coordinates at rest).
struct FactorOrbit {
  double period = 0.0;
  std::string component;
  std::vector<double> states;  ///< N points evenly spaced in time, row-major 2r
  std::size_t points = 0;
};

inline double hermite_root(double g0, double g1, double d0, double d1) {
  // Cubic Hermite interpolant on [0, 1] with values g0, g1 and slopes d0, d1 (scaled by dt).
  auto h = [&](double s) {
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * g0 + (s3 - 2 * s2 + s) * d0 + (-2 * s3 + 3 * s2) * g1 + (s3 - s2) * d1;
  };
  double lo = 0.0, hi = 1.0;
  const bool rising = g1 > g0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    ((h(mid) < 0.0) == rising ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// Finds the period from x0 by a sign-matched Poincare section through x0, then
/// samples one period on an even grid.
inline FactorOrbit closed_orbit(const SystemSpec& sys, std::span<const double> x0, int j, const LevelSetOptions& opts) {
  const int r = sys.r;
  const auto qj = static_cast<std::size_t>(j), pj = static_cast<std::size_t>(r + j);
  const Expression& vq = sys.dH_dp[qj];
  const Expression& fq = sys.dH_dq[qj];
  const double vq0 = vq(x0), vp0 = -fq(x0);
  const bool q_section = std::fabs(vq0) >= std::fabs(vp0);
  if (vq0 == 0.0 && vp0 == 0.0) throw NumericError("start point is an equilibrium; no closed orbit");
  const std::size_t coord = q_section ? qj : pj;
  const double sign = (q_section ? vq0 : vp0) > 0.0 ? 1.0 : -1.0;
  const double c0 = x0[coord];
  const bool periodic = q_section && sys.periodic[qj];
  std::vector<double> targets = {0.0};
  if (periodic) targets = {0.0, 2.0 * std::numbers::pi, -2.0 * std::numbers::pi};

  auto velocity = [&](std::span<const double> x) { return q_section ? vq(x) : -fq(x); };

  std::vector<double> x(x0.begin(), x0.end()), prev(x);
  Leapfrog lf(sys, opts.dt);
  const auto max_steps = static_cast<std::size_t>(opts.max_time / opts.dt);
  double period = -1.0, winding = 0.0;
  for (std::size_t i = 0; i < max_steps && period < 0.0; ++i) {
    prev = x;
    lf.step(x, i + 1);
    for (double c : targets) {
      const double g0 = (prev[coord] - c0 - c) * sign, g1 = (x[coord] - c0 - c) * sign;
      if (i > 0 && g0 < 0.0 && g1 >= 0.0) {
        const double s = hermite_root(g0, g1, velocity(prev) * sign * opts.dt, velocity(x) * sign * opts.dt);
        period = (static_cast<double>(i) + s) * opts.dt;
        winding = c;
        break;
      }
    }
  }
  if (period <= 0.0)
    throw NumericError("orbital period not found within t = " + std::to_string(opts.max_time) +
                       " (energy at or near a separatrix?)");

  FactorOrbit orbit;
  orbit.period = period;
  orbit.component = winding == 0.0 ? "closed" : (winding > 0.0 ? "rotation+" : "rotation-");
  orbit.points = std::max(opts.min_points, static_cast<std::size_t>(std::ceil(period / opts.dt)));
  const double h = period / static_cast<double>(orbit.points);
  Leapfrog fine(sys, h);
  x.assign(x0.begin(), x0.end());
  orbit.states.reserve(orbit.points * x.size());
  for (std::size_t i = 0; i < orbit.points; ++i) {
    orbit.states.insert(orbit.states.end(), x.begin(), x.end());
    fine.step(x, i + 1);
  }
  return orbit;
}

/// Start point on the factor level set: other coordinates at their equilibria, q_j at
/// its equilibrium and p_j > 0 chosen for the requested factor energy.
inline std::vector<double> factor_start(const SystemSpec& sys, std::size_t f, double energy) {
  std::vector<double> x(static_cast<std::size_t>(2 * sys.r), 0.0);
  for (const auto& rf : sys.regular_factors) x[static_cast<std::size_t>(rf.q_index)] = rf.q_equilibrium;
  const auto& rf = sys.regular_factors[f];
  if (!(energy > rf.ground_energy))
    throw ValidationError("factor energy " + std::to_string(energy) + " is not above the ground energy");
  if (!correct_energy(rf.energy, x, sys.r, rf.q_index, energy))
    throw NumericError("cannot place a start point at factor energy " + std::to_string(energy));
  return x;
}

}  // namespace detail

/// One-period time average of A on the component of {H = alpha} through start_hint (1-DOF systems).
/// The start is moved onto the level set by rescaling its momentum.
inline LevelSetAverage level_set_average(const SystemSpec& sys, const Expression& A, double alpha,
                                         const PhaseState& start_hint, const LevelSetOptions& opts = {}) {
  if (sys.r != 1) throw ValidationError("level_set_average needs a 1-DOF system; use torus_average for products");
  if (start_hint.dims() != 1 || A.dims() != 1) throw ValidationError("state/observable dimension must be 1");
  std::vector<double> x(start_hint.flat().begin(), start_hint.flat().end());
  if (std::fabs(sys.hamiltonian(x) - alpha) > opts.energy_tolerance * std::max(1.0, std::fabs(alpha)))
    detail::correct_energy(sys.hamiltonian, x, 1, 0, alpha);
  const double e = sys.hamiltonian(x);
  if (std::fabs(e - alpha) > opts.energy_tolerance * std::max(1.0, std::fabs(alpha)))
    throw ValidationError("start_hint cannot be moved onto the level set H = " + std::to_string(alpha) +
                          " (energy after correction " + std::to_string(e) + ")");
  const auto orbit = detail::closed_orbit(sys, x, 0, opts);
  double sum = 0.0;
  for (std::size_t i = 0; i < orbit.points; ++i) sum += A(std::span<const double>(&orbit.states[2 * i], 2));
  return {{alpha}, sum / static_cast<double>(orbit.points), {orbit.period}, orbit.component};
}

namespace detail {

/// Average of every observable over the product of factor orbits.
inline std::vector<double> torus_mean(const SystemSpec& sys, std::span<const Expression> obs,
                                      const std::vector<const FactorOrbit*>& orbits) {
  const auto w = static_cast<std::size_t>(2 * sys.r);
  std::vector<double> x(w), sums(obs.size(), 0.0);
  std::vector<std::size_t> idx(orbits.size(), 0);
  std::size_t total = 1;
  for (const auto* o : orbits) total *= o->points;
  for (std::size_t n = 0; n < total; ++n) {
    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t f = 0; f < orbits.size(); ++f) {
      const auto& rf = sys.regular_factors[f];
      const double* s = &orbits[f]->states[idx[f] * w];
      x[static_cast<std::size_t>(rf.q_index)] = s[rf.q_index];
      x[static_cast<std::size_t>(sys.r + rf.q_index)] = s[sys.r + rf.q_index];
    }
    for (std::size_t o = 0; o < obs.size(); ++o) sums[o] += obs[o](x);
    for (std::size_t f = 0; f < idx.size(); ++f) {
      if (++idx[f] < orbits[f]->points) break;
      idx[f] = 0;
    }
  }
  for (double& s : sums) s /= static_cast<double>(total);
  return sums;
}

inline FactorOrbit factor_orbit(const SystemSpec& sys, std::size_t f, double energy, const LevelSetOptions& opts,
                                bool torus) {
  LevelSetOptions o = opts;
  auto x = factor_start(sys, f, energy);
  auto orbit = closed_orbit(sys, x, sys.regular_factors[f].q_index, o);
  if (torus && sys.regular_factors.size() > 1) {
    // Resample the orbit on a coarser even grid for the product average.
    const std::size_t n = std::max<std::size_t>(4, opts.torus_points);
    Leapfrog lf(sys, orbit.period / static_cast<double>(n * 64));
    FactorOrbit coarse = orbit;
    coarse.points = n;
    coarse.states.clear();
    for (std::size_t i = 0; i < n; ++i) {
      coarse.states.insert(coarse.states.end(), x.begin(), x.end());
      for (int s = 0; s < 64; ++s) lf.step(x);
    }
    return coarse;
  }
  return orbit;
}

}  // namespace detail

/// A^H on the torus of a product system at the given factor energies, averaged over a product
/// grid of factor phases.
inline LevelSetAverage torus_average(const SystemSpec& sys, const Expression& A, std::span<const double> energies,
                                     const LevelSetOptions& opts = {}) {
  if (sys.regular_factors.empty())
    throw ValidationError("system '" + sys.name + "' is not declared ergodically regular");
  if (energies.size() != sys.regular_factors.size())
    throw ValidationError("need one energy per regular factor");
  std::vector<detail::FactorOrbit> orbits;
  std::vector<const detail::FactorOrbit*> ptrs;
  LevelSetAverage out;
  for (std::size_t f = 0; f < energies.size(); ++f) {
    orbits.push_back(detail::factor_orbit(sys, f, energies[f], opts, true));
    out.alpha.push_back(energies[f]);
    out.period.push_back(orbits.back().period);
    out.component += (f ? "," : "") + orbits.back().component;
  }
  for (const auto& o : orbits) ptrs.push_back(&o);
  out.value = detail::torus_mean(sys, std::span<const Expression>(&A, 1), ptrs)[0];
  return out;
}

/// A^H on the torus as a long-time average from the product of the factor start points.
inline double torus_average_long_time(const SystemSpec& sys, const Expression& A, std::span<const double> energies,
                                      double T, double dt) {
  if (energies.size() != sys.regular_factors.size()) throw ValidationError("need one energy per regular factor");
  std::vector<double> x(static_cast<std::size_t>(2 * sys.r), 0.0);
  for (std::size_t f = 0; f < energies.size(); ++f) {
    const auto xf = detail::factor_start(sys, f, energies[f]);
    const auto q = static_cast<std::size_t>(sys.regular_factors[f].q_index);
    x[q] = xf[q];
    x[static_cast<std::size_t>(sys.r) + q] = xf[static_cast<std::size_t>(sys.r) + q];
  }
  return orbital_average(sys, A, PhaseState::from_flat(x), T, dt);
}

// ---------------------------------------------------------------------------
// Quadrature over the moment map

struct QuadratureSpec {
  int nodes = 64;          ///< Gauss-Legendre nodes per factor energy
  double range = 40.0;     ///< integration range [E_min, E_min + range / beta]
  LevelSetOptions level;
};

struct GaussLegendre {
  std::vector<double> x, w;
};

/// Nodes and weights on [a, b].
inline GaussLegendre gauss_legendre(int n, double a, double b) {
  if (n < 1) throw ValidationError("quadrature needs at least one node");
  const auto zeros = boost::math::legendre_p_zeros<double>(n);  // non-negative zeros
  GaussLegendre g;
  auto add = [&](double t) {
    const double dp = boost::math::legendre_p_prime(n, t);
    g.x.push_back(0.5 * (a + b) + 0.5 * (b - a) * t);
    g.w.push_back((b - a) / ((1.0 - t * t) * dp * dp));
  };
  for (auto it = zeros.rbegin(); it != zeros.rend(); ++it)
    if (*it != 0.0) add(-*it);
  for (double t : zeros) add(t);
  return g;
}

/// Per-node data of the D-measure: weight w_i T(a_i) exp(-beta a_i) and A^H(a_i) for every observable.
struct LevelGrid {
  std::vector<std::vector<double>> alpha;  ///< [node][factor]
  std::vector<double> weight;              ///< unnormalized
  std::vector<std::vector<double>> values; ///< [observable][node]
  double period_min = 0.0, period_max = 0.0;
};

inline LevelGrid level_grid(const SystemSpec& sys, std::span<const Expression> obs, double beta,
                            const QuadratureSpec& spec = {}) {
  if (!(beta > 0.0)) throw ValidationError("beta must be > 0");
  if (sys.regular_factors.empty())
    throw ValidationError("system '" + sys.name +
                          "' has level sets with several components in the energy range; its level-set norm is "
                          "not defined here, use invariant labelers and the partitioned bound instead");
  const std::size_t nf = sys.regular_factors.size();
  std::vector<GaussLegendre> rules;
  for (const auto& rf : sys.regular_factors)
    rules.push_back(gauss_legendre(spec.nodes, rf.ground_energy, rf.ground_energy + spec.range / beta));
  const auto m = static_cast<std::size_t>(spec.nodes);

  // Factor orbits at every node, computed independently.
  std::vector<std::vector<detail::FactorOrbit>> orbits(nf, std::vector<detail::FactorOrbit>(m));
  parallel_for(nf * m, [&](std::size_t i) {
    const std::size_t f = i / m, n = i % m;
    orbits[f][n] = detail::factor_orbit(sys, f, rules[f].x[n], spec.level, true);
  }, 1);

  std::size_t total = 1;
  for (std::size_t f = 0; f < nf; ++f) total *= m;
  LevelGrid grid;
  grid.alpha.assign(total, std::vector<double>(nf));
  grid.weight.assign(total, 0.0);
  grid.values.assign(obs.size(), std::vector<double>(total));
  grid.period_min = std::numeric_limits<double>::infinity();
  grid.period_max = 0.0;
  for (const auto& fo : orbits)
    for (const auto& o : fo) {
      grid.period_min = std::min(grid.period_min, o.period);
      grid.period_max = std::max(grid.period_max, o.period);
    }
  parallel_for(total, [&](std::size_t node) {
    std::vector<const detail::FactorOrbit*> ptrs(nf);
    std::size_t rest = node;
    double w = 1.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const std::size_t n = rest % m;
      rest /= m;
      const double e = rules[f].x[n];
      grid.alpha[node][f] = e;
      ptrs[f] = &orbits[f][n];
      // Shift by the ground energy so the weights stay representable for large beta.
      w *= rules[f].w[n] * orbits[f][n].period * std::exp(-beta * (e - sys.regular_factors[f].ground_energy));
    }
    grid.weight[node] = w;
    const auto v = detail::torus_mean(sys, obs, ptrs);
    for (std::size_t o = 0; o < obs.size(); ++o) grid.values[o][node] = v[o];
  }, 4);
  return grid;
}

/// <A^H, B^H>_D with the normalized measure Vol(L_a) exp(-beta a) da / Z.
inline double d_inner_product(const SystemSpec& sys, const Expression& A, const Expression& B, double beta,
                              const QuadratureSpec& spec = {}) {
  const std::vector<Expression> obs = {A, B};
  const auto g = level_grid(sys, obs, beta, spec);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    num += g.weight[i] * g.values[0][i] * g.values[1][i];
    den += g.weight[i];
  }
  return num / den;
}

/// ||A^H||_D^2.
inline double norm_AH_squared(const SystemSpec& sys, const Expression& A, double beta, const QuadratureSpec& spec = {}) {
  const auto g = level_grid(sys, std::span<const Expression>(&A, 1), beta, spec);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g.weight.size(); ++i) {
    num += g.weight[i] * g.values[0][i] * g.values[0][i];
    den += g.weight[i];
  }
  if (!(den > 0.0) || !std::isfinite(num)) throw NumericError("level-set quadrature did not produce a finite value");
  return num / den;
}

/// A^H at the given energies (1-DOF: one energy per row; products: one per factor).
inline std::vector<LevelSetAverage> level_table(const SystemSpec& sys, const Expression& A,
                                                const std::vector<std::vector<double>>& energies,
                                                const LevelSetOptions& opts = {}) {
  std::vector<LevelSetAverage> out(energies.size());
  parallel_for(energies.size(), [&](std::size_t i) { out[i] = torus_average(sys, A, energies[i], opts); }, 1);
  return out;
}

inline void write_level_table(std::ostream& os, const std::vector<LevelSetAverage>& rows) {
  if (rows.empty()) return;
  const std::size_t nf = rows.front().alpha.size();
  for (std::size_t f = 0; f < nf; ++f) os << "alpha" << f + 1 << ",";
  os << "value";
  for (std::size_t f = 0; f < nf; ++f) os << ",period" << f + 1;
  os << ",component\n";
  for (const auto& r : rows) {
    for (double a : r.alpha) os << format_double(a) << ",";
    os << format_double(r.value);
    for (double t : r.period) os << "," << format_double(t);
    os << ",\"" << r.component << "\"\n";
  }
}

}  // namespace mazur
