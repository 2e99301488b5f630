// Acceptance suite: runs every verification suite at default seeds, adds checks against
// oracles computed here by one-dimensional quadrature, and prints one line per criterion.

#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/ellint_1.hpp>

#include "mazur/verify.hpp"

using namespace mazur;

namespace {

constexpr double pi = std::numbers::pi;

/// Integral over [a, inf) of f.
template <class F>
double integrate_tail(F f, double a) {
  boost::math::quadrature::exp_sinh<double> q;
  return q.integrate([&](double x) { return f(x); }, a, std::numeric_limits<double>::infinity());
}

template <class F>
double integrate(F f, double a, double b) {
  boost::math::quadrature::tanh_sinh<double> q;
  return q.integrate([&](double x) { return f(x); }, a, b);
}

/// E^n exp(-beta E), zero once the exponential underflows.
double boltzmann_power(double e, int n, double beta) {
  const double w = std::exp(-beta * e);
  return w == 0.0 ? 0.0 : std::pow(e, n) * w;
}

/// <H^n> under the Gibbs measure of the unit oscillator: H ~ Gamma(1, 1/beta).
double oscillator_moment(int n, double beta) {
  return beta * integrate_tail([&](double e) { return boltzmann_power(e, n, beta); }, 0.0);
}

/// Moments of the product system: factor energies are independent Exp(beta).
double exp_moment(int n, double beta) { return oscillator_moment(n, beta); }

/// Pendulum H = p^2/2 - cos q at beta: level-set periods from the complete elliptic integral.
struct PendulumOracle {
  double beta = 1.0;
  double Z = 0.0;

  explicit PendulumOracle(double b) : beta(b) {
    Z = 2.0 * pi * std::sqrt(2.0 * pi / beta) * boost::math::cyl_bessel_i(0, beta);
  }
  static double libration_period(double E) { return 4.0 * boost::math::ellint_1(std::sqrt((E + 1.0) / 2.0)); }
  static double rotation_period(double E) {
    return 4.0 * boost::math::ellint_1(std::sqrt(2.0 / (E + 1.0))) / std::sqrt(2.0 * (E + 1.0));
  }
  /// Integral of f(E) against the Gibbs energy density, split at the separatrix.
  template <class F>
  double energy_integral(F f) const {
    auto lib = [&](double e) { return f(e) * libration_period(e) * std::exp(-beta * e); };
    auto rot = [&](double e) {
      const double w = std::exp(-beta * e);
      return w == 0.0 ? 0.0 : f(e) * 2.0 * rotation_period(e) * w;
    };
    return (integrate(lib, -1.0, 1.0) + integrate(rot, 1.0, 3.0) + integrate_tail(rot, 3.0)) / Z;
  }
  /// C(p1): p1 averages to +-2 pi / T on rotating orbits and to 0 on librating ones.
  double c_momentum() const {
    // (2 pi / T)^2 weighted by the period density 2 T of both rotating components.
    auto rot = [&](double e) {
      const double w = std::exp(-beta * e);
      return w == 0.0 ? 0.0 : 8.0 * pi * pi / rotation_period(e) * w;
    };
    return (integrate(rot, 1.0, 3.0) + integrate_tail(rot, 3.0)) / Z;
  }
  /// Exact partitioned bound of degree d for p1 with cells {rotators+, rotators-, librators}.
  double partitioned_bound(int d) const {
    const int m = d + 1;
    Eigen::MatrixXd G(m, m);
    Eigen::VectorXd v(m);
    for (int a = 0; a < m; ++a) {
      for (int b = 0; b < m; ++b) G(a, b) = energy_integral([&](double e) { return std::pow(e, a + b); });
      // <p1 1_{rotators+} H^a>: the period cancels against the orbital average 2 pi / T.
      auto g = [&](double e) { return boltzmann_power(e, a, beta); };
      v(a) = 2.0 * pi * (integrate(g, 1.0, 3.0) + integrate_tail(g, 3.0)) / Z;
    }
    return 2.0 * v.dot(G.ldlt().solve(v));  // both rotating cells; librators contribute 0
  }
};

const ObservableAnalysis* find(const SuiteResult& r, const std::string& observable) {
  for (const auto& a : r.analysis.observables)
    if (a.observable == observable) return &a;
  return nullptr;
}

Check relative_check(int criterion, const std::string& suite, const std::string& name, double measured, double ref,
                     double rel) {
  const double tol = rel * std::max(std::fabs(ref), 1e-300);
  return {criterion, suite, name, std::fabs(measured - ref) <= tol, measured, ref, tol, {}};
}

}  // namespace

int main() {
  std::cout << std::setprecision(8);
  std::vector<Check> checks;
  std::vector<std::string> notes;

  // Oracles first: they do not depend on anything the suites compute.
  const PendulumOracle po(suite_settings("pendulum").beta);
  const double pendulum_mass = po.energy_integral([](double) { return 1.0; });
  const double c_oracle = po.c_momentum();
  std::vector<double> partitioned_oracle;
  for (int d = 0; d <= 6; ++d) partitioned_oracle.push_back(po.partitioned_bound(d));
  const double p6_oracle = partitioned_oracle[6];

  const auto results = verify("all");
  for (const auto& r : results) {
    checks.insert(checks.end(), r.checks.begin(), r.checks.end());
    notes.push_back(r.suite + " suite: " + std::to_string(r.checks.size()) + " checks in " +
                    std::to_string(static_cast<int>(r.seconds)) + " s");
  }

  for (const auto& r : results) {
    const double beta = r.settings.beta;
    if (r.suite == "oscillator") {
      const double h2 = oscillator_moment(2, beta);
      checks.push_back(relative_check(1, r.suite, "oracle <H^2> by quadrature equals 2/beta^2", h2, 2.0 / (beta * beta), 1e-10));
      for (std::size_t o = 0; o < r.settings.observables.size(); ++o) {
        const auto& A = r.settings.observables[o];
        const double oracle = A == "q1^2" ? h2 : A == "H^2" ? oscillator_moment(4, beta) : 0.0;
        if (A == "q1") continue;
        checks.push_back(relative_check(5, r.suite, A + ": level-set norm vs Gamma-moment oracle", *r.norm_AH[o], oracle, 1e-5));
      }
    }
    if (r.suite == "product") {
      // A^H: q1^2 -> E1, q1^2 q2^2 -> E1 E2 / 2, H^2 -> (E1 + E2)^2.
      const double m1 = exp_moment(1, beta), m2 = exp_moment(2, beta), m3 = exp_moment(3, beta), m4 = exp_moment(4, beta);
      const std::map<std::string, double> oracle = {
          {"q1^2", m2},
          {"q1^2*q2^2", m2 * m2 / 4.0},
          {"H^2", m4 + 4.0 * m3 * m1 + 6.0 * m2 * m2 + 4.0 * m1 * m3 + m4}};
      for (std::size_t o = 0; o < r.settings.observables.size(); ++o) {
        const auto& A = r.settings.observables[o];
        checks.push_back(relative_check(5, r.suite, A + ": level-set norm vs Gamma-moment oracle", *r.norm_AH[o], oracle.at(A), 1e-5));
      }
    }
    if (r.suite == "pendulum") {
      checks.push_back(relative_check(6, r.suite, "oracle energy density normalizes to 1", pendulum_mass, 1.0, 1e-10));
      if (const auto* a = find(r, "p1")) {
        const double sigma = 3.0 * a->c_norm->total_error();
        checks.push_back({6, r.suite, "p1: C (norm) vs elliptic-integral oracle",
                          std::fabs(a->c_norm->value - c_oracle) <= sigma, a->c_norm->value, c_oracle, sigma, {}});
        // The plug-in estimate carries a small upward finite-sample bias at high degree, hence 5%.
        for (const auto& b : a->bounds.partitioned) {
          if (b.d < 0 || b.d > 6) continue;
          checks.push_back(relative_check(6, r.suite, "p1: partitioned bound_" + std::to_string(b.d) +
                                                          " within 5% of exact-moment oracle",
                                          b.value, partitioned_oracle[static_cast<std::size_t>(b.d)], 0.05));
        }
      }
      notes.push_back("pendulum oracle: C(p1) = " + std::to_string(c_oracle) + ", exact partitioned bound_6 = " +
                      std::to_string(p6_oracle) + " = " + std::to_string(p6_oracle / c_oracle) + " C");
    }
  }

  int failed_criteria = 0;
  for (int criterion = 1; criterion <= 8; ++criterion) {
    std::size_t total = 0, failed = 0;
    for (const auto& c : checks)
      if (c.criterion == criterion) {
        ++total;
        failed += c.passed ? 0 : 1;
      }
    const bool pass = total > 0 && failed == 0;
    failed_criteria += pass ? 0 : 1;
    std::cout << "criterion " << criterion << ": " << (pass ? "PASS" : "FAIL") << " (" << total - failed << "/" << total
              << " checks)\n";
    for (const auto& c : checks)
      if (c.criterion == criterion && !c.passed)
        std::cout << "    failed [" << c.suite << "] " << c.name << ": measured " << c.measured << ", reference "
                  << c.reference << ", tolerance " << c.tolerance << (c.detail.empty() ? "" : " (" + c.detail + ")")
                  << "\n";
  }
  for (const auto& n : notes) std::cout << "note: " << n << "\n";
  return failed_criteria == 0 ? 0 : 1;
}
