#include <cmath>
#include <numbers>

#include <boost/math/special_functions/ellint_1.hpp>
#include <gtest/gtest.h>

#include "mazur/correlation.hpp"

using namespace mazur;

namespace {

GibbsEnsemble small_ensemble(const SystemSpec& sys, std::size_t n, std::uint64_t seed) {
  SamplerOptions o;
  o.n = n;
  o.seed = seed;
  return sample_gibbs(sys, 1.0, o);
}

/// Rotation period of the pendulum above the separatrix, from the complete elliptic integral.
double rotation_period(double E) {
  const double k = std::sqrt(2.0 / (E + 1.0));
  return 4.0 * boost::math::ellint_1(k) / std::sqrt(2.0 * (E + 1.0));
}

}  // namespace

TEST(Correlation, OscillatorOrbitalAverage) {
  const auto sys = systems::harmonic_oscillator();
  const PhaseState m({0.6}, {-0.8});  // E = 0.5
  // q^2 averages to E over whole periods of the explicit flow.
  EXPECT_NEAR(orbital_average(sys, sys.parse_observable("q1^2"), m, 20 * std::numbers::pi, 1e-3), 0.5, 1e-4);
  EXPECT_NEAR(orbital_average(sys, sys.parse_observable("q1"), m, 20 * std::numbers::pi, 1e-3), 0.0, 1e-4);
}

TEST(Correlation, PendulumRotationAverage) {
  const auto sys = systems::pendulum();
  const double E = 2.125;
  const double omega = 2.0 * std::numbers::pi / rotation_period(E);
  EXPECT_NEAR(omega, 1.9681177518247777, 1e-10);
  EXPECT_NEAR(orbital_average(sys, sys.parse_observable("p1"), PhaseState({0.0}, {2.5}), 2000.0, 1e-3), omega, 1e-3);
}

TEST(Correlation, ConstantObservable) {
  const auto sys = systems::harmonic_oscillator();
  const auto ens = small_ensemble(sys, 500, 2);
  CorrelationOptions o;
  o.T = 5.0;
  const auto c = estimate_C_norm(sys, Expression::constant(3.0, 1), ens, o);
  EXPECT_DOUBLE_EQ(c.value, 9.0);
  EXPECT_DOUBLE_EQ(estimate_C_direct(sys, Expression::constant(3.0, 1), ens, o).value, 9.0);
}

TEST(Correlation, EstimatorsAgreeOnOscillator) {
  const auto sys = systems::harmonic_oscillator();
  const auto ens = small_ensemble(sys, 20'000, 3);
  CorrelationOptions o;
  o.T = 8 * std::numbers::pi;
  o.dt = 1e-2;
  o.max_samples = 5000;
  const Expression A = sys.parse_observable("q1^2");
  const std::vector<Expression> obs = {A, sys.parse_observable("q1")};
  const auto run = run_trajectories(sys, obs, ens, o);
  const auto [norm, direct] = estimates_from(run, 0, A);
  EXPECT_NEAR(norm.value, 2.0, 4.0 * norm.std_error);
  EXPECT_NEAR(norm.value, direct.value, 3.0 * std::hypot(norm.total_error(), direct.total_error()));
  EXPECT_EQ(norm.n_ensemble, 5000u);
  const auto [zn, zd] = estimates_from(run, 1, obs[1]);
  EXPECT_LT(std::fabs(zn.value), 1e-3);
  EXPECT_LT(std::fabs(zd.value), 1e-3);
}

TEST(Correlation, DeterministicAcrossThreadCounts) {
  const auto sys = systems::pendulum();
  const auto ens = small_ensemble(sys, 400, 5);
  CorrelationOptions o;
  o.T = 10.0;
  const Expression A = sys.parse_observable("p1");
  set_thread_count(1);
  const auto a = run_trajectories(sys, std::span<const Expression>(&A, 1), ens, o);
  set_thread_count(3);
  const auto b = run_trajectories(sys, std::span<const Expression>(&A, 1), ens, o);
  set_thread_count(0);
  EXPECT_EQ(a.correlation_sum, b.correlation_sum);
  EXPECT_EQ(a.average, b.average);
}

TEST(Correlation, OrbitalAverageIsLinear) {
  const auto sys = systems::pendulum();
  const PhaseState m({0.4}, {0.9});
  const double T = 30.0, dt = 1e-2;
  const double a = orbital_average(sys, sys.parse_observable("p1^2"), m, T, dt);
  const double b = orbital_average(sys, sys.parse_observable("cos(q1)"), m, T, dt);
  const double ab = orbital_average(sys, sys.parse_observable("2*p1^2 - 3*cos(q1)"), m, T, dt);
  EXPECT_NEAR(ab, 2 * a - 3 * b, 1e-12);
}

TEST(Correlation, LabelerInvarianceCheck) {
  const auto sys = systems::pendulum();
  const auto ens = small_ensemble(sys, 2000, 6);
  CorrelationOptions o;
  o.T = 20.0;
  Labeler energy{{"high", "low"},
                 {parse_predicate("H > 1", 1, sys.macros()), parse_predicate("H <= 1", 1, sys.macros())}};
  EXPECT_LE(labeler_violations(sys, energy, ens, o), 5u);
  Labeler sign{{"q+", "q-"}, {parse_predicate("q1 > 0", 1), parse_predicate("q1 <= 0", 1)}};
  EXPECT_GT(labeler_violations(sys, sign, ens, o), 100u);
}

TEST(Correlation, Validation) {
  const auto sys = systems::harmonic_oscillator();
  const auto ens = small_ensemble(sys, 100, 1);
  CorrelationOptions o;
  o.T = 0.0;
  EXPECT_THROW(estimate_C_norm(sys, sys.parse_observable("q1"), ens, o), ValidationError);
  o.T = 1e9;
  o.dt = 1e-3;
  EXPECT_THROW(estimate_C_norm(sys, sys.parse_observable("q1"), ens, o), ValidationError);
  EXPECT_THROW(estimate_C_norm(systems::two_oscillators(), sys.parse_observable("q1"), ens, {}), ValidationError);
}

TEST(Correlation, OrbitalAverageIsProjector) {
  // Re-averaging m -> orbital_average(A, m, T) along the orbit leaves it unchanged up to finite-T error.
  const auto sys = systems::pendulum();
  const Expression A = sys.parse_observable("p1^2 + cos(q1)");
  const double T = 2000.0, dt = 1e-2;
  PhaseState x({0.3}, {1.9});
  // On the orbit A = 2E + 3 cos(q1), so a partial period shifts the average by at most 6 P / T.
  const double E = sys.hamiltonian(x.flat());
  const double period = 4.0 * boost::math::ellint_1(std::sqrt((E + 1.0) / 2.0));
  const double tolerance = 6.0 * period / T;
  const double once = orbital_average(sys, A, x, T, dt);
  Leapfrog lf(sys, dt);
  double twice = 0.0;
  const int points = 20;
  for (int j = 0; j < points; ++j) {
    twice += orbital_average(sys, A, x, T, dt) / points;
    for (int s = 0; s < 137; ++s) lf.step(x.flat(), static_cast<std::size_t>(j * 137 + s + 1));
  }
  EXPECT_NEAR(twice, once, tolerance);
}

TEST(Correlation, FiniteHorizonBiasDecreases) {
  const auto sys = systems::pendulum();
  const auto ens = small_ensemble(sys, 4000, 9);
  const Expression A = sys.parse_observable("p1");
  CorrelationOptions o;
  o.dt = 2e-2;
  o.max_samples = 1500;
  o.T = 40.0;
  const auto shorter = estimate_C_norm(sys, A, ens, o);
  o.T = 80.0;
  const auto longer = estimate_C_norm(sys, A, ens, o);
  EXPECT_GE(shorter.value, longer.value - 3.0 * std::hypot(shorter.std_error, longer.std_error));
  EXPECT_GE(longer.value, 0.0);
}
