#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "mazur/bounds.hpp"

using namespace mazur;

namespace {

GibbsEnsemble ensemble(const SystemSpec& sys, double beta, std::size_t n, std::uint64_t seed) {
  SamplerOptions o;
  o.n = n;
  o.seed = seed;
  return sample_gibbs(sys, beta, o);
}

const GibbsEnsemble& ho_ensemble() {
  static const GibbsEnsemble ens = ensemble(systems::harmonic_oscillator(), 1.0, 50'000, 21);
  return ens;
}

const GibbsEnsemble& product_ensemble() {
  static const GibbsEnsemble ens = ensemble(systems::two_oscillators(), 1.0, 20'000, 22);
  return ens;
}

std::string monomial_text(const MultiIndex& m) {
  std::string s;
  for (std::size_t j = 0; j < m.n.size(); ++j) {
    if (m.n[j] == 0) continue;
    if (!s.empty()) s += "*";
    s += "H" + std::to_string(j + 1) + "^" + std::to_string(m.n[j]);
  }
  return s.empty() ? "1" : s;
}

/// v^T G^-1 v through a dense LDLT solve.
double reference_bound(const OverlapData& od, int d) {
  const auto m = static_cast<Eigen::Index>(od.basis.count_up_to(d));
  const Eigen::MatrixXd G = od.gram.topLeftCorner(m, m);
  const Eigen::VectorXd v = od.overlaps.head(m);
  return v.dot(G.ldlt().solve(v));
}

}  // namespace

TEST(Basis, DegreeThenLexOrder) {
  const auto b = enumerate_basis(2, 2);
  const std::vector<std::vector<int>> expected = {{0, 0}, {0, 1}, {1, 0}, {0, 2}, {1, 1}, {2, 0}};
  ASSERT_EQ(b.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(b.indices[i].n, expected[i]);
  EXPECT_EQ(b.position(MultiIndex{{1, 1}}), 4u);
  EXPECT_EQ(b.count_up_to(1), 3u);
  EXPECT_THROW(b.position(MultiIndex{{3, 0}}), ValidationError);
}

TEST(Basis, Sizes) {
  EXPECT_EQ(basis_size(1, 6), 7u);
  EXPECT_EQ(basis_size(2, 2), 6u);
  EXPECT_EQ(basis_size(3, 4), 35u);
  EXPECT_EQ(enumerate_basis(3, 4).size(), 35u);
  EXPECT_EQ(enumerate_basis(4, 10).size(), 1001u);
  EXPECT_THROW(enumerate_basis(5, 10), ValidationError);
  EXPECT_THROW(enumerate_basis(1, -1), ValidationError);
  EXPECT_THROW(enumerate_basis(0, 2), ValidationError);
}

TEST(Gram, ConstantEntryAndSymmetry) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2"), 3);
  EXPECT_EQ(od.gram(0, 0), 1.0);
  EXPECT_EQ(od.gram, od.gram.transpose());
  EXPECT_EQ(od.gram.rows(), 10);
  EXPECT_GT(od.gram_stderr(1, 1), 0.0);
  EXPECT_EQ(od.gram_stderr(0, 0), 0.0);
}

TEST(Gram, MatchesOverlapsOfMonomials) {
  const auto sys = systems::two_oscillators();
  const auto& ens = product_ensemble();
  const auto basis = enumerate_basis(2, 2);
  OverlapData g;
  build_gram(ens, sys, basis, g);
  for (std::size_t a = 0; a < basis.size(); ++a) {
    OverlapData o;
    build_overlaps(ens, sys, sys.parse_observable(monomial_text(basis.indices[a])), basis, nullptr, o);
    for (std::size_t b = 0; b < basis.size(); ++b)
      EXPECT_EQ(o.overlaps(static_cast<Eigen::Index>(b)), g.gram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)))
          << basis.indices[a].to_string() << " x " << basis.indices[b].to_string();
  }
}

TEST(Gram, OscillatorMoments) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.parse_observable("q1^2"), 2);
  // <H^a H^b> = (a+b)! at beta = 1.
  EXPECT_NEAR(od.gram(1, 1), 2.0, 4.0 * od.gram_stderr(1, 1));
  EXPECT_NEAR(od.gram(1, 2), 6.0, 4.0 * od.gram_stderr(1, 2));
  EXPECT_NEAR(od.overlaps(0), 1.0, 4.0 * od.overlaps_stderr(0));
  // <q^2 H> = <H^2> because q^2 averages to H on each level set.
  EXPECT_NEAR(od.overlaps(1), 2.0, 4.0 * od.overlaps_stderr(1));
  const auto one = build_overlap_data(ho_ensemble(), sys, Expression::constant(1.0, 1), 1);
  EXPECT_EQ(one.overlaps(0), 1.0);
}

TEST(Gram, PendulumMomentumOverlapsVanish) {
  const auto sys = systems::pendulum();
  const auto ens = ensemble(sys, 1.0, 20'000, 35);
  const auto od = build_overlap_data(ens, sys, sys.parse_observable("p1"), 3);
  for (Eigen::Index n = 0; n < od.overlaps.size(); ++n)
    EXPECT_NEAR(od.overlaps(n), 0.0, 4.0 * od.overlaps_stderr(n)) << "n=" << n;
  const std::vector<int> degrees = {3};
  EXPECT_LT(polynomial_bound(od, 3).value, 3.0 * bootstrap_bounds(od, degrees).plain[0]);
}

TEST(Bounds, AgreesWithDenseSolve) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2*q2^2 + p1"), 3);
  for (int d = 0; d <= 3; ++d) {
    const auto b = polynomial_bound(od, d);
    EXPECT_NEAR(b.value, reference_bound(od, d), 1e-8 * reference_bound(od, d)) << "d=" << d;
  }
}

TEST(Bounds, MonotoneInDegree) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2*q2^2"), 4);
  const std::vector<int> degrees = {0, 1, 2, 3, 4};
  const auto seq = bound_sequence(od, degrees);
  for (std::size_t i = 1; i < seq.plain.size(); ++i) EXPECT_GE(seq.plain[i].value, seq.plain[i - 1].value);
  for (std::size_t i = 0; i < seq.plain.size(); ++i)
    EXPECT_EQ(seq.plain[i].value, polynomial_bound(od, degrees[i]).value);
}

TEST(Bounds, OscillatorQuadraticObservable) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.parse_observable("q1^2"), 3);
  const std::vector<int> degrees = {0, 1, 2, 3};
  const auto errs = bootstrap_bounds(od, degrees);
  const auto seq = bound_sequence(od, degrees);
  // A^H = H, so the bound is <H^2> = 2 from degree 1 on.
  EXPECT_NEAR(seq.plain[0].value, 1.0, 4.0 * errs.plain[0]);
  EXPECT_NEAR(seq.plain[1].value, 2.0, 4.0 * errs.plain[1]);
  EXPECT_NEAR(seq.plain[3].value, seq.plain[1].value, 4.0 * errs.plain[3]);
  const auto strict = mazur_strict_bound(od);
  EXPECT_NEAR(strict.value, 2.0, 4.0 * errs.mazur_strict);
  EXPECT_EQ(errs.failed, 0u);
}

TEST(Bounds, EnergyProjectsOntoItself) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.hamiltonian, 1);
  EXPECT_NEAR(polynomial_bound(od, 1).value, od.gram(1, 1), 1e-9 * od.gram(1, 1));
  EXPECT_NEAR(od.gram(1, 1), 2.0, 4.0 * od.gram_stderr(1, 1));
}

TEST(Bounds, LeadingBlockFactorIsPrefix) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2"), 3);
  const auto full = factorize_gram(od.gram);
  const auto part = factorize_gram(od.gram.topLeftCorner(6, 6));
  ASSERT_EQ(full.jitter, part.jitter);
  EXPECT_EQ(Eigen::MatrixXd(full.L.topLeftCorner(6, 6)), part.L);
}

TEST(Bounds, JitterEscalation) {
  Eigen::MatrixXd G(2, 2);
  G << 1.0, 1.0 + 1e-9, 1.0 + 1e-9, 1.0;
  const auto f = factorize_gram(G);
  EXPECT_GT(f.escalations, 0);
  EXPECT_GT(f.jitter, 1e-12);
  EXPECT_LE(f.jitter, 1e-7);

  Eigen::MatrixXd bad(2, 2);
  bad << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(factorize_gram(bad), NumericError);
  Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 2);
  EXPECT_THROW(factorize_gram(zero), NumericError);
}

TEST(Bounds, OrthogonalizedBasisGivesSameBound) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2*q2^2"), 3);
  const auto ortho = orthogonalize(od, 3);
  const auto m = ortho.data.gram.rows();
  EXPECT_LT((ortho.data.gram - Eigen::MatrixXd::Identity(m, m)).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_NEAR(condition_number(ortho.data.gram), 1.0, 1e-6);
  const auto again = orthogonalize(ortho.data, 3);
  EXPECT_LT((again.transform - Eigen::MatrixXd::Identity(m, m)).cwiseAbs().maxCoeff(), 1e-6);
  for (int d = 0; d <= 3; ++d) {
    const double raw = polynomial_bound(od, d).value;
    EXPECT_NEAR(polynomial_bound(ortho.data, d).value, raw, 1e-8 * std::max(raw, 1.0)) << "d=" << d;
  }
}

TEST(Partitioned, SingleCellEqualsPlain) {
  const auto sys = systems::pendulum();
  const auto ens = ensemble(sys, 1.0, 5000, 31);
  Labeler all{{"all"}, {parse_predicate("H > -10", 1, sys.macros())}};
  const auto od = build_overlap_data(ens, sys, sys.parse_observable("p1^2 + cos(q1)"), 3, &all);
  for (int d = 0; d <= 3; ++d) EXPECT_EQ(partitioned_bound(od, d).value, polynomial_bound(od, d).value);
}

TEST(Partitioned, CellOverlapsSumToTotal) {
  const auto sys = systems::pendulum();
  const auto ens = ensemble(sys, 1.0, 5000, 32);
  Labeler lab{{"plus", "minus", "lib"},
              {parse_predicate("p1 > 0 && H > 1", 1, sys.macros()), parse_predicate("p1 < 0 && H > 1", 1, sys.macros()),
               parse_predicate("H <= 1", 1, sys.macros())}};
  const auto od = build_overlap_data(ens, sys, sys.parse_observable("p1"), 4, &lab);
  ASSERT_EQ(od.per_cell.size(), 3u);
  Eigen::VectorXd sum = od.per_cell[0] + od.per_cell[1] + od.per_cell[2];
  EXPECT_LT((sum - od.overlaps).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(od.cell_counts[0] + od.cell_counts[1] + od.cell_counts[2], ens.size());
  const auto plain = polynomial_bound(od, 4);
  const auto part = partitioned_bound(od, 4);
  EXPECT_GT(part.value, plain.value);
  ASSERT_EQ(part.per_cell.size(), 3u);
  EXPECT_NEAR(part.per_cell[0] + part.per_cell[1] + part.per_cell[2], part.value, 1e-12);
}

TEST(Partitioned, EmptyAndUnlabeledCellsWarn) {
  const auto sys = systems::pendulum();
  const auto ens = ensemble(sys, 1.0, 2000, 33);
  Labeler lab{{"never", "positive"}, {parse_predicate("H < -5", 1, sys.macros()), parse_predicate("p1 > 0", 1)}};
  const auto od = build_overlap_data(ens, sys, sys.parse_observable("p1"), 2, &lab);
  ASSERT_GE(od.warnings.size(), 2u);
  EXPECT_NE(od.warnings[0].find("never"), std::string::npos);
  EXPECT_NE(od.warnings[1].find("match no labeler cell"), std::string::npos);
  EXPECT_EQ(od.cell_counts[0], 0u);
  EXPECT_EQ(partitioned_bound(od, 2).per_cell[0], 0.0);
}

TEST(Saturation, PolynomialObservableSaturates) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.parse_observable("H^3"), 5);
  const auto rep = saturation_diagnostic(od, 3, 5);
  EXPECT_EQ(rep.verdict, "saturated");
  EXPECT_TRUE(rep.consistent_with_saturation);
  EXPECT_EQ(rep.entries.size(), 2u);
  EXPECT_EQ(rep.entries[0].index.n, std::vector<int>{4});

  const auto low = saturation_diagnostic(od, 1, 3);
  EXPECT_EQ(low.verdict, "not_saturated");
  EXPECT_GT(low.residual, 0.0);
}

TEST(Saturation, PendulumMomentumHasZeroProjection) {
  const auto sys = systems::pendulum();
  const auto ens = ensemble(sys, 1.0, 20'000, 34);
  const auto od = build_overlap_data(ens, sys, sys.parse_observable("p1"), 4);
  const auto rep = saturation_diagnostic(od, 2, 4, stats::MeanError{0.41, 0.01});
  EXPECT_EQ(rep.verdict, "zero_projection");
  ASSERT_TRUE(rep.c_hat.has_value());
}

TEST(Saturation, ProjectionBelowC) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.parse_observable("H^3"), 5);
  const auto rep = saturation_diagnostic(od, 3, 5, stats::MeanError{od.overlaps(3) * 10.0, 1.0});
  EXPECT_EQ(rep.verdict, "saturated_projection_below_C");
  EXPECT_THROW(saturation_diagnostic(od, 3, 3), ValidationError);
}

TEST(Degenerate, ZeroObservable) {
  const auto sys = systems::harmonic_oscillator();
  const auto od = build_overlap_data(ho_ensemble(), sys, sys.parse_observable("0*q1"), 2);
  EXPECT_TRUE(od.degenerate_zero);
  const std::vector<int> degrees = {0, 1, 2};
  for (const auto& b : bound_sequence(od, degrees).plain) EXPECT_EQ(b.value, 0.0);
  EXPECT_EQ(saturation_diagnostic(od, 1, 2).verdict, "zero_observable");
}

TEST(Bootstrap, DeterministicAcrossThreadCounts) {
  const auto sys = systems::two_oscillators();
  const auto od = build_overlap_data(product_ensemble(), sys, sys.parse_observable("q1^2"), 2);
  const std::vector<int> degrees = {1, 2};
  BootstrapOptions o;
  o.resamples = 40;
  set_thread_count(1);
  const auto a = bootstrap_bounds(od, degrees, o);
  set_thread_count(3);
  const auto b = bootstrap_bounds(od, degrees, o);
  set_thread_count(0);
  EXPECT_EQ(a.plain, b.plain);
  EXPECT_EQ(a.whitened, b.whitened);
  EXPECT_GT(a.plain[1], 0.0);
  o.seed = 7;
  EXPECT_NE(bootstrap_bounds(od, degrees, o).plain, a.plain);
}

TEST(Bounds, OverlapDataDeterministicAcrossThreadCounts) {
  const auto sys = systems::two_oscillators();
  const auto A = sys.parse_observable("q1^2*q2^2");
  set_thread_count(1);
  const auto a = build_overlap_data(product_ensemble(), sys, A, 3);
  set_thread_count(4);
  const auto b = build_overlap_data(product_ensemble(), sys, A, 3);
  set_thread_count(0);
  EXPECT_EQ(a.gram, b.gram);
  EXPECT_EQ(a.overlaps, b.overlaps);
}
