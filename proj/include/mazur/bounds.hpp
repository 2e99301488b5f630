#pragma once

// Lower bounds on C(A) from conserved quantities H_1..H_k:
//
//   C(A) >= sum_{|l|,|n| <= d} <A, h_l> (G^-1)_{l,n} <A, h_n>,   h_n = H_1^n_1 ... H_k^n_k,
//
// with G_{l,n} = <h_l, h_n>_beta, and its partition-refined form where A is replaced by
// A restricted to each cell of a flow-invariant partition and the cell terms are summed.
//
// Monomials are ordered by degree, then lexicographically, so the degree <= d basis is a
// leading block. One Cholesky factor of the equilibrated Gram serves every d: with
// w = L^-1 S v the bound for degree d is the partial sum of w_i^2 over the leading block,
// which makes the sequence non-decreasing in d in floating point as well.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mazur/correlation.hpp"
#include "mazur/dynamics.hpp"
#include "mazur/error.hpp"
#include "mazur/expr.hpp"
#include "mazur/gibbs.hpp"
#include "mazur/parallel.hpp"
#include "mazur/stats.hpp"

namespace mazur {

struct MultiIndex {
  std::vector<int> n;

  int degree() const {
    int d = 0;
    for (int v : n) d += v;
    return d;
  }

  /// Degree first, then lexicographic.
  friend bool operator<(const MultiIndex& a, const MultiIndex& b) {
    const int da = a.degree(), db = b.degree();
    if (da != db) return da < db;
    return a.n < b.n;
  }
  friend bool operator==(const MultiIndex&, const MultiIndex&) = default;

  std::string to_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < n.size(); ++i) s += (i ? "," : "") + std::to_string(n[i]);
    return s + ")";
  }
};

struct MonomialBasis {
  int k = 1;
  int d = 0;
  std::vector<MultiIndex> indices;

  std::size_t size() const noexcept { return indices.size(); }

  /// Number of monomials of degree <= deg, i.e. C(k + deg, k).
  std::size_t count_up_to(int deg) const {
    std::size_t c = 0;
    for (const auto& m : indices)
      if (m.degree() <= deg) ++c;
    return c;
  }

  std::size_t position(const MultiIndex& m) const {
    auto it = std::lower_bound(indices.begin(), indices.end(), m);
    if (it == indices.end() || !(*it == m)) throw ValidationError("multi-index " + m.to_string() + " not in basis");
    return static_cast<std::size_t>(it - indices.begin());
  }
};

/// C(k + d, k), saturating at SIZE_MAX.
inline std::size_t basis_size(int k, int d) {
  long double c = 1.0L;
  for (int i = 1; i <= k; ++i) c = c * static_cast<long double>(d + i) / static_cast<long double>(i);
  if (c > static_cast<long double>(std::numeric_limits<std::size_t>::max() / 2))
    return std::numeric_limits<std::size_t>::max();
  return static_cast<std::size_t>(std::llround(static_cast<double>(c)));
}

inline MonomialBasis enumerate_basis(int k, int d, std::size_t cap = 2000) {
  if (k < 1) throw ValidationError("number of conserved quantities k must be >= 1");
  if (d < 0) throw ValidationError("degree d must be >= 0");
  const std::size_t nu = basis_size(k, d);
  if (nu > cap)
    throw ValidationError("basis size C(k+d, k) = " + std::to_string(nu) + " exceeds the cap " +
                          std::to_string(cap));
  MonomialBasis basis{k, d, {}};
  basis.indices.reserve(nu);
  std::vector<int> cur(static_cast<std::size_t>(k), 0);
  // All compositions of each degree into k parts, in lexicographic order.
  for (int deg = 0; deg <= d; ++deg) {
    std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
      if (pos + 1 == cur.size()) {
        cur[pos] = left;
        basis.indices.push_back({cur});
        return;
      }
      for (int v = 0; v <= left; ++v) {
        cur[pos] = v;
        rec(pos + 1, left - v);
      }
    };
    rec(0, deg);
  }
  return basis;
}

// ---------------------------------------------------------------------------
// Estimation of Gram matrix and overlaps

namespace detail {

/// Values of all monomials of `basis` at one point, from cached powers of H_1..H_k.
struct MonomialEvaluator {
  const SystemSpec* sys;
  const MonomialBasis* basis;
  int max_power;
  std::vector<double> h, powers;

  MonomialEvaluator(const SystemSpec& s, const MonomialBasis& b, int max_pow)
      : sys(&s), basis(&b), max_power(max_pow), h(s.k()), powers(s.k() * static_cast<std::size_t>(max_pow + 1)) {}

  void operator()(std::span<const double> x, std::span<double> out) {
    const std::size_t k = sys->k();
    const auto stride = static_cast<std::size_t>(max_power + 1);
    for (std::size_t j = 0; j < k; ++j) {
      h[j] = sys->conserved[j](x);
      powers[j * stride] = 1.0;
      for (int e = 1; e <= max_power; ++e)
        powers[j * stride + static_cast<std::size_t>(e)] = powers[j * stride + static_cast<std::size_t>(e - 1)] * h[j];
    }
    for (std::size_t i = 0; i < basis->size(); ++i) {
      const auto& n = basis->indices[i].n;
      double v = 1.0;
      for (std::size_t j = 0; j < k; ++j) v *= powers[j * stride + static_cast<std::size_t>(n[j])];
      if (!std::isfinite(v))
        throw NumericError("monomial " + basis->indices[i].to_string() + " is not finite");
      out[i] = v;
    }
  }
};

/// Calls fn(begin, end, acc) on fixed chunks of samples; chunk sums are reduced in chunk order.
template <class Fn>
std::vector<double> ordered_sum(std::size_t n, std::size_t width, Fn&& fn) {
  constexpr std::size_t chunk = 1024;
  const std::size_t n_chunks = (n + chunk - 1) / chunk;
  std::vector<std::vector<double>> partial(n_chunks, std::vector<double>(width, 0.0));
  parallel_chunks(n, chunk, [&](std::size_t c, std::size_t b, std::size_t e) {
    fn(b, e, std::span<double>(partial[c]));
  });
  std::vector<double> total(width, 0.0);
  for (const auto& p : partial)
    for (std::size_t w = 0; w < width; ++w) total[w] += p[w];
  return total;
}

}  // namespace detail

/// Per-block sample sums used for standard errors and the block bootstrap.
struct MomentBlocks {
  std::size_t block_length = 10;
  MonomialBasis moment_basis;             ///< degree <= 2d
  std::vector<std::size_t> counts;        ///< samples per block
  Eigen::MatrixXd moments;                ///< blocks x nu(2d): sums of h_n
  Eigen::MatrixXd overlaps;               ///< blocks x nu(d): sums of A h_n
  std::vector<Eigen::MatrixXd> cells;     ///< per cell: blocks x nu(d)
};

struct OverlapData {
  MonomialBasis basis;
  std::size_t n_samples = 0;
  Eigen::MatrixXd gram;
  Eigen::MatrixXd gram_stderr;
  Eigen::VectorXd overlaps;
  Eigen::VectorXd overlaps_stderr;
  std::vector<std::string> cell_names;
  std::vector<std::size_t> cell_counts;
  std::vector<Eigen::VectorXd> per_cell;
  std::vector<Eigen::VectorXd> per_cell_stderr;
  bool degenerate_zero = false;  ///< A vanishes on every sample
  std::shared_ptr<const MomentBlocks> blocks;
  std::vector<std::string> warnings;

  bool has_cells() const noexcept { return !per_cell.empty(); }
};

/// Gram matrix G(a, b) = mean over samples of h_a(m) h_b(m).
inline void build_gram(const GibbsEnsemble& ens, const SystemSpec& sys, const MonomialBasis& basis,
                       OverlapData& od) {
  if (ens.r != sys.r) throw ValidationError("ensemble does not match system dimension");
  if (static_cast<std::size_t>(basis.k) != sys.k())
    throw ValidationError("basis k does not match the number of conserved quantities");
  const std::size_t nu = basis.size();
  const std::size_t n = ens.size();
  auto sums = detail::ordered_sum(n, nu * (nu + 1) / 2, [&](std::size_t b0, std::size_t b1, std::span<double> acc) {
    detail::MonomialEvaluator ev(sys, basis, basis.d);
    std::vector<double> h(nu);
    for (std::size_t i = b0; i < b1; ++i) {
      ev(ens.sample(i), h);
      std::size_t p = 0;
      for (std::size_t a = 0; a < nu; ++a)
        for (std::size_t b = a; b < nu; ++b) acc[p++] += h[a] * h[b];
    }
  });
  od.basis = basis;
  od.n_samples = n;
  od.gram.resize(static_cast<Eigen::Index>(nu), static_cast<Eigen::Index>(nu));
  std::size_t p = 0;
  for (std::size_t a = 0; a < nu; ++a)
    for (std::size_t b = a; b < nu; ++b) {
      const double g = sums[p++] / static_cast<double>(n);
      od.gram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = g;
      od.gram(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = g;
    }
}

/// Overlaps v_n = mean of A(m) h_n(m); with a labeler also the per-cell restrictions
/// v_{i,n} = (1/N) sum over samples in cell i of A(m) h_n(m), so that sum_i v_i = v.
inline void build_overlaps(const GibbsEnsemble& ens, const SystemSpec& sys, const Expression& A,
                           const MonomialBasis& basis, const Labeler* labeler, OverlapData& od) {
  if (ens.r != sys.r || A.dims() != sys.r) throw ValidationError("observable/ensemble do not match system");
  const std::size_t nu = basis.size();
  const std::size_t n = ens.size();
  const std::size_t n_cells = labeler ? labeler->size() : 0;
  const std::size_t width = nu * (1 + n_cells) + n_cells + 2;  // + cell counts, unlabeled, nonzero A
  auto sums = detail::ordered_sum(n, width, [&](std::size_t b0, std::size_t b1, std::span<double> acc) {
    detail::MonomialEvaluator ev(sys, basis, basis.d);
    std::vector<double> h(nu);
    for (std::size_t i = b0; i < b1; ++i) {
      auto x = ens.sample(i);
      ev(x, h);
      const double a = A(x);
      if (!std::isfinite(a)) throw NumericError("observable is not finite at sample " + std::to_string(i));
      for (std::size_t j = 0; j < nu; ++j) acc[j] += a * h[j];
      if (a != 0.0) acc[width - 1] += 1.0;
      if (labeler) {
        const std::size_t cell = (*labeler)(x);
        if (cell < n_cells) {
          for (std::size_t j = 0; j < nu; ++j) acc[nu * (1 + cell) + j] += a * h[j];
          acc[nu * (1 + n_cells) + cell] += 1.0;
        } else {
          acc[width - 2] += 1.0;
        }
      }
    }
  });
  const auto nd = static_cast<double>(n);
  od.basis = basis;
  od.n_samples = n;
  od.overlaps = Eigen::VectorXd(static_cast<Eigen::Index>(nu));
  for (std::size_t j = 0; j < nu; ++j) od.overlaps(static_cast<Eigen::Index>(j)) = sums[j] / nd;
  od.degenerate_zero = sums[width - 1] == 0.0;
  if (od.degenerate_zero) od.warnings.push_back("observable vanishes on every sample; all bounds are 0");

  od.per_cell.clear();
  od.cell_counts.clear();
  od.cell_names.clear();
  if (labeler) {
    od.cell_names = labeler->names;
    for (std::size_t c = 0; c < n_cells; ++c) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(nu));
      for (std::size_t j = 0; j < nu; ++j) v(static_cast<Eigen::Index>(j)) = sums[nu * (1 + c) + j] / nd;
      od.per_cell.push_back(v);
      const auto count = static_cast<std::size_t>(sums[nu * (1 + n_cells) + c]);
      od.cell_counts.push_back(count);
      if (count == 0) od.warnings.push_back("cell '" + labeler->names[c] + "' contains no samples");
    }
    const auto unlabeled = static_cast<std::size_t>(sums[width - 2]);
    if (unlabeled > 0)
      od.warnings.push_back(std::to_string(unlabeled) +
                            " samples match no labeler cell; per-cell overlaps do not sum to the total");
  }
}

namespace detail {

/// Block sums of moments (degree <= 2d), overlaps and per-cell overlaps.
inline std::shared_ptr<MomentBlocks> build_blocks(const GibbsEnsemble& ens, const SystemSpec& sys,
                                                  const Expression& A, const MonomialBasis& basis,
                                                  const Labeler* labeler, std::size_t block_length) {
  auto blocks = std::make_shared<MomentBlocks>();
  blocks->block_length = std::max<std::size_t>(1, block_length);
  blocks->moment_basis = enumerate_basis(basis.k, 2 * basis.d, std::numeric_limits<std::size_t>::max());
  const std::size_t n = ens.size();
  const std::size_t n_blocks = (n + blocks->block_length - 1) / blocks->block_length;
  const std::size_t nu = basis.size(), nu2 = blocks->moment_basis.size();
  const std::size_t n_cells = labeler ? labeler->size() : 0;
  blocks->counts.assign(n_blocks, 0);
  blocks->moments = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_blocks), static_cast<Eigen::Index>(nu2));
  blocks->overlaps = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_blocks), static_cast<Eigen::Index>(nu));
  blocks->cells.assign(n_cells, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_blocks), static_cast<Eigen::Index>(nu)));

  parallel_chunks(n_blocks, 8, [&](std::size_t, std::size_t b0, std::size_t b1) {
    MonomialEvaluator ev(sys, blocks->moment_basis, 2 * basis.d);
    std::vector<double> h(nu2);
    for (std::size_t b = b0; b < b1; ++b) {
      const auto bi = static_cast<Eigen::Index>(b);
      for (std::size_t i = b * blocks->block_length; i < std::min(n, (b + 1) * blocks->block_length); ++i) {
        auto x = ens.sample(i);
        ev(x, h);
        const double a = A(x);
        for (std::size_t j = 0; j < nu2; ++j) blocks->moments(bi, static_cast<Eigen::Index>(j)) += h[j];
        // The degree <= d basis is the leading part of the degree <= 2d basis.
        for (std::size_t j = 0; j < nu; ++j) blocks->overlaps(bi, static_cast<Eigen::Index>(j)) += a * h[j];
        if (labeler) {
          const std::size_t cell = (*labeler)(x);
          if (cell < n_cells)
            for (std::size_t j = 0; j < nu; ++j) blocks->cells[cell](bi, static_cast<Eigen::Index>(j)) += a * h[j];
        }
        ++blocks->counts[b];
      }
    }
  });
  return blocks;
}

inline Eigen::MatrixXd block_mean_stderr(const Eigen::MatrixXd& sums, const std::vector<std::size_t>& counts) {
  // Batch-means error using the full blocks as batches.
  const std::size_t len = counts.empty() ? 1 : counts.front();
  std::vector<Eigen::Index> full;
  for (std::size_t b = 0; b < counts.size(); ++b)
    if (counts[b] == len) full.push_back(static_cast<Eigen::Index>(b));
  Eigen::VectorXd out = Eigen::VectorXd::Zero(sums.cols());
  if (full.size() < 2) return out;
  for (Eigen::Index c = 0; c < sums.cols(); ++c) {
    double m = 0.0;
    for (auto b : full) m += sums(b, c);
    m /= static_cast<double>(full.size());
    double v = 0.0;
    for (auto b : full) v += (sums(b, c) - m) * (sums(b, c) - m);
    v /= static_cast<double>(full.size() - 1);
    out(c) = std::sqrt(v / static_cast<double>(full.size())) / static_cast<double>(len);
  }
  return out;
}

}  // namespace detail

struct OverlapOptions {
  std::size_t block_length = 10;
  std::size_t basis_cap = 2000;
};

/// Gram, overlaps, optional per-cell overlaps, standard errors and bootstrap blocks up to degree d.
inline OverlapData build_overlap_data(const GibbsEnsemble& ens, const SystemSpec& sys, const Expression& A,
                                      int d, const Labeler* labeler = nullptr, const OverlapOptions& opts = {}) {
  const MonomialBasis basis = enumerate_basis(static_cast<int>(sys.k()), d, opts.basis_cap);
  OverlapData od;
  build_gram(ens, sys, basis, od);
  build_overlaps(ens, sys, A, basis, labeler, od);
  auto blocks = detail::build_blocks(ens, sys, A, basis, labeler, opts.block_length);

  const auto moment_se = detail::block_mean_stderr(blocks->moments, blocks->counts);
  const auto nu = static_cast<Eigen::Index>(basis.size());
  od.gram_stderr.resize(nu, nu);
  for (Eigen::Index a = 0; a < nu; ++a)
    for (Eigen::Index b = 0; b < nu; ++b) {
      MultiIndex sum = basis.indices[static_cast<std::size_t>(a)];
      for (std::size_t j = 0; j < sum.n.size(); ++j) sum.n[j] += basis.indices[static_cast<std::size_t>(b)].n[j];
      od.gram_stderr(a, b) = moment_se(static_cast<Eigen::Index>(blocks->moment_basis.position(sum)));
    }
  od.overlaps_stderr = detail::block_mean_stderr(blocks->overlaps, blocks->counts);
  for (const auto& cell : blocks->cells) od.per_cell_stderr.push_back(detail::block_mean_stderr(cell, blocks->counts));
  od.blocks = std::move(blocks);
  return od;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Cholesky factor of the equilibrated, jittered Gram S G S + jitter I.
struct GramFactor {
  Eigen::MatrixXd L;
  Eigen::VectorXd scale;  ///< S = diag(1 / sqrt(G_ii))
  double jitter = 0.0;
  int escalations = 0;
};

/// Row-by-row Cholesky; row i depends only on rows <= i, so the factor of a leading
/// block is bitwise the leading block of the factor. Returns false on a non-positive pivot.
inline bool cholesky_in_place(const Eigen::MatrixXd& A, Eigen::MatrixXd& L) {
  const Eigen::Index n = A.rows();
  L = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      double s = A(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
      if (i == j) {
        if (!(s > 1e-14 * std::max(1.0, A(i, i)))) return false;
        L(i, i) = std::sqrt(s);
      } else {
        L(i, j) = s / L(j, j);
      }
    }
  }
  return true;
}

/// Factorizes G with relative diagonal jitter starting at `jitter`, escalating x10 up to `max_jitter`.
inline GramFactor factorize_gram(const Eigen::MatrixXd& G, double jitter = 1e-12, double max_jitter = 1e-4) {
  const Eigen::Index n = G.rows();
  GramFactor f;
  f.scale.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(G(i, i) > 0.0) || !std::isfinite(G(i, i)))
      throw NumericError("Gram matrix has a non-positive diagonal entry at index " + std::to_string(i));
    f.scale(i) = 1.0 / std::sqrt(G(i, i));
  }
  Eigen::MatrixXd scaled = f.scale.asDiagonal() * G * f.scale.asDiagonal();
  double j = std::max(0.0, jitter);
  for (;;) {
    Eigen::MatrixXd A = scaled;
    A.diagonal().array() += j;
    if (cholesky_in_place(A, f.L)) {
      f.jitter = j;
      return f;
    }
    j = j > 0.0 ? j * 10.0 : 1e-12;
    ++f.escalations;
    if (j > max_jitter * (1.0 + 1e-9))
      throw NumericError("Gram matrix factorization failed even with relative jitter " +
                         std::to_string(max_jitter) + "; orthogonalize the basis or lower the degree");
  }
}

/// w = L^-1 S v by forward substitution.
inline Eigen::VectorXd whiten(const GramFactor& f, const Eigen::VectorXd& v) {
  const Eigen::Index n = f.L.rows();
  Eigen::VectorXd w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = f.scale(i) * v(i);
    for (Eigen::Index k = 0; k < i; ++k) s -= f.L(i, k) * w(k);
    w(i) = s / f.L(i, i);
  }
  return w;
}

inline double condition_number(const Eigen::MatrixXd& G) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

// ---------------------------------------------------------------------------
// Bounds

struct BoundResult {
  int d = 0;
  double value = 0.0;
  double std_error = 0.0;  ///< filled by bootstrap
  double condition_number = 0.0;
  double scaled_condition_number = 0.0;
  double jitter = 0.0;
  int escalations = 0;
  std::vector<double> per_cell;  ///< partitioned bounds only
};

namespace detail {

inline std::size_t leading_size(const OverlapData& od, int d) {
  if (d < 0 || d > od.basis.d)
    throw ValidationError("degree " + std::to_string(d) + " is not covered by the overlap data (max " +
                          std::to_string(od.basis.d) + ")");
  return od.basis.count_up_to(d);
}

inline double partial_square_sum(const Eigen::VectorXd& w, std::size_t m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i) s += w(static_cast<Eigen::Index>(i)) * w(static_cast<Eigen::Index>(i));
  return s;
}

inline void fill_conditioning(const OverlapData& od, std::size_t m, const GramFactor& f, BoundResult& r) {
  const auto mi = static_cast<Eigen::Index>(m);
  const Eigen::MatrixXd block = od.gram.topLeftCorner(mi, mi);
  r.condition_number = condition_number(block);
  const Eigen::VectorXd s = f.scale.head(mi);
  r.scaled_condition_number = condition_number(s.asDiagonal() * block * s.asDiagonal());
  r.jitter = f.jitter;
  r.escalations = f.escalations;
}

}  // namespace detail

/// v^T G^-1 v over the degree <= d block.
inline BoundResult polynomial_bound(const OverlapData& od, int d, double jitter = 1e-12) {
  const std::size_t m = detail::leading_size(od, d);
  const auto mi = static_cast<Eigen::Index>(m);
  BoundResult r;
  r.d = d;
  const GramFactor f = factorize_gram(od.gram.topLeftCorner(mi, mi), jitter);
  detail::fill_conditioning(od, m, f, r);
  if (!od.degenerate_zero) r.value = detail::partial_square_sum(whiten(f, od.overlaps.head(mi)), m);
  return r;
}

/// Sum over cells of v_i^T G^-1 v_i over the degree <= d block.
inline BoundResult partitioned_bound(const OverlapData& od, int d, double jitter = 1e-12) {
  if (!od.has_cells()) throw ValidationError("partitioned_bound requires per-cell overlaps (labeler)");
  const std::size_t m = detail::leading_size(od, d);
  const auto mi = static_cast<Eigen::Index>(m);
  BoundResult r;
  r.d = d;
  const GramFactor f = factorize_gram(od.gram.topLeftCorner(mi, mi), jitter);
  detail::fill_conditioning(od, m, f, r);
  for (const auto& v : od.per_cell) {
    const double c = od.degenerate_zero ? 0.0 : detail::partial_square_sum(whiten(f, v.head(mi)), m);
    r.per_cell.push_back(c);
    r.value += c;
  }
  return r;
}

/// Bounds for several degrees from one factorization of the largest block.
/// The values are non-decreasing in d.
struct BoundSequence {
  std::vector<BoundResult> plain;
  std::vector<BoundResult> partitioned;  ///< empty without cells
};

inline BoundSequence bound_sequence(const OverlapData& od, std::span<const int> degrees, double jitter = 1e-12) {
  BoundSequence seq;
  if (degrees.empty()) return seq;
  const int d_max = *std::max_element(degrees.begin(), degrees.end());
  const std::size_t m_max = detail::leading_size(od, d_max);
  const auto mm = static_cast<Eigen::Index>(m_max);
  const GramFactor f = factorize_gram(od.gram.topLeftCorner(mm, mm), jitter);
  const Eigen::VectorXd w = whiten(f, od.overlaps.head(mm));
  std::vector<Eigen::VectorXd> wc;
  for (const auto& v : od.per_cell) wc.push_back(whiten(f, v.head(mm)));

  for (int d : degrees) {
    const std::size_t m = detail::leading_size(od, d);
    BoundResult r;
    r.d = d;
    detail::fill_conditioning(od, m, f, r);
    r.value = od.degenerate_zero ? 0.0 : detail::partial_square_sum(w, m);
    seq.plain.push_back(r);
    if (od.has_cells()) {
      BoundResult pr = r;
      pr.value = 0.0;
      for (const auto& x : wc) {
        const double c = od.degenerate_zero ? 0.0 : detail::partial_square_sum(x, m);
        pr.per_cell.push_back(c);
        pr.value += c;
      }
      seq.partitioned.push_back(pr);
    }
  }
  return seq;
}

/// Linear bound over span{H_1..H_k} without the constant monomial.
inline BoundResult mazur_strict_bound(const OverlapData& od, double jitter = 1e-12) {
  if (od.basis.d < 1) throw ValidationError("mazur_strict bound needs overlap data of degree >= 1");
  const auto k = static_cast<Eigen::Index>(od.basis.k);
  BoundResult r;
  r.d = 1;
  const Eigen::MatrixXd G = od.gram.block(1, 1, k, k);
  const GramFactor f = factorize_gram(G, jitter);
  r.condition_number = condition_number(G);
  r.scaled_condition_number = condition_number(f.scale.asDiagonal() * G * f.scale.asDiagonal());
  r.jitter = f.jitter;
  r.escalations = f.escalations;
  if (!od.degenerate_zero) {
    const Eigen::VectorXd w = whiten(f, od.overlaps.segment(1, k));
    r.value = w.squaredNorm();
  }
  return r;
}

/// Change of basis phi = T h with T = L^-1 S lower-triangular, so that the Gram becomes the identity
/// (up to the jitter). Gram, overlaps and cell overlaps are transformed explicitly.
struct OrthogonalizedData {
  OverlapData data;
  Eigen::MatrixXd transform;
  double jitter = 0.0;
};

inline OrthogonalizedData orthogonalize(const OverlapData& od, int d, double jitter = 1e-12) {
  const std::size_t m = detail::leading_size(od, d);
  const auto mi = static_cast<Eigen::Index>(m);
  const GramFactor f = factorize_gram(od.gram.topLeftCorner(mi, mi), jitter);
  Eigen::MatrixXd T = f.L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(f.scale.asDiagonal()));
  OrthogonalizedData out;
  out.transform = T;
  out.jitter = f.jitter;
  OverlapData& t = out.data;
  t.basis = od.basis;
  t.basis.indices.resize(m);
  t.basis.d = d;
  t.n_samples = od.n_samples;
  t.gram = T * od.gram.topLeftCorner(mi, mi) * T.transpose();
  t.gram = 0.5 * (t.gram + t.gram.transpose()).eval();
  t.overlaps = T * od.overlaps.head(mi);
  for (const auto& v : od.per_cell) t.per_cell.push_back(T * v.head(mi));
  t.cell_names = od.cell_names;
  t.cell_counts = od.cell_counts;
  t.degenerate_zero = od.degenerate_zero;
  t.warnings = od.warnings;
  return out;
}

// ---------------------------------------------------------------------------
// Bootstrap over sample blocks

struct BootstrapOptions {
  std::size_t resamples = 200;
  std::uint64_t seed = 12345;
  double jitter = 1e-12;
};

/// Standard deviations across resamples; entries parallel the degrees passed in.
struct BootstrapErrors {
  std::vector<double> plain;
  std::vector<double> partitioned;
  double mazur_strict = 0.0;
  std::vector<double> whitened;  ///< per basis function of the largest degree
  std::size_t failed = 0;
};

inline BootstrapErrors bootstrap_bounds(const OverlapData& od, std::span<const int> degrees,
                                        const BootstrapOptions& opts = {}) {
  if (!od.blocks) throw ValidationError("bootstrap requires block data (use build_overlap_data)");
  const MomentBlocks& B = *od.blocks;
  const auto n_blocks = static_cast<std::size_t>(B.moments.rows());
  const int d_max = degrees.empty() ? od.basis.d : *std::max_element(degrees.begin(), degrees.end());
  const std::size_t m_max = detail::leading_size(od, d_max);
  const std::size_t nd = degrees.size();
  const std::size_t n_cells = B.cells.size();

  // Position of l + n in the moment basis for every pair of the degree <= d_max block.
  std::vector<std::size_t> pair_pos(m_max * m_max);
  for (std::size_t a = 0; a < m_max; ++a)
    for (std::size_t b = 0; b < m_max; ++b) {
      MultiIndex s = od.basis.indices[a];
      for (std::size_t j = 0; j < s.n.size(); ++j) s.n[j] += od.basis.indices[b].n[j];
      pair_pos[a * m_max + b] = B.moment_basis.position(s);
    }

  const std::size_t R = opts.resamples;
  // Row layout per resample: plain[nd], partitioned[nd], strict, whitened[m_max], ok flag.
  const std::size_t width = 2 * nd + 1 + m_max + 1;
  std::vector<double> results(R * width, 0.0);

  parallel_for(R, [&](std::size_t r) {
    std::mt19937_64 rng(opts.seed + 0x9E3779B97F4A7C15ULL * (r + 1));
    std::uniform_int_distribution<std::size_t> pick(0, n_blocks - 1);
    Eigen::VectorXd mom = Eigen::VectorXd::Zero(B.moments.cols());
    Eigen::VectorXd ov = Eigen::VectorXd::Zero(B.overlaps.cols());
    std::vector<Eigen::VectorXd> cv(n_cells, Eigen::VectorXd::Zero(B.overlaps.cols()));
    double count = 0.0;
    for (std::size_t i = 0; i < n_blocks; ++i) {
      const auto b = static_cast<Eigen::Index>(pick(rng));
      mom += B.moments.row(b).transpose();
      ov += B.overlaps.row(b).transpose();
      for (std::size_t c = 0; c < n_cells; ++c) cv[c] += B.cells[c].row(b).transpose();
      count += static_cast<double>(B.counts[static_cast<std::size_t>(b)]);
    }
    mom /= count;
    ov /= count;
    for (auto& v : cv) v /= count;
    const auto mm = static_cast<Eigen::Index>(m_max);
    Eigen::MatrixXd G(mm, mm);
    for (std::size_t a = 0; a < m_max; ++a)
      for (std::size_t b = 0; b < m_max; ++b)
        G(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
            mom(static_cast<Eigen::Index>(pair_pos[a * m_max + b]));
    double* row = &results[r * width];
    try {
      const GramFactor f = factorize_gram(G, opts.jitter);
      const Eigen::VectorXd w = whiten(f, ov.head(mm));
      std::vector<Eigen::VectorXd> wc;
      for (const auto& v : cv) wc.push_back(whiten(f, v.head(mm)));
      for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t m = od.basis.count_up_to(degrees[i]);
        row[i] = detail::partial_square_sum(w, m);
        for (const auto& x : wc) row[nd + i] += detail::partial_square_sum(x, m);
      }
      for (std::size_t i = 0; i < m_max; ++i) row[2 * nd + 1 + i] = w(static_cast<Eigen::Index>(i));
      if (od.basis.d >= 1 && m_max > static_cast<std::size_t>(od.basis.k)) {
        const auto k = static_cast<Eigen::Index>(od.basis.k);
        const GramFactor fs = factorize_gram(G.block(1, 1, k, k), opts.jitter);
        row[2 * nd] = whiten(fs, ov.segment(1, k)).squaredNorm();
      }
      row[width - 1] = 1.0;
    } catch (const NumericError&) {
      row[width - 1] = 0.0;
    }
  }, 4);

  BootstrapErrors out;
  std::vector<std::size_t> ok;
  for (std::size_t r = 0; r < R; ++r) {
    if (results[r * width + width - 1] == 1.0) ok.push_back(r);
    else ++out.failed;
  }
  auto sd = [&](std::size_t col) {
    std::vector<double> v;
    v.reserve(ok.size());
    for (auto r : ok) v.push_back(results[r * width + col]);
    return stats::stddev(v);
  };
  for (std::size_t i = 0; i < nd; ++i) {
    out.plain.push_back(od.degenerate_zero ? 0.0 : sd(i));
    out.partitioned.push_back(od.degenerate_zero || n_cells == 0 ? 0.0 : sd(nd + i));
  }
  out.mazur_strict = od.degenerate_zero ? 0.0 : sd(2 * nd);
  for (std::size_t i = 0; i < m_max; ++i) out.whitened.push_back(od.degenerate_zero ? 0.0 : sd(2 * nd + 1 + i));
  return out;
}

// ---------------------------------------------------------------------------
// Saturation

struct SaturationEntry {
  MultiIndex index;
  double overlap = 0.0;          ///< raw <A, h_n>
  double overlap_stderr = 0.0;
  double orthogonal = 0.0;       ///< component of A along the orthonormalized basis function
  double orthogonal_stderr = 0.0;
};

struct SaturationReport {
  int d = 0;
  int d_probe = 0;
  std::vector<SaturationEntry> entries;  ///< d < |n| <= d_probe
  double bound_d = 0.0;
  double bound_probe = 0.0;
  double residual = 0.0;  ///< bound_probe - bound_d
  bool consistent_with_saturation = false;
  std::optional<double> c_hat;
  std::optional<double> c_hat_stderr;
  std::string verdict;
  std::string note;
};

/// Tests whether the projection of A onto polynomials in H_1..H_k stops growing after degree d:
/// the components of A along the orthonormalized monomials of degree d < |n| <= d_probe must all
/// vanish within 3 standard errors. The raw overlaps <A, h_n> are listed alongside.
inline SaturationReport saturation_diagnostic(const OverlapData& od, int d, int d_probe,
                                              std::optional<stats::MeanError> c_hat = std::nullopt,
                                              const BootstrapOptions& boot = {}) {
  if (d_probe <= d) throw ValidationError("d_probe must exceed d");
  const std::size_t m = detail::leading_size(od, d);
  const std::size_t mp = detail::leading_size(od, d_probe);
  const auto mpi = static_cast<Eigen::Index>(mp);
  const GramFactor f = factorize_gram(od.gram.topLeftCorner(mpi, mpi), boot.jitter);
  const Eigen::VectorXd w = whiten(f, od.overlaps.head(mpi));

  std::vector<int> degs = {d, d_probe};
  std::vector<double> w_se(mp, 0.0);
  double probe_se = 0.0;
  if (od.blocks) {
    const auto be = bootstrap_bounds(od, degs, boot);
    w_se = be.whitened;
    probe_se = std::hypot(be.plain[0], be.plain[1]);
  }

  SaturationReport rep;
  rep.d = d;
  rep.d_probe = d_probe;
  rep.bound_d = od.degenerate_zero ? 0.0 : detail::partial_square_sum(w, m);
  rep.bound_probe = od.degenerate_zero ? 0.0 : detail::partial_square_sum(w, mp);
  rep.residual = rep.bound_probe - rep.bound_d;
  rep.consistent_with_saturation = true;
  for (std::size_t i = m; i < mp; ++i) {
    SaturationEntry e;
    e.index = od.basis.indices[i];
    e.overlap = od.overlaps(static_cast<Eigen::Index>(i));
    e.overlap_stderr = od.overlaps_stderr.size() > 0 ? od.overlaps_stderr(static_cast<Eigen::Index>(i)) : 0.0;
    e.orthogonal = od.degenerate_zero ? 0.0 : w(static_cast<Eigen::Index>(i));
    e.orthogonal_stderr = w_se[i];
    // Components at round-off level count as zero even when the bootstrap spread is smaller still.
    const double floor = 1e-7 * std::sqrt(std::max(rep.bound_probe, 0.0));
    if (std::fabs(e.orthogonal) > std::max(3.0 * e.orthogonal_stderr, floor)) rep.consistent_with_saturation = false;
    rep.entries.push_back(e);
  }

  const bool projection_zero = rep.bound_probe <= 3.0 * probe_se;
  if (c_hat) {
    rep.c_hat = c_hat->mean;
    rep.c_hat_stderr = c_hat->std_error;
  }
  const bool c_positive = c_hat && c_hat->mean > 3.0 * c_hat->std_error;
  const bool gap = c_hat && c_hat->mean - rep.bound_probe > 3.0 * std::hypot(c_hat->std_error, probe_se);
  if (od.degenerate_zero) {
    rep.verdict = "zero_observable";
    rep.note = "observable vanishes on every sample";
  } else if (projection_zero && c_positive) {
    rep.verdict = "zero_projection";
    rep.note = "the projection onto polynomials in the conserved quantities vanishes while C(A) > 0; "
               "the bound cannot saturate (level sets not ergodic or A^H not polynomial)";
  } else if (!rep.consistent_with_saturation) {
    rep.verdict = "not_saturated";
    rep.note = "components beyond degree " + std::to_string(d) + " are significant";
  } else if (gap) {
    rep.verdict = "saturated_projection_below_C";
    rep.note = "projection is saturated at degree " + std::to_string(d) +
               " but C(A) exceeds it; an ergodic decomposition is needed";
  } else {
    rep.verdict = "saturated";
    rep.note = "consistent with saturation at degree " + std::to_string(d);
  }
  return rep;
}

}  // namespace mazur
