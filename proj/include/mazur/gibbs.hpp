#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mazur/dynamics.hpp"
#include "mazur/error.hpp"
#include "mazur/expr.hpp"
#include "mazur/stats.hpp"

namespace mazur {

struct SamplerOptions {
  std::size_t n = 100'000;
  std::size_t burn_in = 10'000;
  std::size_t thin = 10;
  std::optional<double> proposal_scale;  ///< unset: tuned by a pre-run towards 30-40% acceptance
  std::uint64_t seed = 1;
};

/// Samples of the normalized Gibbs measure exp(-beta H) dm / Z, stored row-major (q1..qr, p1..pr).
struct GibbsEnsemble {
  std::string system;
  std::string hamiltonian;
  int r = 1;
  double beta = 1.0;
  std::uint64_t seed = 0;
  double proposal_scale = 0.0;
  double acceptance_rate = 0.0;
  std::size_t rejected_nonfinite = 0;
  std::vector<double> ess;  ///< per coordinate
  std::vector<double> data;
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return data.size() / static_cast<std::size_t>(2 * r); }

  std::span<const double> sample(std::size_t i) const {
    const auto w = static_cast<std::size_t>(2 * r);
    return {data.data() + i * w, w};
  }

  PhaseState state(std::size_t i) const {
    auto s = sample(i);
    return PhaseState::from_flat({s.begin(), s.end()});
  }

  /// Values of column `coord` across samples.
  std::vector<double> column(int coord) const {
    std::vector<double> c(size());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = sample(i)[static_cast<std::size_t>(coord)];
    return c;
  }
};

namespace detail {

inline double safe_energy(const Expression& h, std::span<const double> x, bool& finite) {
  try {
    const double e = h(x);
    finite = std::isfinite(e);
    return e;
  } catch (const EvalError&) {
    finite = false;
    return 0.0;
  }
}

}  // namespace detail

/// Random-walk Metropolis with isotropic Gaussian proposals on (q, p) jointly.
inline GibbsEnsemble sample_gibbs(const SystemSpec& sys, double beta, const SamplerOptions& opts) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be > 0");
  if (opts.n < 1) throw ValidationError("n must be >= 1");
  if (opts.thin < 1) throw ValidationError("thin must be >= 1");
  if (opts.proposal_scale && !(*opts.proposal_scale > 0.0))
    throw ValidationError("proposal_scale must be > 0");

  const auto dim = static_cast<std::size_t>(2 * sys.r);
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  std::vector<double> x(dim, 0.0), y(dim, 0.0);
  bool finite = false;
  double energy = detail::safe_energy(sys.hamiltonian, x, finite);
  if (!finite) throw NumericError("Hamiltonian is not finite at the origin; cannot start the chain");

  GibbsEnsemble ens;
  ens.system = sys.name;
  ens.hamiltonian = sys.hamiltonian.to_string();
  ens.r = sys.r;
  ens.beta = beta;
  ens.seed = opts.seed;

  std::size_t accepted = 0;
  auto propose = [&](double scale) {
    for (std::size_t i = 0; i < dim; ++i) y[i] = x[i] + scale * normal(rng);
    wrap_periodic(sys, y);
    bool ok = false;
    const double e = detail::safe_energy(sys.hamiltonian, y, ok);
    if (!ok) {
      ++ens.rejected_nonfinite;
      return;
    }
    const double log_ratio = -beta * (e - energy);
    if (log_ratio >= 0.0 || uniform(rng) < std::exp(log_ratio)) {
      x.swap(y);
      energy = e;
      ++accepted;
    }
  };

  double scale = opts.proposal_scale.value_or(1.0 / std::sqrt(beta));
  if (!opts.proposal_scale) {
    constexpr std::size_t rounds = 20, steps = 500;
    for (std::size_t round = 0; round < rounds; ++round) {
      accepted = 0;
      for (std::size_t s = 0; s < steps; ++s) propose(scale);
      const double rate = static_cast<double>(accepted) / steps;
      scale *= std::clamp(rate / 0.35, 0.5, 2.0);
    }
  }
  ens.proposal_scale = scale;

  for (std::size_t s = 0; s < opts.burn_in; ++s) propose(scale);
  ens.rejected_nonfinite = 0;
  accepted = 0;

  ens.data.reserve(opts.n * dim);
  for (std::size_t i = 0; i < opts.n; ++i) {
    for (std::size_t t = 0; t < opts.thin; ++t) propose(scale);
    ens.data.insert(ens.data.end(), x.begin(), x.end());
  }
  ens.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(opts.n * opts.thin);
  if (ens.acceptance_rate < 0.1 || ens.acceptance_rate > 0.7) {
    ens.warnings.push_back("Metropolis acceptance rate " + std::to_string(ens.acceptance_rate) +
                           " is outside [0.1, 0.7]; consider " +
                           (ens.acceptance_rate < 0.1 ? "decreasing" : "increasing") + " proposal_scale");
  }
  if (ens.rejected_nonfinite > 0)
    ens.warnings.push_back(std::to_string(ens.rejected_nonfinite) + " proposals rejected for non-finite H");
  for (int c = 0; c < 2 * sys.r; ++c) ens.ess.push_back(stats::effective_sample_size(ens.column(c)));
  return ens;
}

/// Gibbs expectation of f with a batch-means standard error.
template <class F>
  requires std::invocable<F, std::span<const double>>
stats::MeanError expectation(const GibbsEnsemble& ens, F&& f) {
  std::vector<double> values(ens.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = f(ens.sample(i));
    if (!std::isfinite(values[i]))
      throw NumericError("observable is not finite at sample " + std::to_string(i));
  }
  return stats::batch_means(values);
}

inline stats::MeanError expectation(const GibbsEnsemble& ens, const Expression& f) {
  return expectation(ens, [&](std::span<const double> x) { return f(x); });
}

// ---------------------------------------------------------------------------
// Sample files: '#'-prefixed key=value header, then a CSV table q1..qr,p1..pr.

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

inline void write_ensemble(std::ostream& out, const GibbsEnsemble& ens) {
  out << "# mazur-ensemble v1\n";
  out << "# system=" << ens.system << "\n";
  out << "# hamiltonian=" << ens.hamiltonian << "\n";
  out << "# r=" << ens.r << "\n";
  out << "# beta=" << format_double(ens.beta) << "\n";
  out << "# seed=" << ens.seed << "\n";
  out << "# proposal_scale=" << format_double(ens.proposal_scale) << "\n";
  out << "# acceptance_rate=" << format_double(ens.acceptance_rate) << "\n";
  for (int i = 0; i < ens.r; ++i) out << (i ? "," : "") << "q" << i + 1;
  for (int i = 0; i < ens.r; ++i) out << ",p" << i + 1;
  out << "\n";
  const auto w = static_cast<std::size_t>(2 * ens.r);
  for (std::size_t i = 0; i < ens.size(); ++i) {
    for (std::size_t c = 0; c < w; ++c) out << (c ? "," : "") << format_double(ens.data[i * w + c]);
    out << "\n";
  }
}

inline void save_ensemble(const std::string& path, const GibbsEnsemble& ens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open '" + path + "' for writing");
  write_ensemble(out, ens);
}

inline GibbsEnsemble read_ensemble(std::istream& in) {
  GibbsEnsemble ens;
  std::map<std::string, std::string> header;
  std::string line;
  bool seen_columns = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) header[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    if (!seen_columns) {
      seen_columns = true;
      continue;
    }
    std::size_t start = 0;
    while (start <= line.size()) {
      auto comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(line.data() + start, line.data() + comma, v);
      if (ec != std::errc() || ptr != line.data() + comma)
        throw ValidationError("ensemble file: malformed number on line " + std::to_string(line_no));
      ens.data.push_back(v);
      start = comma + 1;
      if (comma == line.size()) break;
    }
  }
  auto need = [&](const std::string& key) {
    auto it = header.find(key);
    if (it == header.end()) throw ValidationError("ensemble file: missing header field '" + key + "'");
    return it->second;
  };
  ens.system = need("system");
  ens.hamiltonian = header.count("hamiltonian") ? header["hamiltonian"] : "";
  ens.r = std::stoi(need("r"));
  ens.beta = std::stod(need("beta"));
  ens.seed = std::stoull(need("seed"));
  if (header.count("proposal_scale")) ens.proposal_scale = std::stod(header["proposal_scale"]);
  if (header.count("acceptance_rate")) ens.acceptance_rate = std::stod(header["acceptance_rate"]);
  if (ens.r < 1 || ens.data.size() % static_cast<std::size_t>(2 * ens.r) != 0)
    throw ValidationError("ensemble file: row width does not match r");
  if (ens.size() == 0) throw ValidationError("ensemble file: no samples");
  for (int c = 0; c < 2 * ens.r; ++c) ens.ess.push_back(stats::effective_sample_size(ens.column(c)));
  return ens;
}

inline GibbsEnsemble load_ensemble(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open ensemble file '" + path + "'");
  return read_ensemble(in);
}

/// Evenly strided subset of at most `max_samples` samples (0 keeps all).
inline GibbsEnsemble subsample(const GibbsEnsemble& ens, std::size_t max_samples) {
  if (max_samples == 0 || max_samples >= ens.size()) return ens;
  GibbsEnsemble out = ens;
  out.data.clear();
  const double stride = static_cast<double>(ens.size()) / static_cast<double>(max_samples);
  for (std::size_t i = 0; i < max_samples; ++i) {
    auto s = ens.sample(static_cast<std::size_t>(std::floor(static_cast<double>(i) * stride)));
    out.data.insert(out.data.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace mazur
