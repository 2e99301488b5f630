#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "mazur/error.hpp"

namespace mazur::stats {

struct MeanError {
  double mean = 0.0;
  double std_error = 0.0;
};

inline double mean(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Batch count used for batch-means errors: clamp(sqrt(n), 20, 100), but never more than n.
inline std::size_t default_batches(std::size_t n) {
  const auto b = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  return std::min(n, std::clamp<std::size_t>(b, 20, 100));
}

/// Sample mean with a batch-means standard error (robust to serial correlation).
/// Trailing samples that do not fill a batch enter the mean but not the error.
inline MeanError batch_means(std::span<const double> x, std::size_t batches = 0) {
  MeanError r;
  const std::size_t n = x.size();
  if (n == 0) return r;
  r.mean = mean(x);
  if (batches == 0) batches = default_batches(n);
  if (batches < 2) return r;
  const std::size_t len = n / batches;
  std::vector<double> bm(batches, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += x[i];
    bm[b] = s / static_cast<double>(len);
  }
  r.std_error = std::sqrt(variance(bm) / static_cast<double>(batches));
  return r;
}

/// Effective sample size from the ratio of i.i.d. to batch-means variance.
inline double effective_sample_size(std::span<const double> x, std::size_t batches = 0) {
  const std::size_t n = x.size();
  if (n < 4) return static_cast<double>(n);
  const double var = variance(x);
  const MeanError be = batch_means(x, batches);
  if (var <= 0.0 || be.std_error <= 0.0) return static_cast<double>(n);
  return std::min(static_cast<double>(n), var / (be.std_error * be.std_error));
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
template <class Cdf>
double ks_statistic(std::vector<double> sample, Cdf&& cdf) {
  if (sample.empty()) throw ValidationError("ks_statistic: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

inline double stddev(std::span<const double> x) { return std::sqrt(variance(x)); }

}  // namespace mazur::stats
