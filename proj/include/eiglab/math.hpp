#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace eiglab::math {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

inline double log_normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log Phi(z), accurate in the far left tail where erfc underflows.
inline double log_normal_cdf(double z) {
  if (z > -30.0) return std::log(normal_cdf(z));
  const double z2 = z * z;
  // Asymptotic series of the Mills ratio.
  const double series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
  return -0.5 * z2 - std::log(-z) - kLogSqrt2Pi + std::log(series);
}

/// d/dz log Phi(z) = phi(z) / Phi(z).
inline double d_log_normal_cdf(double z) {
  return std::exp(-0.5 * z * z - kLogSqrt2Pi - log_normal_cdf(z));
}

inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// log of the arithmetic mean of exp(xs).
inline double log_mean_exp(std::span<const double> xs) {
  return log_sum_exp(xs) - std::log(static_cast<double>(xs.size()));
}

inline double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Sample variance with Bessel correction; zero for fewer than two values.
inline double variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

inline double standard_error(std::span<const double> xs) {
  return std::sqrt(variance(xs) / static_cast<double>(xs.size()));
}

/// x log x with the 0 log 0 = 0 convention.
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace eiglab::math
