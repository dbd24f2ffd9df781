#pragma once

// Independent oracles for the test suites. Nothing here calls into the
// library's own numerics: densities and CDFs come from boost::math and
// integrals from Gauss-Kronrod quadrature.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace oracle {

inline double phi_cdf(double z) { return boost::math::cdf(boost::math::normal_distribution<>(0.0, 1.0), z); }

inline double normal_pdf(double x, double mean, double sd) {
  return boost::math::pdf(boost::math::normal_distribution<>(mean, sd), x);
}

inline double log_normal_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double binary_entropy(double p) {
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

inline double integrate(const std::function<double(double)>& f, double lo, double hi) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, hi, 15, 1e-13);
}

/// I(theta; y) for the probit model with theta ~ N(mu, sigma^2), P(y=1) = Phi((xi - theta)/s).
inline double probit_mi(double mu, double sigma, double s, double xi) {
  const double lo = mu - 12.0 * sigma, hi = mu + 12.0 * sigma;
  const double pbar = integrate([&](double t) { return normal_pdf(t, mu, sigma) * phi_cdf((xi - t) / s); }, lo, hi);
  const double cond =
      integrate([&](double t) { return normal_pdf(t, mu, sigma) * binary_entropy(phi_cdf((xi - t) / s)); }, lo, hi);
  return binary_entropy(pbar) - cond;
}

/// Same, for an arbitrary discrete prior over theta.
inline double probit_mi_discrete(const std::vector<double>& support, const std::vector<double>& w, double s, double xi) {
  double pbar = 0.0, cond = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) {
    const double p = phi_cdf((xi - support[i]) / s);
    pbar += w[i] * p;
    cond += w[i] * binary_entropy(p);
  }
  return binary_entropy(pbar) - cond;
}

inline double chi2_critical(double df, double alpha) {
  return boost::math::quantile(boost::math::chi_squared_distribution<>(df), 1.0 - alpha);
}

/// Chi-squared goodness of fit of probability-integral-transformed samples
/// against Uniform(0,1) with `bins` equiprobable bins. Returns (statistic, critical value).
inline std::pair<double, double> uniform_gof(const std::vector<double>& u, std::size_t bins, double alpha) {
  std::vector<double> counts(bins, 0.0);
  for (double v : u) counts[std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)))] += 1.0;
  const double expected = static_cast<double>(u.size()) / static_cast<double>(bins);
  double stat = 0.0;
  for (double c : counts) stat += (c - expected) * (c - expected) / expected;
  return {stat, chi2_critical(static_cast<double>(bins - 1), alpha)};
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_var(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double std_error(const std::vector<double>& v) { return std::sqrt(sample_var(v) / static_cast<double>(v.size())); }

/// Standard error of the sample variance, from the fourth central moment.
inline double var_std_error(const std::vector<double>& v) {
  const double m = mean(v);
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = (x - m) * (x - m);
    m2 += d;
    m4 += d * d;
  }
  const double n = static_cast<double>(v.size());
  m2 /= n;
  m4 /= n;
  return std::sqrt((m4 - m2 * m2) / n);
}

inline double pooled(double a, double b) { return std::sqrt(a * a + b * b); }

/// Two-sided normal critical value.
inline double z_critical(double alpha) {
  return boost::math::quantile(boost::math::complement(boost::math::normal_distribution<>(0.0, 1.0), alpha / 2.0));
}

}  // namespace oracle
