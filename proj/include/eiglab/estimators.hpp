#pragma once

// Point estimators of EIG(xi): Rao-Blackwellized enumeration, nested Monte
// Carlo (optionally importance-sampled) and the randomized multilevel
// estimator.
//
// Stream layout shared by every estimator so that results line up across
// estimators run on the same RngStream: outer sample n draws (theta_n, y_n)
// from rng.derive(n, 0) and its inner samples from rng.derive(n, 1).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eiglab/core.hpp"
#include "eiglab/math.hpp"
#include "eiglab/parallel.hpp"
#include "eiglab/proposals.hpp"

namespace eiglab {

struct EigEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::uint64_t replicates = 0;
  std::uint64_t likelihood_evals = 0;

  json to_json() const {
    return {{"value", value}, {"std_error", std_error}, {"replicates", replicates}, {"likelihood_evals", likelihood_evals}};
  }
};

inline EigEstimate summarize(const std::vector<double>& terms, std::uint64_t evals) {
  return {math::mean(terms), math::standard_error(terms), terms.size(), evals};
}

namespace streams {
inline constexpr std::uint64_t kOuter = 0;
inline constexpr std::uint64_t kInner = 1;
inline constexpr std::uint64_t kLevel = 2;
inline constexpr std::uint64_t kShared = ~std::uint64_t{0};
inline constexpr std::uint64_t kBootstrap = ~std::uint64_t{0} - 1;
}  // namespace streams

/// How inner samples relate to the outer ones.
///  fresh        - independent inner draws per outer sample (default)
///  shared       - one inner set reused by every outer sample
///  replay_outer - inner stream replays the outer stream (test hook: theta'_1 = theta_n)
enum class InnerSampling { fresh, shared, replay_outer };

inline InnerSampling parse_inner_sampling(const std::string& s) {
  if (s == "fresh") return InnerSampling::fresh;
  if (s == "shared") return InnerSampling::shared;
  if (s == "replay_outer") return InnerSampling::replay_outer;
  throw ConfigError("unknown inner sampling mode '" + s + "'");
}

inline RngStream inner_stream(const RngStream& rng, std::uint64_t n, InnerSampling mode) {
  switch (mode) {
    case InnerSampling::shared:
      return rng.derive(streams::kShared, streams::kInner);
    case InnerSampling::replay_outer:
      return rng.derive(n, streams::kOuter);
    case InnerSampling::fresh:
      break;
  }
  return rng.derive(n, streams::kInner);
}

/// Log importance weights log[p(y|theta')p(theta')/q(theta'|y)] for `count`
/// inner draws (q = prior sampler when `proposal` is null: weight = likelihood).
inline void inner_log_weights(const Model& model, const Design& xi, const Outcome& y, RngStream& rng,
                              std::size_t count, const LatentSampler& prior, const Proposal* proposal,
                              std::vector<double>& out) {
  out.resize(count);
  const bool plain = proposal == nullptr || proposal->is_prior();
  for (std::size_t m = 0; m < count; ++m) {
    if (plain) {
      const LatentSample theta = proposal ? proposal->sample(y, xi, rng) : prior.sample(rng);
      out[m] = model.log_likelihood(y, theta, xi);
      continue;
    }
    const LatentSample theta = proposal->sample(y, xi, rng);
    const double lq = proposal->log_density(theta, y, xi);
    if (!std::isfinite(lq))
      throw NumericError("proposal density is zero at inner sample " + std::to_string(m));
    out[m] = model.log_likelihood(y, theta, xi) + model.log_prior(theta) - lq;
  }
}

// ---------------------------------------------------------------------------
// Rao-Blackwellized estimator for finite outcome sets

/// sum_y [ mean_n p(y|theta_n) log p(y|theta_n) - p_hat(y) log p_hat(y) ] for a
/// table of likelihood rows; `weights` (optional) reweights the rows.
inline double rb_value(const std::vector<std::vector<double>>& table, const std::vector<std::size_t>& rows) {
  const std::size_t k = table.front().size();
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  double value = 0.0;
  for (std::size_t y = 0; y < k; ++y) {
    double cond = 0.0, marginal = 0.0;
    for (std::size_t r : rows) {
      cond += math::xlogx(table[r][y]);
      marginal += table[r][y];
    }
    value += cond * inv_n - math::xlogx(marginal * inv_n);
  }
  return value;
}

inline EigEstimate rb_eig(const Model& model, const Design& xi, std::size_t n, const RngStream& rng,
                          const LatentSampler& prior, std::size_t bootstrap = 200) {
  if (!model.outcome_space().finite) throw CapabilityError("rb_eig requires a finite outcome set");
  if (n < 1) throw ConfigError("rb_eig: N must be at least 1");
  model.validate_design(xi);
  std::vector<std::vector<double>> table(n);
  parallel_for(n, [&](std::size_t i) {
    RngStream s = rng.derive(i, streams::kOuter);
    table[i] = model.likelihood_table(prior.sample(s), xi);
  });
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  EigEstimate est;
  est.value = rb_value(table, rows);
  est.replicates = n;
  est.likelihood_evals = n * model.outcome_space().count;
  std::vector<double> boot(bootstrap);
  parallel_for(bootstrap, [&](std::size_t b) {
    RngStream s = rng.derive(streams::kBootstrap, b);
    std::vector<std::size_t> idx(n);
    for (auto& v : idx) v = s.uniform_index(n);
    boot[b] = rb_value(table, idx);
  });
  est.std_error = bootstrap >= 2 ? std::sqrt(math::variance(boot)) : 0.0;
  return est;
}

inline EigEstimate rb_eig(const Model& model, const Design& xi, std::size_t n, const RngStream& rng) {
  return rb_eig(model, xi, n, rng, PriorSampler(model));
}

// ---------------------------------------------------------------------------
// Nested Monte Carlo

struct NmcConfig {
  std::size_t n = 1000;
  std::size_t m = 100;
  const Proposal* proposal = nullptr;  // null: inner draws from the prior
  InnerSampling inner = InnerSampling::fresh;

  void validate() const {
    if (n < 1 || m < 1) throw ConfigError("NMC requires N >= 1 and M >= 1");
  }
};

/// One outer term log p(y|theta) - log (1/M) sum_m w_m.
inline double nmc_term(const Model& model, const Design& xi, const LatentSample& theta, const Outcome& y,
                       RngStream& inner, std::size_t m, const LatentSampler& prior, const Proposal* proposal,
                       std::vector<double>& scratch) {
  inner_log_weights(model, xi, y, inner, m, prior, proposal, scratch);
  return model.log_likelihood(y, theta, xi) - math::log_mean_exp(scratch);
}

inline EigEstimate nmc_eig(const Model& model, const Design& xi, const NmcConfig& config, const RngStream& rng,
                           const LatentSampler& prior) {
  config.validate();
  model.validate_design(xi);
  std::vector<double> terms(config.n);
  parallel_for(config.n, [&](std::size_t i) {
    RngStream outer = rng.derive(i, streams::kOuter);
    const LatentSample theta = prior.sample(outer);
    const Outcome y = model.sample_outcome(theta, xi, outer);
    RngStream inner = inner_stream(rng, i, config.inner);
    std::vector<double> scratch;
    terms[i] = nmc_term(model, xi, theta, y, inner, config.m, prior, config.proposal, scratch);
  });
  return summarize(terms, config.n * (config.m + 1));
}

inline EigEstimate nmc_eig(const Model& model, const Design& xi, const NmcConfig& config, const RngStream& rng) {
  return nmc_eig(model, xi, config, rng, PriorSampler(model));
}

/// NMC for a fixed sequence of designs: the joint outcome y_{1:T} is one observation.
inline EigEstimate nmc_eig_sequence(const Model& model, const std::vector<Design>& designs, const NmcConfig& config,
                                    const RngStream& rng, const LatentSampler& prior) {
  config.validate();
  if (designs.empty()) throw ConfigError("design sequence is empty");
  for (const auto& xi : designs) model.validate_design(xi);
  std::vector<double> terms(config.n);
  parallel_for(config.n, [&](std::size_t i) {
    RngStream outer = rng.derive(i, streams::kOuter);
    const LatentSample theta = prior.sample(outer);
    std::vector<Outcome> ys;
    double own = 0.0;
    for (const auto& xi : designs) {
      ys.push_back(model.sample_outcome(theta, xi, outer));
      own += model.log_likelihood(ys.back(), theta, xi);
    }
    RngStream inner = inner_stream(rng, i, config.inner);
    std::vector<double> w(config.m);
    for (std::size_t m = 0; m < config.m; ++m) {
      const LatentSample t = prior.sample(inner);
      double lw = 0.0;
      for (std::size_t k = 0; k < designs.size(); ++k) lw += model.log_likelihood(ys[k], t, designs[k]);
      w[m] = lw;
    }
    terms[i] = own - math::log_mean_exp(w);
  });
  return summarize(terms, config.n * (config.m + 1) * designs.size());
}

// ---------------------------------------------------------------------------
// Randomized multilevel (unbiased) estimator

struct MlmcConfig {
  std::size_t m0 = 4;
  double tau = 1.5;
  std::size_t l_max = 12;
  std::size_t replicates = 1000;
  std::optional<std::size_t> forced_level;  // test hook: degenerate level distribution

  void validate() const {
    if (m0 < 2 || m0 % 2 != 0) throw ConfigError("MLMC: M0 must be even and at least 2");
    if (!(tau > 1.0 && tau < 2.0)) throw ConfigError("MLMC: tau must lie in (1, 2)");
    if (replicates < 1) throw ConfigError("MLMC: replicates must be at least 1");
    const std::size_t top = forced_level.value_or(l_max);
    if (top >= 40 || (m0 << top) > (std::size_t{1} << 40))
      throw ConfigError("MLMC: inner sample count M0 * 2^L overflows the supported range");
  }
};

/// r(l) proportional to 2^{-tau l} on 0..L_max, renormalized.
inline std::vector<double> mlmc_level_pmf(const MlmcConfig& config) {
  std::vector<double> p(config.l_max + 1);
  if (config.forced_level) {
    p.assign(std::max(config.l_max, *config.forced_level) + 1, 0.0);
    p[*config.forced_level] = 1.0;
    return p;
  }
  double total = 0.0;
  for (std::size_t l = 0; l <= config.l_max; ++l) total += p[l] = std::pow(2.0, -config.tau * static_cast<double>(l));
  for (double& v : p) v /= total;
  return p;
}

inline std::size_t mlmc_sample_level(const std::vector<double>& pmf, RngStream& rng) {
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t l = 0; l < pmf.size(); ++l) {
    c += pmf[l];
    if (u < c) return l;
  }
  for (std::size_t l = pmf.size(); l-- > 0;)
    if (pmf[l] > 0.0) return l;
  return 0;
}

/// Expected likelihood evaluations per replicate: sum_l r(l) (M0 2^l + 1).
inline double mlmc_expected_cost(const MlmcConfig& config) {
  const auto pmf = mlmc_level_pmf(config);
  double c = 0.0;
  for (std::size_t l = 0; l < pmf.size(); ++l) c += pmf[l] * static_cast<double>((config.m0 << l) + 1);
  return c;
}

/// Antithetic level difference from the log weights of M0 2^l inner draws.
inline double mlmc_delta(double log_lik, const std::vector<double>& log_w, std::size_t level) {
  const double full = log_lik - math::log_mean_exp(log_w);
  if (level == 0) return full;
  const std::size_t half = log_w.size() / 2;
  const double a = log_lik - math::log_mean_exp(std::span<const double>(log_w.data(), half));
  const double b = log_lik - math::log_mean_exp(std::span<const double>(log_w.data() + half, half));
  return full - 0.5 * (a + b);
}

struct MlmcRun {
  EigEstimate estimate;
  std::vector<std::size_t> levels;  // sampled level per replicate
};

inline MlmcRun mlmc_eig_detailed(const Model& model, const Design& xi, const MlmcConfig& config, const RngStream& rng,
                                 const LatentSampler& prior, const Proposal* proposal = nullptr) {
  config.validate();
  model.validate_design(xi);
  const auto pmf = mlmc_level_pmf(config);
  std::vector<double> values(config.replicates);
  std::vector<std::size_t> levels(config.replicates);
  parallel_for(config.replicates, [&](std::size_t r) {
    RngStream level_rng = rng.derive(r, streams::kLevel);
    const std::size_t level = mlmc_sample_level(pmf, level_rng);
    RngStream outer = rng.derive(r, streams::kOuter);
    const LatentSample theta = prior.sample(outer);
    const Outcome y = model.sample_outcome(theta, xi, outer);
    RngStream inner = rng.derive(r, streams::kInner);
    std::vector<double> log_w;
    inner_log_weights(model, xi, y, inner, config.m0 << level, prior, proposal, log_w);
    values[r] = mlmc_delta(model.log_likelihood(y, theta, xi), log_w, level) / pmf[level];
    levels[r] = level;
  });
  std::uint64_t evals = 0;
  for (std::size_t l : levels) evals += (config.m0 << l) + 1;
  return {summarize(values, evals), std::move(levels)};
}

inline EigEstimate mlmc_eig(const Model& model, const Design& xi, const MlmcConfig& config, const RngStream& rng,
                            const LatentSampler& prior, const Proposal* proposal = nullptr) {
  return mlmc_eig_detailed(model, xi, config, rng, prior, proposal).estimate;
}

inline EigEstimate mlmc_eig(const Model& model, const Design& xi, const MlmcConfig& config, const RngStream& rng,
                            const Proposal* proposal = nullptr) {
  return mlmc_eig(model, xi, config, rng, PriorSampler(model), proposal);
}

// ---------------------------------------------------------------------------
// Convergence study

enum class EstimatorId { rb, nmc, mlmc };

inline EstimatorId parse_estimator_id(const std::string& s) {
  if (s == "rb") return EstimatorId::rb;
  if (s == "nmc") return EstimatorId::nmc;
  if (s == "mlmc") return EstimatorId::mlmc;
  throw ConfigError("unknown estimator '" + s + "'");
}

/// How NMC splits a cost budget: M = round(sqrt(N)), or a fixed M.
struct Pairing {
  enum class Kind { sqrt, fixed } kind = Kind::sqrt;
  std::size_t fixed_m = 0;

  static Pairing parse(const std::string& s) {
    if (s == "sqrt") return {};
    if (s.rfind("fixed:", 0) == 0) {
      Pairing p{Kind::fixed, 0};
      try {
        p.fixed_m = std::stoul(s.substr(6));
      } catch (...) {
        throw ConfigError("bad pairing rule '" + s + "'");
      }
      if (p.fixed_m < 1) throw ConfigError("bad pairing rule '" + s + "'");
      return p;
    }
    throw ConfigError("unknown pairing rule '" + s + "' (expected sqrt or fixed:<M>)");
  }
};

struct StudyRow {
  double cost = 0.0;  // mean realized likelihood evaluations per estimate
  double mse = 0.0;
};

struct StudyResult {
  std::vector<StudyRow> rows;
  double slope = 0.0;  // least-squares slope of log mse on log cost

  std::string to_csv() const {
    std::string out = "cost,mse,slope_fit\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.cost, r.mse, slope);
      out += buf;
    }
    return out;
  }
};

inline double log_log_slope(const std::vector<StudyRow>& rows) {
  const double n = static_cast<double>(rows.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& r : rows) {
    const double x = std::log(r.cost), y = std::log(r.mse);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

struct StudyConfig {
  EstimatorId estimator = EstimatorId::nmc;
  std::vector<double> costs;
  Pairing pairing;
  std::size_t replicates = 100;
  MlmcConfig mlmc;                // level settings for the MLMC estimator
  std::optional<double> oracle;   // required when the model has no closed-form EIG
};

inline StudyResult convergence_study(const Model& model, const Design& xi, const StudyConfig& config,
                                     const RngStream& rng) {
  const std::optional<double> oracle = config.oracle ? config.oracle : model.closed_form_eig(xi);
  if (!oracle) throw CapabilityError("convergence_study needs an EIG oracle; model '" + model.id() + "' has none");
  if (config.costs.size() < 2) throw ConfigError("convergence_study needs at least two cost points");
  if (config.replicates < 1) throw ConfigError("convergence_study needs at least one replicate");
  StudyResult result;
  for (std::size_t ci = 0; ci < config.costs.size(); ++ci) {
    const double budget = config.costs[ci];
    std::vector<double> sq(config.replicates), cost(config.replicates);
    parallel_for(config.replicates, [&](std::size_t j) {
      const RngStream s = rng.derive(ci, j);
      EigEstimate e;
      switch (config.estimator) {
        case EstimatorId::nmc: {
          NmcConfig nc;
          if (config.pairing.kind == Pairing::Kind::sqrt) {
            nc.n = std::max<std::size_t>(1, std::llround(std::pow(budget, 2.0 / 3.0)));
            nc.m = std::max<std::size_t>(1, std::llround(std::sqrt(static_cast<double>(nc.n))));
          } else {
            nc.m = config.pairing.fixed_m;
            nc.n = std::max<std::size_t>(1, std::llround(budget / static_cast<double>(nc.m + 1)));
          }
          e = nmc_eig(model, xi, nc, s);
          break;
        }
        case EstimatorId::mlmc: {
          MlmcConfig mc = config.mlmc;
          mc.replicates = std::max<std::size_t>(1, std::llround(budget / mlmc_expected_cost(mc)));
          e = mlmc_eig(model, xi, mc, s);
          break;
        }
        case EstimatorId::rb: {
          const auto n = std::max<std::size_t>(
              1, std::llround(budget / static_cast<double>(model.outcome_space().count)));
          e = rb_eig(model, xi, n, s, PriorSampler(model), 0);
          break;
        }
      }
      sq[j] = (e.value - *oracle) * (e.value - *oracle);
      cost[j] = static_cast<double>(e.likelihood_evals);
    });
    result.rows.push_back({math::mean(cost), math::mean(sq)});
  }
  result.slope = log_log_slope(result.rows);
  return result;
}

}  // namespace eiglab
