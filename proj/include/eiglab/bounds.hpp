#pragma once

// Variational EIG bounds: marginal (upper), posterior / Barber-Agakov
// (lower), VNMC (upper) and the adaptive contrastive bound ACE (lower),
// whose prior-proposal special case is PCE. Each bound has a plain-double
// estimator and a taped batch objective used for training and design
// gradients.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eiglab/autodiff.hpp"
#include "eiglab/core.hpp"
#include "eiglab/estimators.hpp"
#include "eiglab/math.hpp"
#include "eiglab/nn.hpp"
#include "eiglab/proposals.hpp"

namespace eiglab {

enum class BoundKind { marginal, ba, vnmc, ace, pce };

inline BoundKind parse_bound_kind(const std::string& s) {
  if (s == "marginal") return BoundKind::marginal;
  if (s == "ba") return BoundKind::ba;
  if (s == "vnmc") return BoundKind::vnmc;
  if (s == "ace") return BoundKind::ace;
  if (s == "pce") return BoundKind::pce;
  throw ConfigError("unknown bound '" + s + "'");
}

inline const char* bound_name(BoundKind k) {
  switch (k) {
    case BoundKind::marginal: return "marginal";
    case BoundKind::ba: return "ba";
    case BoundKind::vnmc: return "vnmc";
    case BoundKind::ace: return "ace";
    case BoundKind::pce: return "pce";
  }
  return "?";
}

inline bool is_lower_bound(BoundKind k) { return k == BoundKind::ba || k == BoundKind::ace || k == BoundKind::pce; }
inline bool uses_contrasts(BoundKind k) { return k == BoundKind::vnmc || k == BoundKind::ace || k == BoundKind::pce; }
inline bool uses_posterior(BoundKind k) { return k == BoundKind::ba || k == BoundKind::vnmc || k == BoundKind::ace; }

namespace streams {
inline constexpr std::uint64_t kInit = ~std::uint64_t{0} - 2;
inline constexpr std::uint64_t kTrain = ~std::uint64_t{0} - 3;
}  // namespace streams

// ---------------------------------------------------------------------------
// q(y | xi): Gaussian per outcome coordinate, or softmax logits over a finite set

class MarginalApprox {
 public:
  /// N(0, 1) per coordinate, or uniform logits.
  static MarginalApprox init(const Model& model) {
    const OutcomeSpace s = model.outcome_space();
    if (s.finite) return logits(std::vector<double>(s.count, 0.0));
    return gaussian(std::vector<double>(s.dim, 0.0), std::vector<double>(s.dim, 1.0));
  }

  static MarginalApprox gaussian(std::vector<double> mean, std::vector<double> sd) {
    if (mean.size() != sd.size() || mean.empty()) throw ShapeError("marginal approximation: mean/sd length mismatch");
    MarginalApprox q;
    q.finite_ = false;
    std::vector<double> log_sd(sd.size());
    for (std::size_t i = 0; i < sd.size(); ++i) {
      if (!(sd[i] > 0.0)) throw ConfigError("marginal approximation: sd must be positive");
      log_sd[i] = std::log(sd[i]);
    }
    q.params_ = {ad::Tensor::row(std::move(mean)), ad::Tensor::row(std::move(log_sd))};
    return q;
  }

  static MarginalApprox logits(std::vector<double> l) {
    if (l.empty()) throw ShapeError("marginal approximation: empty logits");
    MarginalApprox q;
    q.finite_ = true;
    q.params_ = {ad::Tensor::row(std::move(l))};
    return q;
  }

  bool finite() const { return finite_; }
  std::vector<ad::Tensor>& params() { return params_; }
  const std::vector<ad::Tensor>& params() const { return params_; }

  double log_density(const Outcome& y) const {
    if (finite_) {
      const auto& l = params_[0].data;
      if (!y.is_discrete() || y.index() >= l.size()) throw InvalidOutcomeError("outcome outside the logit support");
      return l[y.index()] - math::log_sum_exp(l);
    }
    const auto& v = y.values();
    if (v.size() != params_[0].cols()) throw ShapeError("marginal approximation: outcome dimension mismatch");
    double lp = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
      lp += math::log_normal_pdf(v[i], params_[0].data[i], std::exp(params_[1].data[i]));
    return lp;
  }

  /// log q(y) for a batch y [n, dy] (continuous case).
  static ad::Var ad_log_density(std::span<const ad::Var> params, ad::Var y) {
    using namespace ad;
    Var z = (y - params[0]) / exp(params[1]);
    Var per = neg(scale(square(z), 0.5)) - params[1];
    return shift(row_sum(per), -static_cast<double>(y.cols()) * math::kLogSqrt2Pi);
  }

  /// log-softmax row [1, K] (finite case).
  static ad::Var ad_log_probs(std::span<const ad::Var> params) {
    return params[0] - ad::tile_cols(ad::logsumexp(params[0]), params[0].cols());
  }

 private:
  bool finite_ = false;
  std::vector<ad::Tensor> params_;
};

// ---------------------------------------------------------------------------
// q(theta | y, xi): diagonal Gaussian whose mean and log-sd come from a
// 2x64 tanh network on (y, xi), plus a linear skip path from the same input.

class PosteriorApprox final : public Proposal {
 public:
  PosteriorApprox() = default;

  PosteriorApprox(const Model& model, RngStream rng, std::size_t hidden = 64)
      : theta_dim_(model.theta_dim()),
        y_dim_(model.outcome_space().finite ? 1 : model.outcome_space().dim),
        design_dim_(model.design_dim()) {
    const std::size_t in = y_dim_ + design_dim_;
    nn::Mlp body({in, hidden, hidden, 2 * theta_dim_}, rng, 0.1);
    params_ = body.params();
    params_.emplace_back(in, 2 * theta_dim_, 0.0);
  }

  std::size_t theta_dim() const { return theta_dim_; }
  std::size_t input_dim() const { return y_dim_ + design_dim_; }
  std::vector<ad::Tensor>& params() { return params_; }
  const std::vector<ad::Tensor>& params() const { return params_; }

  std::vector<double> features(const Outcome& y, const Design& xi) const {
    std::vector<double> x = y.features();
    if (x.size() != y_dim_ || xi.dim() != design_dim_) throw ShapeError("posterior approximation: input mismatch");
    x.insert(x.end(), xi.values.begin(), xi.values.end());
    return x;
  }

  /// (mean, log-sd) of q(. | y, xi).
  std::pair<std::vector<double>, std::vector<double>> gaussian(const Outcome& y, const Design& xi) const {
    const std::vector<double> x = features(y, xi);
    std::vector<double> out = nn::mlp_eval(std::span<const ad::Tensor>(params_.data(), params_.size() - 1), x);
    const ad::Tensor& skip = params_.back();
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += x[r] * skip(r, c);
    return {std::vector<double>(out.begin(), out.begin() + theta_dim_),
            std::vector<double>(out.begin() + theta_dim_, out.end())};
  }

  LatentSample sample(const Outcome& y, const Design& xi, RngStream& rng) const override {
    auto [mu, log_sd] = gaussian(y, xi);
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += std::exp(log_sd[i]) * rng.normal();
    return LatentSample(std::move(mu));
  }

  double log_density(const LatentSample& theta, const Outcome& y, const Design& xi) const override {
    const auto [mu, log_sd] = gaussian(y, xi);
    double lp = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) lp += math::log_normal_pdf(theta[i], mu[i], std::exp(log_sd[i]));
    return lp;
  }

  /// Taped (mean, log-sd), each [n, d_theta], for inputs [n, d_y + d_xi].
  static std::pair<ad::Var, ad::Var> ad_gaussian(std::span<const ad::Var> params, ad::Var input, std::size_t theta_dim) {
    ad::Var out = nn::Mlp::forward(params.first(params.size() - 1), input) + ad::matmul(input, params.back());
    return {ad::slice_cols(out, 0, theta_dim), ad::slice_cols(out, theta_dim, 2 * theta_dim)};
  }

  static ad::Var ad_log_density(ad::Var theta, ad::Var mean, ad::Var log_sd) {
    using namespace ad;
    Var z = (theta - mean) / exp(log_sd);
    return shift(row_sum(neg(scale(square(z), 0.5)) - log_sd), -static_cast<double>(theta.cols()) * math::kLogSqrt2Pi);
  }

 private:
  std::size_t theta_dim_ = 0, y_dim_ = 0, design_dim_ = 0;
  std::vector<ad::Tensor> params_;
};

// ---------------------------------------------------------------------------
// Plain-double bound estimators. Streams follow the estimators module: outer
// sample n draws (theta_0, y) from derive(n, 0), contrasts from the inner stream.

inline EigEstimate marginal_bound(const Model& model, const Design& xi, const MarginalApprox& q, std::size_t n,
                                  const RngStream& rng) {
  if (n < 1) throw ConfigError("marginal bound: N must be at least 1");
  model.validate_design(xi);
  std::vector<double> terms(n);
  parallel_for(n, [&](std::size_t i) {
    RngStream s = rng.derive(i, streams::kOuter);
    const auto [theta, y] = sample_joint(model, xi, s);
    const double lq = q.log_density(y);
    if (!std::isfinite(lq)) throw NumericError("marginal approximation density is zero at outer sample " + std::to_string(i));
    terms[i] = model.log_likelihood(y, theta, xi) - lq;
  });
  return summarize(terms, n);
}

inline EigEstimate ba_bound(const Model& model, const Design& xi, const Proposal& q, std::size_t n,
                            const RngStream& rng) {
  if (n < 1) throw ConfigError("ba bound: N must be at least 1");
  model.validate_design(xi);
  std::vector<double> terms(n);
  parallel_for(n, [&](std::size_t i) {
    RngStream s = rng.derive(i, streams::kOuter);
    const auto [theta, y] = sample_joint(model, xi, s);
    const double lq = q.log_density(theta, y, xi);
    if (!std::isfinite(lq)) throw NumericError("posterior approximation density is zero at outer sample " + std::to_string(i));
    terms[i] = lq - model.log_prior(theta);
  });
  return summarize(terms, n);
}

/// log p(y|theta_0) - log (1/(M+1)) sum_{m=0}^{M} w_m with w_0 built from the outer sample.
inline double contrastive_term(double log_lik0, double log_w0, std::span<const double> log_w, std::vector<double>& scratch) {
  const double log_count = std::log(static_cast<double>(log_w.size() + 1));
  if (log_w.empty() || *std::max_element(log_w.begin(), log_w.end()) <= log_w0) {
    // shift by the outer weight: keeps a PCE term at or below log(M+1) in floating point too
    double s = 0.0;
    for (double w : log_w) s += std::exp(w - log_w0);
    return (log_lik0 - log_w0) - std::log1p(s) + log_count;
  }
  scratch.resize(log_w.size() + 1);
  scratch[0] = log_w0;
  std::copy(log_w.begin(), log_w.end(), scratch.begin() + 1);
  return log_lik0 - (math::log_sum_exp(scratch) - std::log(static_cast<double>(scratch.size())));
}

/// ACE lower bound; `q == nullptr` (or a prior proposal) gives PCE, whose
/// every term is checked against the log(M+1) cap.
inline EigEstimate ace_bound(const Model& model, const Design& xi, const Proposal* q, std::size_t n, std::size_t m,
                             const RngStream& rng, InnerSampling inner = InnerSampling::fresh,
                             const LatentSampler* prior = nullptr) {
  if (n < 1 || m < 1) throw ConfigError("ace bound: N and M must be at least 1");
  model.validate_design(xi);
  const PriorSampler own_prior(model);
  const LatentSampler& p = prior ? *prior : own_prior;
  const bool pce = q == nullptr || q->is_prior();
  const double cap = std::log(static_cast<double>(m + 1));
  std::vector<double> terms(n);
  parallel_for(n, [&](std::size_t i) {
    RngStream outer = rng.derive(i, streams::kOuter);
    const LatentSample theta0 = p.sample(outer);
    const Outcome y = model.sample_outcome(theta0, xi, outer);
    RngStream in = inner_stream(rng, i, inner);
    std::vector<double> log_w, scratch;
    inner_log_weights(model, xi, y, in, m, p, q, log_w);
    const double l0 = model.log_likelihood(y, theta0, xi);
    double w0 = l0;
    if (!pce) {
      const double lq = q->log_density(theta0, y, xi);
      if (!std::isfinite(lq)) throw NumericError("proposal density is zero at outer sample " + std::to_string(i));
      w0 = l0 + model.log_prior(theta0) - lq;
    }
    terms[i] = contrastive_term(l0, w0, log_w, scratch);
    if (pce && terms[i] > cap)
      throw NumericError("PCE term " + std::to_string(i) + " exceeds log(M+1)");
  });
  return summarize(terms, n * (m + 1));
}

inline EigEstimate pce_bound(const Model& model, const Design& xi, std::size_t n, std::size_t m, const RngStream& rng,
                             InnerSampling inner = InnerSampling::fresh) {
  return ace_bound(model, xi, nullptr, n, m, rng, inner);
}

/// VNMC upper bound: the proposal-driven nested estimator, on the same streams as ace_bound.
inline EigEstimate vnmc_bound(const Model& model, const Design& xi, const Proposal& q, std::size_t n, std::size_t m,
                              const RngStream& rng, InnerSampling inner = InnerSampling::fresh) {
  NmcConfig c{n, m, &q, inner};
  return nmc_eig(model, xi, c, rng);
}

// ---------------------------------------------------------------------------
// Taped batch objectives (common random numbers drawn up front)

struct ObjectiveDraws {
  std::size_t n = 0, m = 0;
  ad::Tensor theta0;     // [n, d_theta] prior draws
  ad::Tensor y_noise;    // [n, noise_dim] standard normals (continuous outcomes)
  ad::Tensor contrasts;  // [n*m, d_theta]: prior draws (pce) or standard normals (ace, vnmc)
};

inline ObjectiveDraws draw_objective(const Model& model, BoundKind kind, std::size_t n, std::size_t m,
                                     const RngStream& rng, const LatentSampler* prior = nullptr,
                                     InnerSampling inner = InnerSampling::fresh) {
  const PriorSampler own_prior(model);
  const LatentSampler& p = prior ? *prior : own_prior;
  const std::size_t dt = model.theta_dim();
  const bool continuous = !model.outcome_space().finite;
  const std::size_t dn = continuous ? model.noise_dim() : 0;
  ObjectiveDraws d;
  d.n = n;
  d.m = uses_contrasts(kind) ? m : 0;
  d.theta0 = ad::Tensor(n, dt, 0.0);
  d.y_noise = ad::Tensor(n, std::max<std::size_t>(dn, 1), 0.0);
  d.contrasts = ad::Tensor(std::max<std::size_t>(n * d.m, 1), dt, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream s = rng.derive(i, streams::kOuter);
    const LatentSample t = p.sample(s);
    for (std::size_t j = 0; j < dt; ++j) d.theta0(i, j) = t[j];
    for (std::size_t j = 0; j < dn; ++j) d.y_noise(i, j) = s.normal();
    if (d.m == 0) continue;
    RngStream c = inner_stream(rng, i, inner);
    for (std::size_t k = 0; k < d.m; ++k) {
      if (kind == BoundKind::pce) {
        const LatentSample tc = p.sample(c);
        for (std::size_t j = 0; j < dt; ++j) d.contrasts(i * d.m + k, j) = tc[j];
      } else {
        for (std::size_t j = 0; j < dt; ++j) d.contrasts(i * d.m + k, j) = c.normal();
      }
    }
  }
  return d;
}

namespace bound_detail {

/// Bound integrand for a given taped outcome batch y [n, d_y] whose log-likelihood under theta_0 is l0.
inline ad::Var bound_integrand(const Model& model, BoundKind kind, ad::Var xi, std::span<const ad::Var> q,
                               const ObjectiveDraws& d, ad::Var theta0, ad::Var y, ad::Var l0,
                               std::optional<std::size_t> finite_index) {
  using namespace ad;
  Tape& tape = xi.tape();
  const std::size_t n = d.n, m = d.m, dt = model.theta_dim();
  switch (kind) {
    case BoundKind::marginal: {
      if (finite_index) {
        Var lp = slice_cols(MarginalApprox::ad_log_probs(q), *finite_index, *finite_index + 1);
        return l0 - lp;
      }
      return l0 - MarginalApprox::ad_log_density(q, y);
    }
    case BoundKind::pce: {
      Var yc = repeat_rows(y, m);
      Var tc = tape.constant(d.contrasts);
      Var lc = reshape(model.ad_log_likelihood(yc, tc, xi), n, m);
      // (l0 - lse) <= 0 exactly, so the term never rounds above log(m+1)
      return shift(l0 - logsumexp(concat_cols(l0, lc)), std::log(static_cast<double>(m + 1)));
    }
    default:
      break;
  }
  Var input = concat_cols(y, repeat_rows(xi, n));
  auto [mean, log_sd] = PosteriorApprox::ad_gaussian(q, input, dt);
  if (kind == BoundKind::ba)
    return PosteriorApprox::ad_log_density(theta0, mean, log_sd) - model.ad_log_prior(theta0);
  // Reparameterized contrasts theta_m = mean + sd * eps; log q(theta_m) = -eps^2/2 - log sd - c.
  Var eps = tape.constant(d.contrasts);
  Var log_sd_c = repeat_rows(log_sd, m);
  Var tc = repeat_rows(mean, m) + exp(log_sd_c) * eps;
  Var log_q = shift(row_sum(neg(scale(square(eps), 0.5)) - log_sd_c), -static_cast<double>(dt) * math::kLogSqrt2Pi);
  Var lw = reshape(model.ad_log_likelihood(repeat_rows(y, m), tc, xi) + model.ad_log_prior(tc) - log_q, n, m);
  if (kind == BoundKind::vnmc) return l0 - shift(logsumexp(lw), -std::log(static_cast<double>(m)));
  Var w0 = l0 + model.ad_log_prior(theta0) - PosteriorApprox::ad_log_density(theta0, mean, log_sd);
  return l0 - shift(logsumexp(concat_cols(w0, lw)), -std::log(static_cast<double>(m + 1)));
}

}  // namespace bound_detail

/// Per-sample bound terms [n, 1] on the tape. `xi` is a [1, d] node and `q`
/// the approximation parameters placed on the same tape (empty for pce).
/// Continuous outcomes are reparameterized; finite outcome sets are summed
/// out, weighting each outcome by p(y | theta_0, xi).
inline ad::Var bound_terms(const Model& model, BoundKind kind, ad::Var xi, std::span<const ad::Var> q,
                           const ObjectiveDraws& d) {
  using namespace ad;
  Tape& tape = xi.tape();
  Var theta0 = tape.constant(d.theta0);
  const OutcomeSpace space = model.outcome_space();
  if (!space.finite) {
    Tensor noise(d.n, model.noise_dim(), 0.0);
    std::copy(d.y_noise.data.begin(), d.y_noise.data.begin() + static_cast<std::ptrdiff_t>(noise.size()), noise.data.begin());
    Var y = model.ad_reparam_outcome(theta0, xi, noise);
    Var l0 = model.ad_log_likelihood(y, theta0, xi);
    return bound_detail::bound_integrand(model, kind, xi, q, d, theta0, y, l0, std::nullopt);
  }
  Var table = model.ad_log_likelihood_table(theta0, xi);
  std::optional<Var> total;
  for (std::size_t k = 0; k < space.count; ++k) {
    Var y = tape.constant(Tensor(d.n, 1, static_cast<double>(k)));
    Var l0 = slice_cols(table, k, k + 1);
    Var term = exp(l0) * bound_detail::bound_integrand(model, kind, xi, q, d, theta0, y, l0, k);
    total = total ? *total + term : term;
  }
  return *total;
}

// ---------------------------------------------------------------------------
// Training

struct BoundConfig {
  BoundKind kind = BoundKind::ba;
  std::size_t m = 16;       // contrasts / inner samples
  std::size_t batch = 128;
  std::size_t steps = 2000;
  nn::OptimizerKind optimizer = nn::OptimizerKind::sgd;
  nn::StepSchedule schedule{};

  void validate() const {
    if (uses_contrasts(kind) && m < 1) throw ConfigError("bound config: M must be at least 1");
    if (batch < 1) throw ConfigError("bound config: batch must be at least 1");
  }
};

/// Whichever approximation a bound needs.
struct Variational {
  std::optional<MarginalApprox> marginal;
  std::optional<PosteriorApprox> posterior;

  static Variational init(const Model& model, BoundKind kind, const RngStream& rng) {
    Variational v;
    if (kind == BoundKind::marginal) v.marginal = MarginalApprox::init(model);
    if (uses_posterior(kind)) v.posterior = PosteriorApprox(model, rng.derive(streams::kInit, 0));
    return v;
  }

  std::vector<ad::Tensor>* params() {
    if (marginal) return &marginal->params();
    if (posterior) return &posterior->params();
    return nullptr;
  }
};

struct TraceRow {
  std::size_t step = 0;
  double estimate = 0.0;
  double std_error = 0.0;
};

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "step,bound_estimate,std_error\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.step, r.estimate, r.std_error);
    out += buf;
  }
  return out;
}

struct TrainedBound {
  Variational q;
  std::vector<TraceRow> trace;
};

/// Batch mean and standard error of a taped term column.
inline std::pair<double, double> term_stats(const ad::Tensor& t) {
  return {math::mean(t.data), math::standard_error(t.data)};
}

/// Stochastic-gradient training of the approximation inside a bound:
/// ascent for lower bounds, descent for upper bounds.
inline TrainedBound train_variational(const Model& model, const Design& xi, const BoundConfig& config,
                                      const RngStream& rng) {
  config.validate();
  if (config.kind == BoundKind::pce) throw ConfigError("pce has no variational approximation to train");
  model.validate_design(xi);
  if (!model.capabilities().differentiable) throw CapabilityError("model '" + model.id() + "' has no taped likelihood");
  TrainedBound out{Variational::init(model, config.kind, rng), {}};
  std::vector<ad::Tensor>& params = *out.q.params();
  nn::Optimizer opt(config.optimizer, config.schedule, is_lower_bound(config.kind) ? 1.0 : -1.0);
  const ad::Tensor xi_t = ad::Tensor::row(xi.values);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const ObjectiveDraws d = draw_objective(model, config.kind, config.batch, config.m, rng.derive(streams::kTrain, step));
    ad::Tape tape;
    ad::Var x = tape.constant(xi_t);
    const auto q = tape.variables(params);
    ad::Var terms = [&] {
      try {
        return bound_terms(model, config.kind, x, q, d);
      } catch (const NumericError& e) {
        throw TrainingError(step, e.what());
      }
    }();
    const auto [est, se] = term_stats(terms.value());
    out.trace.push_back({step, est, se});
    auto grads = tape.grad(ad::mean(terms), q);
    for (const auto& g : grads)
      for (double v : g.data)
        if (!std::isfinite(v)) throw TrainingError(step, "non-finite gradient");
    opt.step(params, grads);
    for (const auto& p : params)
      for (double v : p.data)
        if (!std::isfinite(v)) throw TrainingError(step, "parameters diverged");
  }
  return out;
}

/// Held-out plain-double estimate of a bound with a given approximation.
inline EigEstimate evaluate_bound(const Model& model, const Design& xi, BoundKind kind, const Variational& q,
                                  std::size_t n, std::size_t m, const RngStream& rng) {
  switch (kind) {
    case BoundKind::marginal:
      if (!q.marginal) throw ConfigError("marginal bound needs a marginal approximation");
      return marginal_bound(model, xi, *q.marginal, n, rng);
    case BoundKind::pce:
      return pce_bound(model, xi, n, m, rng);
    default:
      break;
  }
  if (!q.posterior) throw ConfigError(std::string(bound_name(kind)) + " bound needs a posterior approximation");
  if (kind == BoundKind::ba) return ba_bound(model, xi, *q.posterior, n, rng);
  if (kind == BoundKind::vnmc) return vnmc_bound(model, xi, *q.posterior, n, m, rng);
  return ace_bound(model, xi, &*q.posterior, n, m, rng);
}

}  // namespace eiglab
