#pragma once

// Greedy sequential design: a weighted particle belief over theta, the
// incremental EIG under that belief, design selection and belief updates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "eiglab/bounds.hpp"
#include "eiglab/core.hpp"
#include "eiglab/design_opt.hpp"
#include "eiglab/estimators.hpp"
#include "eiglab/policy.hpp"

namespace eiglab {

namespace streams {
inline constexpr std::uint64_t kChoose = 10;
inline constexpr std::uint64_t kEig = 11;
inline constexpr std::uint64_t kUpdate = 12;
inline constexpr std::uint64_t kSimulate = 13;
inline constexpr std::uint64_t kTruth = 14;
inline constexpr std::uint64_t kParticles = 15;
}  // namespace streams

/// Self-normalized weighted particle set. Until the first update it stands in
/// for the prior exactly: sampling goes straight to the model prior.
class ParticleBelief final : public LatentSampler {
 public:
  ParticleBelief() = default;

  static ParticleBelief from_prior(const Model& model, std::size_t count, const RngStream& rng) {
    if (count < 1) throw ConfigError("belief needs at least one particle");
    ParticleBelief b;
    b.model_ = &model;
    b.is_prior_ = true;
    RngStream s = rng;
    b.particles_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) b.particles_.push_back(model.sample_prior(s));
    b.log_w_.assign(count, -std::log(static_cast<double>(count)));
    b.refresh();
    return b;
  }

  /// Weighted particles given explicitly (log weights are normalized here).
  static ParticleBelief from_particles(const Model& model, std::vector<LatentSample> particles, std::vector<double> log_w) {
    if (particles.empty() || particles.size() != log_w.size()) throw ConfigError("belief: particles/weights mismatch");
    ParticleBelief b;
    b.model_ = &model;
    b.particles_ = std::move(particles);
    b.log_w_ = std::move(log_w);
    b.normalize();
    return b;
  }

  LatentSample sample(RngStream& rng) const override {
    if (is_prior_) return model_->sample_prior(rng);
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return particles_[std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), particles_.size() - 1)];
  }

  bool is_prior() const { return is_prior_; }
  std::size_t size() const { return particles_.size(); }
  double ess() const { return ess_; }
  const std::vector<LatentSample>& particles() const { return particles_; }
  const std::vector<double>& log_weights() const { return log_w_; }

  std::vector<double> mean() const {
    std::vector<double> m(particles_.front().dim(), 0.0);
    for (std::size_t i = 0; i < particles_.size(); ++i) {
      const double w = std::exp(log_w_[i]);
      for (std::size_t j = 0; j < m.size(); ++j) m[j] += w * particles_[i][j];
    }
    return m;
  }

  std::vector<double> stddev() const {
    const auto m = mean();
    std::vector<double> v(m.size(), 0.0);
    for (std::size_t i = 0; i < particles_.size(); ++i) {
      const double w = std::exp(log_w_[i]);
      for (std::size_t j = 0; j < m.size(); ++j) v[j] += w * (particles_[i][j] - m[j]) * (particles_[i][j] - m[j]);
    }
    for (double& x : v) x = std::sqrt(x);
    return v;
  }

  /// Adds log-likelihood increments and renormalizes.
  void reweight(const std::vector<double>& log_lik) {
    is_prior_ = false;
    bool any = false;
    for (std::size_t i = 0; i < log_w_.size(); ++i) {
      log_w_[i] += log_lik[i];
      any = any || log_w_[i] > -std::numeric_limits<double>::infinity();
    }
    if (!any) throw ImpossibleOutcomeError("observed outcome has zero likelihood under every particle");
    normalize();
  }

  /// Systematic resampling to equal weights.
  void resample(RngStream& rng) {
    const std::size_t n = particles_.size();
    std::vector<LatentSample> out;
    out.reserve(n);
    const double u0 = rng.uniform() / static_cast<double>(n);
    std::size_t i = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double u = u0 + static_cast<double>(k) / static_cast<double>(n);
      while (i + 1 < n && cdf_[i] < u) ++i;
      out.push_back(particles_[i]);
    }
    particles_ = std::move(out);
    log_w_.assign(n, -std::log(static_cast<double>(n)));
    refresh();
  }

  std::vector<LatentSample>& mutable_particles() { return particles_; }

  void check_invariants() const {
    const double lse = math::log_sum_exp(log_w_);
    if (std::abs(lse) > 1e-10) throw NumericError("belief log-weights are not normalized");
    if (!(ess_ >= 1.0 - 1e-9 && ess_ <= static_cast<double>(particles_.size()) + 1e-9))
      throw NumericError("belief effective sample size out of range");
  }

 private:
  void normalize() {
    const double lse = math::log_sum_exp(log_w_);
    for (double& w : log_w_) w -= lse;
    refresh();
  }

  void refresh() {
    cdf_.resize(log_w_.size());
    double c = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < log_w_.size(); ++i) {
      const double w = std::exp(log_w_[i]);
      c += w;
      s2 += w * w;
      cdf_[i] = c;
    }
    for (double& v : cdf_) v /= c;
    ess_ = (c * c) / s2;
  }

  const Model* model_ = nullptr;
  bool is_prior_ = false;
  std::vector<LatentSample> particles_;
  std::vector<double> log_w_, cdf_;
  double ess_ = 0.0;
};

// ---------------------------------------------------------------------------

struct EigSpec {
  std::string estimator = "nmc";  // nmc | mlmc | rb | pce
  std::size_t n = 1000;
  std::size_t m = 100;
  MlmcConfig mlmc;
};

struct BeliefConfig {
  std::size_t particles = std::size_t{1} << 14;
  double resample_fraction = 0.5;  // resample when ess < fraction * P
  double jitter_scale = 0.5;       // jitter sd = scale * weighted sd per dimension
  bool mh_correct = true;          // accept jitter moves against prior x history likelihood
  double ess_floor = 1.0;
};

enum class StrategyKind { greedy_grid, greedy_sga, policy, fixed };

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "greedy-grid") return StrategyKind::greedy_grid;
  if (s == "greedy-sga") return StrategyKind::greedy_sga;
  if (s == "policy") return StrategyKind::policy;
  if (s == "fixed") return StrategyKind::fixed;
  throw ConfigError("unknown strategy '" + s + "'");
}

inline const char* strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::greedy_grid: return "greedy-grid";
    case StrategyKind::greedy_sga: return "greedy-sga";
    case StrategyKind::policy: return "policy";
    case StrategyKind::fixed: return "fixed";
  }
  return "?";
}

struct Strategy {
  StrategyKind kind = StrategyKind::greedy_grid;
  std::size_t grid_points = 121;  // per design dimension
  GridConfig grid{EstimatorId::nmc, 500, 50, {}};
  OptConfig sga = [] {
    OptConfig c;
    c.restarts = 2;
    c.steps = 100;
    c.eval_n = 1024;
    c.eval_m = 255;
    return c;
  }();
  std::shared_ptr<const DesignPolicy> policy;
  std::vector<Design> fixed;
};

/// One observation of the transcript.
struct TranscriptRow {
  std::size_t t = 0;
  Design xi;
  Outcome y;
  EigEstimate eig;
  std::vector<double> belief_mean, belief_std;
  double wall_ms = 0.0;

  json to_json() const {
    return {{"t", t},
            {"xi", xi.values},
            {"y", eiglab::to_json(y)},
            {"eig_estimate", eig.value},
            {"eig_std_error", eig.std_error},
            {"belief_mean", belief_mean},
            {"belief_std", belief_std},
            {"wall_ms", wall_ms}};
  }
};

inline json transcript_json(const std::vector<TranscriptRow>& rows) {
  json a = json::array();
  for (const auto& r : rows) a.push_back(r.to_json());
  return a;
}

/// Incremental EIG at xi with the belief standing in for the prior.
inline EigEstimate incremental_eig(const Model& model, const ParticleBelief& belief, const Design& xi,
                                   const EigSpec& spec, const RngStream& rng, double ess_floor = 1.0) {
  if (belief.ess() < ess_floor)
    throw DegenerateBeliefError("belief effective sample size " + std::to_string(belief.ess()) +
                                " is below the floor; resample before estimating");
  if (spec.estimator == "nmc") return nmc_eig(model, xi, NmcConfig{spec.n, spec.m, nullptr, InnerSampling::fresh}, rng, belief);
  if (spec.estimator == "rb") return rb_eig(model, xi, spec.n, rng, belief);
  if (spec.estimator == "pce") return ace_bound(model, xi, nullptr, spec.n, spec.m, rng, InnerSampling::fresh, &belief);
  if (spec.estimator == "mlmc") {
    MlmcConfig c = spec.mlmc;
    c.replicates = spec.n;
    return mlmc_eig(model, xi, c, rng, belief);
  }
  throw ConfigError("unknown estimator '" + spec.estimator + "'");
}

/// Log of prior x likelihood of the whole history, the target of the move step.
inline double log_target(const Model& model, const LatentSample& theta, const History& h) {
  double lp = model.log_prior(theta);
  for (const auto& s : h) lp += model.log_likelihood(s.outcome, theta, s.design);
  return lp;
}

/// Reweights by the new observation (already appended to `history`) and
/// resamples + jitters when the effective sample size drops too far.
inline void update_belief(const Model& model, ParticleBelief& belief, const History& history, const BeliefConfig& cfg,
                          const RngStream& rng) {
  if (history.empty()) throw ConfigError("update_belief: history is empty");
  const auto& last = history.steps().back();
  model.validate_outcome(last.outcome);
  std::vector<double> ll(belief.size());
  for (std::size_t i = 0; i < ll.size(); ++i) ll[i] = model.log_likelihood(last.outcome, belief.particles()[i], last.design);
  belief.reweight(ll);
  if (belief.ess() < cfg.resample_fraction * static_cast<double>(belief.size()) && belief.size() > 1) {
    const auto sd = belief.stddev();
    RngStream rs = rng.derive(0, 0);
    belief.resample(rs);
    auto& ps = belief.mutable_particles();
    parallel_for(ps.size(), [&](std::size_t i) {
      RngStream s = rng.derive(1, i);
      LatentSample prop = ps[i];
      for (std::size_t j = 0; j < prop.dim(); ++j) prop.values[j] += cfg.jitter_scale * sd[j] * s.normal();
      if (!cfg.mh_correct) {
        ps[i] = std::move(prop);
        return;
      }
      const double a = log_target(model, prop, history) - log_target(model, ps[i], history);
      if (std::log(s.uniform()) < a) ps[i] = std::move(prop);
    });
  }
  belief.check_invariants();
}

// ---------------------------------------------------------------------------

/// State of one greedy (or policy-driven) sequential experiment.
class SessionState {
 public:
  SessionState(std::shared_ptr<const Model> model, Strategy strategy, BeliefConfig belief_cfg, EigSpec eig,
               const RngStream& rng)
      : model_(std::move(model)), strategy_(std::move(strategy)), cfg_(belief_cfg), eig_(eig), rng_(rng) {
    if (strategy_.kind == StrategyKind::policy && !strategy_.policy)
      throw ConfigError("policy strategy requires a trained policy");
    if (strategy_.kind == StrategyKind::fixed && strategy_.fixed.empty())
      throw ConfigError("fixed strategy requires a design list");
    belief_ = ParticleBelief::from_prior(*model_, cfg_.particles, rng_.derive(streams::kParticles, 0));
  }

  const Model& model() const { return *model_; }
  const ParticleBelief& belief() const { return belief_; }
  const History& history() const { return history_; }
  const Strategy& strategy() const { return strategy_; }
  std::size_t t() const { return history_.size(); }

  Design choose_design() const {
    const RngStream s = rng_.derive(t(), streams::kChoose);
    switch (strategy_.kind) {
      case StrategyKind::policy:
        return strategy_.policy->propose(history_);
      case StrategyKind::fixed:
        return strategy_.fixed[std::min(t(), strategy_.fixed.size() - 1)];
      case StrategyKind::greedy_sga:
        return sga_optimize(*model_, strategy_.sga, s, &belief_).xi;
      case StrategyKind::greedy_grid:
        break;
    }
    GridConfig g = strategy_.grid;
    if (model_->outcome_space().finite && g.estimator == EstimatorId::nmc) g.estimator = EstimatorId::rb;
    return grid_search(*model_, uniform_grid(model_->constraint(), strategy_.grid_points), g, s, &belief_).xi;
  }

  EigEstimate incremental_eig(const Design& xi) const {
    return eiglab::incremental_eig(*model_, belief_, xi, eig_, rng_.derive(t(), streams::kEig), cfg_.ess_floor);
  }

  void observe(const Design& xi, const Outcome& y) {
    model_->validate_design(xi);
    model_->validate_outcome(y);
    History next = history_;
    next.push(xi, y);
    ParticleBelief b = belief_;
    update_belief(*model_, b, next, cfg_, rng_.derive(t(), streams::kUpdate));
    history_ = std::move(next);
    belief_ = std::move(b);
  }

 private:
  std::shared_ptr<const Model> model_;
  Strategy strategy_;
  BeliefConfig cfg_;
  EigSpec eig_;
  RngStream rng_;
  ParticleBelief belief_;
  History history_;
};

struct SequentialResult {
  LatentSample theta_star;
  std::vector<TranscriptRow> transcript;
};

/// Full loop with outcomes simulated from a hidden theta* (drawn from the prior unless given).
inline SequentialResult run_sequential(std::shared_ptr<const Model> model, std::size_t horizon, const Strategy& strategy,
                                       const BeliefConfig& belief_cfg, const EigSpec& eig, const RngStream& rng,
                                       std::optional<LatentSample> theta_star = std::nullopt) {
  if (horizon < 1) throw ConfigError("sequential run: T must be at least 1");
  SequentialResult res;
  if (theta_star) {
    model->validate_theta(*theta_star);
    res.theta_star = *theta_star;
  } else {
    RngStream s = rng.derive(streams::kTruth, 0);
    res.theta_star = model->sample_prior(s);
  }
  SessionState state(model, strategy, belief_cfg, eig, rng);
  for (std::size_t t = 0; t < horizon; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const Design xi = state.choose_design();
    const EigEstimate e = state.incremental_eig(xi);
    RngStream sim = rng.derive(t, streams::kSimulate);
    const Outcome y = model->sample_outcome(res.theta_star, xi, sim);
    state.observe(xi, y);
    TranscriptRow row{t + 1, xi, y, e, state.belief().mean(), state.belief().stddev(), 0.0};
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.transcript.push_back(std::move(row));
  }
  return res;
}

/// Greedy design selection behind the policy interface: replays the history
/// into a fresh belief and maximizes the incremental EIG.
class GreedyPolicyAdapter final : public DesignPolicy {
 public:
  GreedyPolicyAdapter(std::shared_ptr<const Model> model, Strategy strategy, BeliefConfig belief_cfg, EigSpec eig,
                      RngStream rng)
      : model_(std::move(model)), strategy_(std::move(strategy)), cfg_(belief_cfg), eig_(eig), rng_(rng) {
    if (strategy_.kind != StrategyKind::greedy_grid && strategy_.kind != StrategyKind::greedy_sga)
      throw ConfigError("greedy adapter needs a greedy strategy");
  }

  Design propose(const History& h) const override {
    SessionState s(model_, strategy_, cfg_, eig_, rng_);
    for (const auto& step : h) s.observe(step.design, step.outcome);
    return s.choose_design();
  }

 private:
  std::shared_ptr<const Model> model_;
  Strategy strategy_;
  BeliefConfig cfg_;
  EigSpec eig_;
  RngStream rng_;
};

}  // namespace eiglab
