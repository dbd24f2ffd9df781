#pragma once

// Static design optimization: projected stochastic-gradient ascent of an EIG
// lower bound jointly with its approximation, and an exhaustive grid search.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "eiglab/bounds.hpp"
#include "eiglab/estimators.hpp"

namespace eiglab {

namespace streams {
inline constexpr std::uint64_t kRestart = ~std::uint64_t{0} - 4;
inline constexpr std::uint64_t kHeldOut = ~std::uint64_t{0} - 5;
}  // namespace streams

inline Design project(const Design& xi, const Constraint& c) { return c.project(xi); }

enum class UpdateScheme { alternating, joint };

struct OptConfig {
  BoundKind objective = BoundKind::pce;
  UpdateScheme scheme = UpdateScheme::alternating;
  std::size_t m = 16;
  std::size_t batch = 64;
  std::size_t steps = 300;
  std::size_t restarts = 8;
  nn::OptimizerKind xi_optimizer = nn::OptimizerKind::sgd;
  nn::StepSchedule xi_schedule{0.2, 1.0, 1000};
  nn::OptimizerKind q_optimizer = nn::OptimizerKind::sgd;
  nn::StepSchedule q_schedule{};
  std::size_t eval_n = 4096;
  std::size_t eval_m = 1023;
  std::optional<Constraint> constraint;  // defaults to the model's own
  std::optional<Design> init;            // fixed start for every restart

  void validate() const {
    if (!is_lower_bound(objective)) throw ConfigError("design objective must be a lower bound (ba, ace or pce)");
    if (restarts < 1) throw ConfigError("restarts must be at least 1");
    if (batch < 1 || eval_n < 1) throw ConfigError("batch and eval_n must be at least 1");
    if (uses_contrasts(objective) && (m < 1 || eval_m < 1)) throw ConfigError("M must be at least 1");
  }
};

struct OptTraceRow {
  std::size_t step = 0;
  std::vector<double> xi;
  double estimate = 0.0;
};

struct RestartResult {
  Design xi;
  EigEstimate held_out;
  std::vector<OptTraceRow> trace;
  Variational q;
};

struct OptResult {
  Design xi;
  EigEstimate bound;  // held-out estimate at xi
  std::size_t best_restart = 0;
  std::vector<RestartResult> restarts;

  std::string trace_csv() const {
    const auto& trace = restarts.at(best_restart).trace;
    std::string out = "step";
    for (std::size_t j = 0; j < xi.dim(); ++j) out += ",xi" + std::to_string(j);
    out += ",bound_estimate\n";
    char buf[64];
    for (const auto& r : trace) {
      out += std::to_string(r.step);
      for (double v : r.xi) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out += buf;
      }
      std::snprintf(buf, sizeof buf, ",%.17g\n", r.estimate);
      out += buf;
    }
    return out;
  }
};

namespace opt_detail {

inline void check_finite(const std::vector<ad::Tensor>& ts, std::size_t step, const char* what) {
  for (const auto& t : ts)
    for (double v : t.data)
      if (!std::isfinite(v)) throw TrainingError(step, std::string("non-finite ") + what);
}

inline RestartResult run_restart(const Model& model, const OptConfig& cfg, const Constraint& con, const RngStream& rng,
                                 const LatentSampler* prior) {
  RestartResult out;
  RngStream init_rng = rng.derive(streams::kInit, 1);
  Design start = cfg.init ? *cfg.init : con.sample_uniform(init_rng);
  ad::Tensor xi = ad::Tensor::row(con.project(start).values);
  out.q = Variational::init(model, cfg.objective, rng);
  std::vector<ad::Tensor>* qp = out.q.params();
  nn::Optimizer xi_opt(cfg.xi_optimizer, cfg.xi_schedule, 1.0);
  nn::Optimizer q_opt(cfg.q_optimizer, cfg.q_schedule, 1.0);

  auto evaluate = [&](const ObjectiveDraws& d, bool want_xi, bool want_q, std::size_t step) {
    ad::Tape tape;
    ad::Var x = want_xi ? tape.variable(xi) : tape.constant(xi);
    std::vector<ad::Var> q;
    if (qp) q = want_q ? tape.variables(*qp) : [&] {
      std::vector<ad::Var> c;
      for (const auto& t : *qp) c.push_back(tape.constant(t));
      return c;
    }();
    ad::Var terms = [&] {
      try {
        return bound_terms(model, cfg.objective, x, q, d);
      } catch (const NumericError& e) {
        throw TrainingError(step, e.what());
      }
    }();
    std::vector<ad::Var> wrt;
    if (want_xi) wrt.push_back(x);
    if (want_q) wrt.insert(wrt.end(), q.begin(), q.end());
    std::vector<ad::Tensor> g = tape.grad(ad::mean(terms), wrt);
    check_finite(g, step, "gradient");
    return std::make_pair(math::mean(terms.value().data), std::move(g));
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const RngStream srng = rng.derive(streams::kTrain, step);
    const ObjectiveDraws d = draw_objective(model, cfg.objective, cfg.batch, cfg.m, srng, prior);
    double estimate = 0.0;
    std::vector<ad::Tensor> gxi;
    if (qp && cfg.scheme == UpdateScheme::alternating) {
      auto [est_q, gq] = evaluate(d, false, true, step);
      q_opt.step(*qp, gq);
      check_finite(*qp, step, "approximation parameters");
      auto [est, g] = evaluate(d, true, false, step);
      estimate = est;
      gxi = std::move(g);
    } else {
      auto [est, g] = evaluate(d, true, qp != nullptr, step);
      estimate = est;
      if (qp) {
        std::vector<ad::Tensor> gq(std::make_move_iterator(g.begin() + 1), std::make_move_iterator(g.end()));
        q_opt.step(*qp, gq);
        check_finite(*qp, step, "approximation parameters");
      }
      gxi.push_back(std::move(g[0]));
    }
    out.trace.push_back({step, xi.data, estimate});
    std::vector<ad::Tensor> xs{xi};
    xi_opt.step(xs, gxi);
    xi = ad::Tensor::row(con.project(Design(xs[0].data)).values);
    if (!con.contains(Design(xi.data))) throw Error("design iterate left the constraint set at step " + std::to_string(step));
  }
  out.xi = Design(xi.data);
  return out;
}

}  // namespace opt_detail

/// Held-out estimate of an objective at a fixed design.
inline EigEstimate held_out_bound(const Model& model, const Design& xi, BoundKind kind, const Variational& q,
                                  std::size_t n, std::size_t m, const RngStream& rng, const LatentSampler* prior) {
  if (kind == BoundKind::pce) return ace_bound(model, xi, nullptr, n, m, rng, InnerSampling::fresh, prior);
  return evaluate_bound(model, xi, kind, q, n, m, rng);
}

/// Projected stochastic-gradient ascent from `restarts` starts; the restart
/// with the highest held-out bound (common streams across restarts) wins.
/// `prior` replaces the model prior (pce objective only: no prior density needed).
inline OptResult sga_optimize(const Model& model, const OptConfig& cfg, const RngStream& rng,
                              const LatentSampler* prior = nullptr) {
  cfg.validate();
  if (!model.capabilities().differentiable) throw CapabilityError("model '" + model.id() + "' has no taped likelihood");
  if (prior && cfg.objective != BoundKind::pce) throw ConfigError("a replacement prior is only supported with the pce objective");
  const Constraint con = cfg.constraint ? *cfg.constraint : model.constraint();
  if (con.dim() != model.design_dim()) throw ShapeError("constraint dimension does not match the model design");
  OptResult res;
  res.restarts.resize(cfg.restarts);
  const RngStream held = rng.derive(streams::kHeldOut, 0);
  parallel_for(cfg.restarts, [&](std::size_t r) {
    RestartResult rr = opt_detail::run_restart(model, cfg, con, rng.derive(streams::kRestart, r), prior);
    rr.held_out = held_out_bound(model, rr.xi, cfg.objective, rr.q, cfg.eval_n, cfg.eval_m, held, prior);
    res.restarts[r] = std::move(rr);
  });
  for (std::size_t r = 1; r < res.restarts.size(); ++r)
    if (res.restarts[r].held_out.value > res.restarts[res.best_restart].held_out.value) res.best_restart = r;
  res.xi = res.restarts[res.best_restart].xi;
  res.bound = res.restarts[res.best_restart].held_out;
  return res;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridConfig {
  EstimatorId estimator = EstimatorId::nmc;
  std::size_t n = 1000;
  std::size_t m = 100;  // nmc inner samples
  MlmcConfig mlmc;      // replicates taken from n
};

struct GridRow {
  Design xi;
  EigEstimate estimate;
};

struct GridResult {
  Design xi;
  std::size_t best = 0;
  std::vector<GridRow> table;  // in sorted grid order
};

inline EigEstimate estimate_at(const Model& model, const Design& xi, const GridConfig& cfg, const RngStream& rng,
                               const LatentSampler& prior) {
  switch (cfg.estimator) {
    case EstimatorId::rb:
      return rb_eig(model, xi, cfg.n, rng, prior, 0);
    case EstimatorId::nmc:
      return nmc_eig(model, xi, NmcConfig{cfg.n, cfg.m, nullptr, InnerSampling::fresh}, rng, prior);
    case EstimatorId::mlmc: {
      MlmcConfig c = cfg.mlmc;
      c.replicates = cfg.n;
      return mlmc_eig(model, xi, c, rng, prior);
    }
  }
  throw ConfigError("unknown estimator");
}

/// Evaluates every grid point on the same streams; ties go to the first point
/// in lexicographic order, so the result does not depend on the input order.
inline GridResult grid_search(const Model& model, std::vector<Design> grid, const GridConfig& cfg, const RngStream& rng,
                              const LatentSampler* prior = nullptr) {
  if (grid.empty()) throw ConfigError("grid search: empty grid");
  for (const auto& xi : grid) model.validate_design(xi);
  std::sort(grid.begin(), grid.end(), [](const Design& a, const Design& b) { return a.values < b.values; });
  const PriorSampler own(model);
  const LatentSampler& p = prior ? *prior : own;
  GridResult res;
  res.table.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) res.table[i] = {grid[i], estimate_at(model, grid[i], cfg, rng, p)};
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (res.table[i].estimate.value > res.table[res.best].estimate.value) res.best = i;
  res.xi = res.table[res.best].xi;
  return res;
}

/// Regular grid over the constraint set: `per_dim` points per axis of the
/// bounding box, keeping those inside the set.
inline std::vector<Design> uniform_grid(const Constraint& con, std::size_t per_dim) {
  if (per_dim < 1) throw ConfigError("grid needs at least one point per dimension");
  const std::size_t d = con.dim();
  if (d > 2) throw ConfigError("grid search supports design dimension at most 2");
  std::vector<double> lo(d), hi(d);
  for (std::size_t j = 0; j < d; ++j) {
    lo[j] = con.kind() == Constraint::Kind::ball ? -con.radius() : con.lower()[j];
    hi[j] = con.kind() == Constraint::Kind::ball ? con.radius() : con.upper()[j];
  }
  auto axis = [&](std::size_t j, std::size_t i) {
    return per_dim == 1 ? 0.5 * (lo[j] + hi[j]) : lo[j] + (hi[j] - lo[j]) * static_cast<double>(i) / static_cast<double>(per_dim - 1);
  };
  std::vector<Design> out;
  if (d == 1) {
    for (std::size_t i = 0; i < per_dim; ++i) out.emplace_back(std::vector<double>{axis(0, i)});
  } else {
    for (std::size_t i = 0; i < per_dim; ++i)
      for (std::size_t k = 0; k < per_dim; ++k) out.emplace_back(std::vector<double>{axis(0, i), axis(1, k)});
  }
  std::erase_if(out, [&](const Design& x) { return !con.contains(x, 1e-9); });
  return out;
}

}  // namespace eiglab
