#pragma once

// Amortized design policies: a permutation-invariant history encoder and a
// head network mapping the pooled encoding to the next design, trained by
// ascending a sequential prior-contrastive lower bound on total EIG.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "eiglab/bounds.hpp"
#include "eiglab/core.hpp"
#include "eiglab/estimators.hpp"
#include "eiglab/nn.hpp"

namespace eiglab {

/// Anything that maps a history to the next design.
class DesignPolicy {
 public:
  virtual ~DesignPolicy() = default;
  virtual Design propose(const History& h) const = 0;
};

/// Always proposes the same design (or the t-th entry of a fixed sequence).
class FixedDesignPolicy final : public DesignPolicy {
 public:
  explicit FixedDesignPolicy(std::vector<Design> seq) : seq_(std::move(seq)) {
    if (seq_.empty()) throw ConfigError("fixed policy needs at least one design");
  }
  explicit FixedDesignPolicy(Design xi) : FixedDesignPolicy(std::vector<Design>{std::move(xi)}) {}
  Design propose(const History& h) const override { return seq_[std::min(h.size(), seq_.size() - 1)]; }

 private:
  std::vector<Design> seq_;
};

/// Uniform random designs; the draw is a deterministic function of the history.
class RandomDesignPolicy final : public DesignPolicy {
 public:
  RandomDesignPolicy(Constraint con, std::uint64_t seed) : con_(std::move(con)), seed_(seed) {}

  Design propose(const History& h) const override {
    std::uint64_t key = h.size();
    for (const auto& s : h) {
      for (double v : s.design.values) key = detail::splitmix64(key ^ std::bit_cast<std::uint64_t>(v));
      for (double v : s.outcome.features()) key = detail::splitmix64(key ^ std::bit_cast<std::uint64_t>(v));
    }
    RngStream rng(seed_, key);
    return con_.sample_uniform(rng);
  }

 private:
  Constraint con_;
  std::uint64_t seed_;
};

/// Same map as Constraint::squash, in plain doubles.
inline Design squash_values(const Constraint& con, std::vector<double> u) {
  if (con.kind() == Constraint::Kind::box) {
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double mid = 0.5 * (con.lower()[i] + con.upper()[i]);
      const double half = 0.5 * (con.upper()[i] - con.lower()[i]);
      u[i] = std::tanh(u[i]) * half + mid;
    }
    return Design(std::move(u));
  }
  if (u.size() == 1) return Design({con.radius() * std::tanh(u[0])});
  double s = 0.0;
  for (double v : u) s += v * v;
  const double r = std::sqrt(s + 1e-12);
  const double f = std::tanh(r) / r;
  for (double& v : u) v = con.radius() * (v * f);
  return Design(std::move(u));
}

inline constexpr std::size_t kEncodingDim = 32;
inline constexpr std::size_t kHiddenWidth = 64;

class PolicyNetwork final : public DesignPolicy {
 public:
  PolicyNetwork() = default;

  PolicyNetwork(const Model& model, std::size_t horizon, RngStream rng)
      : model_id_(model.id()),
        horizon_(horizon),
        design_dim_(model.design_dim()),
        y_dim_(model.outcome_space().finite ? 1 : model.outcome_space().dim),
        constraint_(model.constraint()) {
    nn::Mlp enc({design_dim_ + y_dim_, kHiddenWidth, kHiddenWidth, kEncodingDim}, rng.derive(0, 0));
    nn::Mlp head({kEncodingDim, kHiddenWidth, kHiddenWidth, design_dim_}, rng.derive(1, 0));
    params_ = enc.params();
    params_.insert(params_.end(), head.params().begin(), head.params().end());
  }

  const std::string& model_id() const { return model_id_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t design_dim() const { return design_dim_; }
  const Constraint& constraint() const { return constraint_; }
  std::vector<ad::Tensor>& params() { return params_; }
  const std::vector<ad::Tensor>& params() const { return params_; }

  std::span<const ad::Tensor> encoder_params() const { return std::span(params_).first(6); }
  std::span<const ad::Tensor> head_params() const { return std::span(params_).subspan(6); }

  /// Sum of per-step encodings, summed in a canonical step order so the
  /// result is bit-identical under any permutation of the history.
  std::vector<double> encode(const History& h) const {
    std::vector<std::vector<double>> rows;
    rows.reserve(h.size());
    for (const auto& s : h) {
      if (s.design.dim() != design_dim_) throw ShapeError("policy: history design dimension mismatch");
      std::vector<double> x = s.design.values;
      const auto f = s.outcome.features();
      if (f.size() != y_dim_) throw ShapeError("policy: history outcome dimension mismatch");
      x.insert(x.end(), f.begin(), f.end());
      rows.push_back(std::move(x));
    }
    std::sort(rows.begin(), rows.end());
    std::vector<double> pooled(kEncodingDim, 0.0);
    for (const auto& x : rows) {
      const auto e = nn::mlp_eval(encoder_params(), x);
      for (std::size_t j = 0; j < kEncodingDim; ++j) pooled[j] += e[j];
    }
    return pooled;
  }

  Design propose(const History& h) const override {
    Design xi = squash_values(constraint_, nn::mlp_eval(head_params(), encode(h)));
    for (double v : xi.values)
      if (!std::isfinite(v)) throw PolicyError("policy produced a non-finite design");
    return xi;
  }

  // Checkpoint: "EIGP", u32 version, u32 length + model id, u32 T, u32 tensor
  // count, per tensor u32 rows and u32 cols, then every weight as f64, all
  // little-endian, row-major.
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string serialize() const {
    std::string f = "EIGP";
    put_u32(f, kFormatVersion);
    put_u32(f, static_cast<std::uint32_t>(model_id_.size()));
    f += model_id_;
    put_u32(f, static_cast<std::uint32_t>(horizon_));
    put_u32(f, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
      put_u32(f, static_cast<std::uint32_t>(p.rows()));
      put_u32(f, static_cast<std::uint32_t>(p.cols()));
    }
    for (const auto& p : params_)
      for (double v : p.data) put_u64(f, std::bit_cast<std::uint64_t>(v));
    return f;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    const std::string bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing policy checkpoint '" + path + "'");
  }

  static PolicyNetwork load(const std::string& path, const Model& model) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("policy checkpoint '" + path + "' not found");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "EIGP", 4) != 0) throw ConfigError("'" + path + "' is not a policy checkpoint");
    const std::uint32_t version = get_u32(f);
    if (version != kFormatVersion) throw ConfigError("unsupported policy checkpoint version " + std::to_string(version));
    const std::uint32_t id_len = get_u32(f);
    if (!f || id_len > 256) throw ConfigError("policy checkpoint '" + path + "' has a corrupt header");
    std::string id(id_len, '\0');
    f.read(id.data(), static_cast<std::streamsize>(id.size()));
    if (id != model.id()) throw ConfigError("checkpoint was trained for model '" + id + "', not '" + model.id() + "'");
    PolicyNetwork p;
    p.model_id_ = id;
    p.horizon_ = get_u32(f);
    p.design_dim_ = model.design_dim();
    p.y_dim_ = model.outcome_space().finite ? 1 : model.outcome_space().dim;
    p.constraint_ = model.constraint();
    const std::uint32_t count = get_u32(f);
    if (count != 12) throw ConfigError("policy checkpoint has an unexpected layer count");
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::uint32_t r = get_u32(f), c = get_u32(f);
      p.params_.emplace_back(r, c, 0.0);
    }
    for (auto& t : p.params_)
      for (double& v : t.data) v = std::bit_cast<double>(get_u64(f));
    if (!f) throw ConfigError("policy checkpoint '" + path + "' is truncated");
    // shape check against a fresh network
    PolicyNetwork ref(model, p.horizon_, RngStream(0, 0));
    for (std::size_t i = 0; i < count; ++i)
      if (ref.params_[i].shape != p.params_[i].shape) throw ConfigError("policy checkpoint shapes do not match the model");
    return p;
  }

 private:
  static void put_u32(std::string& f, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) f += static_cast<char>(v >> (8 * i));
  }
  static void put_u64(std::string& f, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) f += static_cast<char>(v >> (8 * i));
  }
  static std::uint32_t get_u32(std::ifstream& f) {
    unsigned char b[4] = {};
    f.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  static std::uint64_t get_u64(std::ifstream& f) {
    unsigned char b[8] = {};
    f.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::string model_id_;
  std::size_t horizon_ = 0, design_dim_ = 0, y_dim_ = 0;
  Constraint constraint_;
  std::vector<ad::Tensor> params_;
};

inline Design deploy_step(const DesignPolicy& policy, const History& h) { return policy.propose(h); }

// ---------------------------------------------------------------------------
// Rollouts and the sequential prior-contrastive bound

struct RolloutBatch {
  std::vector<LatentSample> theta0;
  std::vector<History> histories;
  std::vector<double> log_lik0;                 // sum_t log p(y_t | theta_0, xi_t)
  std::vector<LatentSample> contrasts;          // shared theta_1..L
  std::vector<std::vector<double>> log_lik_c;   // [b][l] sum_t log p(y_t | theta_l, xi_t)
};

/// Trajectory b draws theta_0 and then each y_t from derive(b, 0); contrasts
/// are shared by the whole batch and come from the shared inner stream.
inline RolloutBatch rollout(const Model& model, const DesignPolicy& policy, std::size_t horizon, std::size_t batch,
                            std::size_t contrasts, const RngStream& rng) {
  if (horizon < 1) throw ConfigError("rollout: T must be at least 1");
  if (batch < 1) throw ConfigError("rollout: B must be at least 1");
  RolloutBatch out;
  out.theta0.resize(batch);
  out.histories.resize(batch);
  out.log_lik0.assign(batch, 0.0);
  out.log_lik_c.assign(batch, std::vector<double>(contrasts, 0.0));
  RngStream cs = rng.derive(streams::kShared, streams::kInner);
  for (std::size_t l = 0; l < contrasts; ++l) out.contrasts.push_back(model.sample_prior(cs));
  parallel_for(batch, [&](std::size_t b) {
    RngStream s = rng.derive(b, streams::kOuter);
    const LatentSample theta = model.sample_prior(s);
    History h;
    double l0 = 0.0;
    auto& lc = out.log_lik_c[b];
    for (std::size_t t = 0; t < horizon; ++t) {
      Design xi = policy.propose(h);
      for (double v : xi.values)
        if (!std::isfinite(v))
          throw PolicyError("non-finite design in trajectory " + std::to_string(b) + " at step " + std::to_string(t));
      model.validate_design(xi);
      Outcome y = model.sample_outcome(theta, xi, s);
      l0 += model.log_likelihood(y, theta, xi);
      for (std::size_t l = 0; l < lc.size(); ++l) lc[l] += model.log_likelihood(y, out.contrasts[l], xi);
      h.push(std::move(xi), std::move(y));
    }
    out.theta0[b] = theta;
    out.histories[b] = std::move(h);
    out.log_lik0[b] = l0;
  });
  return out;
}

/// Lower bound on total EIG: mean over trajectories of
/// log p(y_1:T | theta_0) - log (1/(L+1)) sum_{l=0}^{L} p(y_1:T | theta_l).
inline EigEstimate spce_total_bound(const Model& model, const DesignPolicy& policy, std::size_t horizon,
                                    std::size_t batch, std::size_t contrasts, const RngStream& rng) {
  if (contrasts < 1) throw ConfigError("sequential bound: L must be at least 1");
  const RolloutBatch r = rollout(model, policy, horizon, batch, contrasts, rng);
  const double cap = std::log(static_cast<double>(contrasts + 1));
  std::vector<double> terms(batch), scratch;
  for (std::size_t b = 0; b < batch; ++b) {
    terms[b] = contrastive_term(r.log_lik0[b], r.log_lik0[b], r.log_lik_c[b], scratch);
    if (terms[b] > cap) throw NumericError("sequential bound term " + std::to_string(b) + " exceeds log(L+1)");
  }
  return summarize(terms, batch * horizon * (contrasts + 1));
}

// ---------------------------------------------------------------------------
// Training

struct PolicyTrainConfig {
  std::size_t batch = 64;
  std::size_t contrasts = 31;
  std::size_t steps = 1000;
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
  nn::StepSchedule schedule{3e-4, 1.0, 1000};  // 1e-3 oscillates and saturates on location finding

  void validate() const {
    if (batch < 1 || contrasts < 1) throw ConfigError("policy training: B and L must be at least 1");
  }
};

/// Common random numbers for one taped rollout.
struct PolicyDraws {
  ad::Tensor theta0;     // [B, d_theta]
  std::vector<ad::Tensor> noise;  // per step [B, noise_dim]
  ad::Tensor contrasts;  // [B*L, d_theta]; row b*L + l holds theta_l
};

inline PolicyDraws draw_policy(const Model& model, std::size_t horizon, std::size_t batch, std::size_t contrasts,
                               const RngStream& rng) {
  const std::size_t dt = model.theta_dim(), dn = model.noise_dim();
  PolicyDraws d;
  d.theta0 = ad::Tensor(batch, dt, 0.0);
  d.noise.assign(horizon, ad::Tensor(batch, dn, 0.0));
  for (std::size_t b = 0; b < batch; ++b) {
    RngStream s = rng.derive(b, streams::kOuter);
    const LatentSample t = model.sample_prior(s);
    for (std::size_t j = 0; j < dt; ++j) d.theta0(b, j) = t[j];
    for (std::size_t k = 0; k < horizon; ++k)
      for (std::size_t j = 0; j < dn; ++j) d.noise[k](b, j) = s.normal();
  }
  RngStream cs = rng.derive(streams::kShared, streams::kInner);
  std::vector<LatentSample> c;
  for (std::size_t l = 0; l < contrasts; ++l) c.push_back(model.sample_prior(cs));
  d.contrasts = ad::Tensor(batch * contrasts, dt, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < contrasts; ++l)
      for (std::size_t j = 0; j < dt; ++j) d.contrasts(b * contrasts + l, j) = c[l][j];
  return d;
}

/// Taped sequential bound terms [B, 1] for a policy whose parameters are on the tape.
inline ad::Var spce_terms(const Model& model, const PolicyNetwork& policy, std::span<const ad::Var> params,
                          const PolicyDraws& d) {
  using namespace ad;
  if (model.outcome_space().finite) throw CapabilityError("policy training needs reparameterized continuous outcomes");
  Tape& tape = params[0].tape();
  const std::size_t batch = d.theta0.rows();
  const std::size_t contrasts = d.contrasts.rows() / batch;
  const auto enc = params.first(6);
  const auto head = params.subspan(6);
  Var theta0 = tape.constant(d.theta0);
  Var thetac = tape.constant(d.contrasts);
  Var pooled = tape.constant(Tensor(batch, kEncodingDim, 0.0));
  std::optional<Var> l0, lc;
  for (std::size_t t = 0; t < d.noise.size(); ++t) {
    Var xi = policy.constraint().squash(nn::Mlp::forward(head, pooled));
    Var y = model.ad_reparam_outcome(theta0, xi, d.noise[t]);
    Var a = model.ad_log_likelihood(y, theta0, xi);
    Var c = model.ad_log_likelihood(repeat_rows(y, contrasts), thetac, repeat_rows(xi, contrasts));
    l0 = l0 ? *l0 + a : a;
    lc = lc ? *lc + c : c;
    if (t + 1 < d.noise.size()) pooled = pooled + nn::Mlp::forward(enc, concat_cols(xi, y));
  }
  Var lcm = reshape(*lc, batch, contrasts);
  return *l0 - shift(logsumexp(concat_cols(*l0, lcm)), -std::log(static_cast<double>(contrasts + 1)));
}

struct TrainedPolicy {
  PolicyNetwork policy;
  std::vector<TraceRow> trace;
};

inline TrainedPolicy train_policy(const Model& model, std::size_t horizon, const PolicyTrainConfig& cfg,
                                  const RngStream& rng) {
  cfg.validate();
  if (horizon < 1) throw ConfigError("policy training: T must be at least 1");
  if (!model.capabilities().differentiable || model.outcome_space().finite)
    throw CapabilityError("policy training needs a differentiable model with continuous outcomes");
  TrainedPolicy out{PolicyNetwork(model, horizon, rng.derive(streams::kInit, 2)), {}};
  nn::Optimizer opt(cfg.optimizer, cfg.schedule, 1.0);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const PolicyDraws d = draw_policy(model, horizon, cfg.batch, cfg.contrasts, rng.derive(streams::kTrain, step));
    ad::Tape tape;
    const auto params = tape.variables(out.policy.params());
    ad::Var terms = [&] {
      try {
        return spce_terms(model, out.policy, params, d);
      } catch (const NumericError& e) {
        throw TrainingError(step, e.what());
      }
    }();
    const auto [est, se] = term_stats(terms.value());
    out.trace.push_back({step, est, se});
    auto grads = tape.grad(ad::mean(terms), params);
    for (const auto& g : grads)
      for (double v : g.data)
        if (!std::isfinite(v)) throw TrainingError(step, "non-finite policy gradient");
    opt.step(out.policy.params(), grads);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact enumeration for finite outcome sets and a discrete prior on theta.

struct DiscretePrior {
  std::vector<LatentSample> support;
  std::vector<double> weights;  // normalized
};

namespace policy_detail {

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) h -= math::xlogx(v);
  return h;
}

/// I(theta; y_{t..T} | h) under the belief `w` over the support, by recursion.
inline double total_from(const Model& model, const DiscretePrior& prior, const std::vector<double>& w,
                         const DesignPolicy& policy, const History& h, std::size_t remaining) {
  if (remaining == 0) return 0.0;
  const Design xi = policy.propose(h);
  const std::size_t k = model.outcome_space().count;
  std::vector<std::vector<double>> table(prior.support.size());
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = model.likelihood_table(prior.support[i], xi);
  double info = 0.0;
  for (std::size_t y = 0; y < k; ++y) {
    double py = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) py += w[i] * table[i][y];
    if (py <= 0.0) continue;
    std::vector<double> post(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) post[i] = w[i] * table[i][y] / py;
    History next = h;
    next.push(xi, Outcome::discrete(y));
    // entropy reduction from this outcome plus what the rest of the experiment adds
    info += py * (entropy(w) - entropy(post) + total_from(model, prior, post, policy, next, remaining - 1));
  }
  return info;
}

}  // namespace policy_detail

/// Total EIG I(theta; y_1:T) of a policy, by enumerating every outcome path.
inline double enumerate_total_eig(const Model& model, const DiscretePrior& prior, const DesignPolicy& policy,
                                  std::size_t horizon) {
  if (!model.outcome_space().finite) throw CapabilityError("enumeration needs a finite outcome set");
  const std::size_t k = model.outcome_space().count;
  // I = H[y_1:T] - H[y_1:T | theta], each by explicit path enumeration.
  double h_marg = 0.0, h_cond = 0.0;
  std::vector<std::size_t> path(horizon, 0);
  for (;;) {
    History h;
    std::vector<double> lik(prior.support.size(), 1.0);
    for (std::size_t t = 0; t < horizon; ++t) {
      const Design xi = policy.propose(h);
      for (std::size_t i = 0; i < lik.size(); ++i) lik[i] *= model.likelihood_table(prior.support[i], xi)[path[t]];
      h.push(xi, Outcome::discrete(path[t]));
    }
    double p = 0.0;
    for (std::size_t i = 0; i < lik.size(); ++i) {
      p += prior.weights[i] * lik[i];
      h_cond -= prior.weights[i] * math::xlogx(lik[i]);
    }
    h_marg -= math::xlogx(p);
    std::size_t t = 0;
    while (t < horizon && ++path[t] == k) path[t++] = 0;
    if (t == horizon) break;
  }
  return h_marg - h_cond;
}

/// Sum over steps of the expected incremental EIG, E_{h_{t-1}}[EIG(xi_t | h_{t-1})].
inline double enumerate_incremental_eig_sum(const Model& model, const DiscretePrior& prior, const DesignPolicy& policy,
                                            std::size_t horizon) {
  if (!model.outcome_space().finite) throw CapabilityError("enumeration needs a finite outcome set");
  return policy_detail::total_from(model, prior, prior.weights, policy, History{}, horizon);
}

}  // namespace eiglab
