#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "eiglab/autodiff.hpp"
#include "eiglab/errors.hpp"
#include "eiglab/rng.hpp"

namespace eiglab {

using json = nlohmann::json;

inline void require_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw ConfigError(std::string(what) + " has a non-finite entry");
  }
}

/// Experiment setting xi.
struct Design {
  std::vector<double> values;

  Design() = default;
  explicit Design(std::vector<double> v) : values(std::move(v)) {}
  Design(std::initializer_list<double> v) : values(v) {}

  std::size_t dim() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const Design&) const = default;
};

/// A draw of the latent quantity theta.
struct LatentSample {
  std::vector<double> values;

  LatentSample() = default;
  explicit LatentSample(std::vector<double> v) : values(std::move(v)) {}
  LatentSample(std::initializer_list<double> v) : values(v) {}

  std::size_t dim() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const LatentSample&) const = default;
};

/// Observed y: a real vector, or an index into a finite outcome set.
class Outcome {
 public:
  Outcome() = default;
  static Outcome continuous(std::vector<double> v) { return Outcome(std::move(v)); }
  static Outcome discrete(std::size_t index) { return Outcome(index); }

  bool is_discrete() const { return std::holds_alternative<std::size_t>(v_); }
  std::size_t index() const {
    if (!is_discrete()) throw CapabilityError("outcome is continuous, not an index");
    return std::get<std::size_t>(v_);
  }
  const std::vector<double>& values() const {
    if (is_discrete()) throw CapabilityError("outcome is discrete, not a vector");
    return std::get<std::vector<double>>(v_);
  }
  double scalar() const { return values().at(0); }

  /// Numeric features (the index as a real for discrete outcomes).
  std::vector<double> features() const {
    return is_discrete() ? std::vector<double>{static_cast<double>(index())} : values();
  }

  bool operator==(const Outcome&) const = default;

 private:
  explicit Outcome(std::vector<double> v) : v_(std::move(v)) {}
  explicit Outcome(std::size_t i) : v_(i) {}
  std::variant<std::vector<double>, std::size_t> v_;
};

struct HistoryStep {
  Design design;
  Outcome outcome;
};

/// Ordered (design, outcome) pairs; h_0 is empty.
class History {
 public:
  History() = default;
  explicit History(std::vector<HistoryStep> steps) {
    for (auto& s : steps) push(std::move(s.design), std::move(s.outcome));
  }

  void push(Design xi, Outcome y) {
    if (!steps_.empty() && xi.dim() != steps_.front().design.dim())
      throw ConfigError("history designs must share one dimension");
    steps_.push_back({std::move(xi), std::move(y)});
  }

  std::size_t size() const { return steps_.size(); }
  bool empty() const { return steps_.empty(); }
  const HistoryStep& operator[](std::size_t i) const { return steps_[i]; }
  const std::vector<HistoryStep>& steps() const { return steps_; }
  auto begin() const { return steps_.begin(); }
  auto end() const { return steps_.end(); }

 private:
  std::vector<HistoryStep> steps_;
};

/// Feasible design set: Euclidean ball of radius rho about 0, or an axis box.
class Constraint {
 public:
  enum class Kind { ball, box };

  static Constraint ball(std::size_t dim, double radius) {
    if (!(radius > 0.0)) throw ConfigError("ball radius must be positive");
    Constraint c;
    c.kind_ = Kind::ball;
    c.dim_ = dim;
    c.radius_ = radius;
    return c;
  }

  static Constraint box(std::vector<double> lower, std::vector<double> upper) {
    if (lower.size() != upper.size() || lower.empty()) throw ConfigError("box bounds must have equal, positive length");
    for (std::size_t i = 0; i < lower.size(); ++i)
      if (!(lower[i] < upper[i])) throw ConfigError("box lower bound must be below upper bound");
    Constraint c;
    c.kind_ = Kind::box;
    c.dim_ = lower.size();
    c.lower_ = std::move(lower);
    c.upper_ = std::move(upper);
    return c;
  }

  Kind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  double radius() const { return radius_; }
  const std::vector<double>& lower() const { return lower_; }
  const std::vector<double>& upper() const { return upper_; }

  bool contains(const Design& xi, double tol = 1e-12) const {
    if (xi.dim() != dim_) return false;
    for (double v : xi.values)
      if (!std::isfinite(v)) return false;
    if (kind_ == Kind::ball) return norm(xi.values) <= radius_ * (1.0 + tol);
    for (std::size_t i = 0; i < dim_; ++i)
      if (xi[i] < lower_[i] - tol || xi[i] > upper_[i] + tol) return false;
    return true;
  }

  /// Euclidean projection onto the feasible set.
  Design project(const Design& xi) const {
    if (xi.dim() != dim_) throw InvalidDesignError("design dimension mismatch in projection");
    Design out = xi;
    if (kind_ == Kind::ball) {
      const double n = norm(xi.values);
      if (n > radius_)
        for (double& v : out.values) v *= radius_ / n;
    } else {
      for (std::size_t i = 0; i < dim_; ++i) out.values[i] = std::clamp(out.values[i], lower_[i], upper_[i]);
    }
    return out;
  }

  /// Uniform draw from the feasible set (rejection for the ball).
  Design sample_uniform(RngStream& rng) const {
    std::vector<double> v(dim_);
    if (kind_ == Kind::box) {
      for (std::size_t i = 0; i < dim_; ++i) v[i] = lower_[i] + (upper_[i] - lower_[i]) * rng.uniform();
      return Design(v);
    }
    for (;;) {
      for (double& x : v) x = radius_ * (2.0 * rng.uniform() - 1.0);
      if (norm(v) <= radius_) return Design(v);
    }
  }

  /// Smooth map from R^d onto the interior of the set: tanh per box
  /// coordinate, radial tanh for the ball. u has shape [n, d].
  ad::Var squash(ad::Var u) const {
    using namespace ad;
    if (u.cols() != dim_) throw ShapeError("constraint squash: dimension mismatch");
    Tape& tape = u.tape();
    if (kind_ == Kind::box) {
      std::vector<double> mid(dim_), half(dim_);
      for (std::size_t i = 0; i < dim_; ++i) {
        mid[i] = 0.5 * (lower_[i] + upper_[i]);
        half[i] = 0.5 * (upper_[i] - lower_[i]);
      }
      return tanh(u) * tape.constant(Tensor::row(half)) + tape.constant(Tensor::row(mid));
    }
    if (dim_ == 1) return scale(tanh(u), radius_);
    Var r = sqrt(shift(row_sum(square(u)), 1e-12));
    Var factor = tanh(r) / r;
    return scale(u * tile_cols(factor, dim_), radius_);
  }

  json to_json() const {
    if (kind_ == Kind::ball) return {{"kind", "ball"}, {"radius", radius_}, {"dim", dim_}};
    return {{"kind", "box"}, {"lower", lower_}, {"upper", upper_}};
  }

  static double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }

 private:
  Kind kind_ = Kind::box;
  std::size_t dim_ = 0;
  double radius_ = 0.0;
  std::vector<double> lower_, upper_;
};

struct OutcomeSpace {
  bool finite = false;
  std::size_t count = 0;  // |Y| when finite
  std::size_t dim = 1;    // vector length when continuous
};

struct Capabilities {
  bool closed_form_eig = false;
  bool closed_form_posterior = false;
  bool differentiable = false;  // AD likelihood / reparameterized outcomes available
};

/// The contract every model satisfies: prior sampling and density, outcome
/// simulation and likelihood, and (finite outcome sets) likelihood tables.
/// Differentiable variants operate on batches: rows are samples.
/// Implementations are immutable after construction and safe to share.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string id() const = 0;
  virtual std::size_t theta_dim() const = 0;
  virtual std::size_t design_dim() const = 0;
  virtual OutcomeSpace outcome_space() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual const Constraint& constraint() const = 0;
  virtual json params() const = 0;

  virtual LatentSample sample_prior(RngStream& rng) const = 0;
  virtual double log_prior(const LatentSample& theta) const = 0;
  virtual Outcome sample_outcome(const LatentSample& theta, const Design& xi, RngStream& rng) const = 0;
  virtual double log_likelihood(const Outcome& y, const LatentSample& theta, const Design& xi) const = 0;

  /// Probability vector over the finite outcome set.
  virtual std::vector<double> likelihood_table(const LatentSample&, const Design&) const {
    throw CapabilityError("model '" + id() + "' has a continuous outcome space");
  }

  virtual std::optional<double> closed_form_eig(const Design&) const { return std::nullopt; }

  // Differentiable batch interface. theta: [n, theta_dim]; xi: [n or 1, design_dim];
  // y: [n, outcome dim] (finite models: the index as a real, one column).

  /// Log-likelihood per row -> [n, 1].
  virtual ad::Var ad_log_likelihood(ad::Var, ad::Var, ad::Var) const {
    throw CapabilityError("model '" + id() + "' has no differentiable likelihood");
  }
  /// Log prior density per row -> [n, 1].
  virtual ad::Var ad_log_prior(ad::Var) const {
    throw CapabilityError("model '" + id() + "' has no differentiable prior");
  }
  /// Outcomes as a deterministic function of (theta, xi, noise); noise: [n, noise_dim].
  virtual ad::Var ad_reparam_outcome(ad::Var, ad::Var, const ad::Tensor&) const {
    throw CapabilityError("model '" + id() + "' has no reparameterized outcome sampler");
  }
  /// Log-probabilities over the finite outcome set -> [n, |Y|].
  virtual ad::Var ad_log_likelihood_table(ad::Var, ad::Var) const {
    throw CapabilityError("model '" + id() + "' has a continuous outcome space");
  }
  /// Standard-normal draws consumed per sample_outcome call (reparameterizable models).
  virtual std::size_t noise_dim() const { return outcome_space().dim; }

  // Validation helpers shared by every pipeline.

  void validate_design(const Design& xi) const {
    if (xi.dim() != design_dim())
      throw InvalidDesignError("design has dimension " + std::to_string(xi.dim()) + ", model '" + id() +
                               "' expects " + std::to_string(design_dim()));
    if (!constraint().contains(xi)) throw InvalidDesignError("design violates the constraints of model '" + id() + "'");
  }

  void validate_outcome(const Outcome& y) const {
    const OutcomeSpace space = outcome_space();
    if (space.finite) {
      if (!y.is_discrete()) throw InvalidOutcomeError("model '" + id() + "' expects a discrete outcome index");
      if (y.index() >= space.count)
        throw InvalidOutcomeError("outcome index " + std::to_string(y.index()) + " outside outcome set of size " +
                                  std::to_string(space.count));
      return;
    }
    if (y.is_discrete()) throw InvalidOutcomeError("model '" + id() + "' expects a continuous outcome");
    if (y.values().size() != space.dim) throw InvalidOutcomeError("outcome dimension mismatch");
    for (double v : y.values())
      if (!std::isfinite(v)) throw InvalidOutcomeError("outcome has a non-finite entry");
  }

  void validate_theta(const LatentSample& theta) const {
    if (theta.dim() != theta_dim()) throw ShapeError("latent sample dimension mismatch");
  }
};

/// Source of latent draws: the model prior, or a belief standing in for it.
class LatentSampler {
 public:
  virtual ~LatentSampler() = default;
  virtual LatentSample sample(RngStream& rng) const = 0;
};

class PriorSampler final : public LatentSampler {
 public:
  explicit PriorSampler(const Model& model) : model_(&model) {}
  LatentSample sample(RngStream& rng) const override { return model_->sample_prior(rng); }

 private:
  const Model* model_;
};

/// theta ~ p(theta), then y ~ p(y | theta, xi), both from `rng`.
inline std::pair<LatentSample, Outcome> sample_joint(const Model& model, const Design& xi, RngStream& rng) {
  model.validate_design(xi);
  LatentSample theta = model.sample_prior(rng);
  Outcome y = model.sample_outcome(theta, xi, rng);
  return {std::move(theta), std::move(y)};
}

inline double log_joint(const Model& model, const LatentSample& theta, const Outcome& y, const Design& xi) {
  model.validate_theta(theta);
  if (xi.dim() != model.design_dim()) throw ShapeError("design dimension mismatch");
  model.validate_outcome(y);
  const double lp = model.log_prior(theta);
  if (!std::isfinite(lp)) throw NumericError("log_joint: non-finite log_prior term");
  const double ll = model.log_likelihood(y, theta, xi);
  if (!std::isfinite(ll)) throw NumericError("log_joint: non-finite log_likelihood term");
  return lp + ll;
}

inline json to_json(const Outcome& y) {
  if (y.is_discrete()) return y.index();
  if (y.values().size() == 1) return y.values()[0];
  return y.values();
}

inline Outcome outcome_from_json(const Model& model, const json& j) {
  const OutcomeSpace space = model.outcome_space();
  Outcome y;
  if (space.finite) {
    if (!j.is_number_integer() && !j.is_number_unsigned())
      throw InvalidOutcomeError("model '" + model.id() + "' expects an integer outcome index");
    const auto v = j.get<long long>();
    if (v < 0) throw InvalidOutcomeError("outcome index must be non-negative");
    y = Outcome::discrete(static_cast<std::size_t>(v));
  } else if (j.is_number()) {
    y = Outcome::continuous({j.get<double>()});
  } else if (j.is_array()) {
    std::vector<double> v;
    for (const auto& e : j) {
      if (!e.is_number()) throw InvalidOutcomeError("outcome entries must be numbers");
      v.push_back(e.get<double>());
    }
    y = Outcome::continuous(std::move(v));
  } else {
    throw InvalidOutcomeError("outcome must be a number or an array of numbers");
  }
  model.validate_outcome(y);
  return y;
}

}  // namespace eiglab
