#pragma once

#include <cmath>
#include <memory>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "eiglab/core.hpp"
#include "eiglab/math.hpp"

namespace eiglab {

namespace detail {

inline void reject_unknown_keys(const json& params, const std::set<std::string>& allowed, const std::string& model) {
  if (params.is_null()) return;
  if (!params.is_object()) throw ConfigError("parameters for model '" + model + "' must be a JSON object");
  for (const auto& [key, _] : params.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown parameter '" + key + "' for model '" + model + "'");
  }
}

template <class T>
T get_or(const json& params, const char* key, T fallback) {
  if (params.is_null() || !params.contains(key)) return fallback;
  try {
    return params.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("parameter '") + key + "' has the wrong type");
  }
}

inline Eigen::Map<const Eigen::VectorXd> as_eigen(const std::vector<double>& v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// theta ~ N(mu0, Sigma0); y = xi^T theta + eps, eps ~ N(0, sigma2); ||xi|| <= rho.
class LinearGaussianModel final : public Model {
 public:
  LinearGaussianModel(Eigen::VectorXd mu0, Eigen::MatrixXd sigma0, double sigma2, double rho)
      : mu0_(std::move(mu0)), sigma0_(std::move(sigma0)), sigma2_(sigma2), rho_(rho) {
    const auto d = mu0_.size();
    if (d < 1) throw ConfigError("linear-Gaussian: mu0 must be non-empty");
    if (sigma0_.rows() != d || sigma0_.cols() != d) throw ConfigError("linear-Gaussian: Sigma0 must be d x d");
    if (!sigma0_.isApprox(sigma0_.transpose(), 1e-12)) throw ConfigError("linear-Gaussian: Sigma0 must be symmetric");
    if (!(sigma2_ > 0.0)) throw ConfigError("linear-Gaussian: sigma2 must be positive");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma0_);
    if (llt.info() != Eigen::Success) throw ConfigError("linear-Gaussian: Sigma0 is not positive definite");
    chol_ = llt.matrixL();
    precision_ = llt.solve(Eigen::MatrixXd::Identity(d, d));
    log_det_sigma0_ = 2.0 * chol_.diagonal().array().log().sum();
    constraint_ = Constraint::ball(static_cast<std::size_t>(d), rho_);
  }

  /// 1-D convenience: prior N(0, prior_var).
  static LinearGaussianModel scalar(double prior_var = 1.0, double sigma2 = 1.0, double rho = 1.0) {
    return LinearGaussianModel(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, prior_var), sigma2, rho);
  }

  static LinearGaussianModel from_json(const json& p) {
    detail::reject_unknown_keys(p, {"mu0", "Sigma0", "sigma2", "rho"}, "lg");
    const auto mu = detail::get_or<std::vector<double>>(p, "mu0", {0.0});
    const auto cov = detail::get_or<std::vector<std::vector<double>>>(p, "Sigma0", {});
    const auto d = static_cast<Eigen::Index>(mu.size());
    Eigen::MatrixXd sigma0 = Eigen::MatrixXd::Identity(d, d);
    if (!cov.empty()) {
      if (static_cast<Eigen::Index>(cov.size()) != d) throw ConfigError("linear-Gaussian: Sigma0 must be d x d");
      for (Eigen::Index i = 0; i < d; ++i) {
        if (static_cast<Eigen::Index>(cov[i].size()) != d) throw ConfigError("linear-Gaussian: Sigma0 must be d x d");
        for (Eigen::Index j = 0; j < d; ++j) sigma0(i, j) = cov[i][j];
      }
    }
    return LinearGaussianModel(detail::as_eigen(mu), sigma0, detail::get_or(p, "sigma2", 1.0),
                               detail::get_or(p, "rho", 1.0));
  }

  std::string id() const override { return "lg"; }
  std::size_t theta_dim() const override { return static_cast<std::size_t>(mu0_.size()); }
  std::size_t design_dim() const override { return theta_dim(); }
  OutcomeSpace outcome_space() const override { return {false, 0, 1}; }
  Capabilities capabilities() const override { return {true, true, true}; }
  const Constraint& constraint() const override { return constraint_; }

  json params() const override {
    std::vector<std::vector<double>> cov(theta_dim(), std::vector<double>(theta_dim()));
    for (std::size_t i = 0; i < theta_dim(); ++i)
      for (std::size_t j = 0; j < theta_dim(); ++j) cov[i][j] = sigma0_(i, j);
    return {{"mu0", std::vector<double>(mu0_.data(), mu0_.data() + mu0_.size())},
            {"Sigma0", cov},
            {"sigma2", sigma2_},
            {"rho", rho_}};
  }

  const Eigen::VectorXd& mu0() const { return mu0_; }
  const Eigen::MatrixXd& sigma0() const { return sigma0_; }
  double sigma2() const { return sigma2_; }
  double rho() const { return rho_; }

  LatentSample sample_prior(RngStream& rng) const override {
    Eigen::VectorXd z(mu0_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    const Eigen::VectorXd theta = mu0_ + chol_ * z;
    return LatentSample(std::vector<double>(theta.data(), theta.data() + theta.size()));
  }

  double log_prior(const LatentSample& theta) const override {
    const Eigen::VectorXd diff = detail::as_eigen(theta.values) - mu0_;
    const Eigen::VectorXd w = chol_.triangularView<Eigen::Lower>().solve(diff);
    return -0.5 * w.squaredNorm() - 0.5 * log_det_sigma0_ - static_cast<double>(mu0_.size()) * math::kLogSqrt2Pi;
  }

  double mean_outcome(const LatentSample& theta, const Design& xi) const {
    double m = 0.0;
    for (std::size_t i = 0; i < xi.dim(); ++i) m += xi[i] * theta[i];
    return m;
  }

  Outcome sample_outcome(const LatentSample& theta, const Design& xi, RngStream& rng) const override {
    return Outcome::continuous({mean_outcome(theta, xi) + std::sqrt(sigma2_) * rng.normal()});
  }

  double log_likelihood(const Outcome& y, const LatentSample& theta, const Design& xi) const override {
    return math::log_normal_pdf(y.scalar(), mean_outcome(theta, xi), std::sqrt(sigma2_));
  }

  std::optional<double> closed_form_eig(const Design& xi) const override {
    return conditional_eig(xi, sigma0_);
  }

  /// 1/2 log(1 + xi^T S xi / sigma2) for belief covariance S.
  double conditional_eig(const Design& xi, const Eigen::MatrixXd& cov) const {
    const auto v = detail::as_eigen(xi.values);
    return 0.5 * std::log1p(v.dot(cov * v) / sigma2_);
  }

  /// Total EIG of a fixed design sequence: 1/2 log det(I + Sigma0 sum xi xi^T / sigma2).
  double closed_form_total_eig(const std::vector<Design>& designs) const {
    const auto d = mu0_.size();
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(d, d);
    for (const auto& xi : designs) {
      const auto v = detail::as_eigen(xi.values);
      info += v * v.transpose() / sigma2_;
    }
    const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(d, d) + sigma0_ * info;
    return 0.5 * std::log(m.determinant());
  }

  struct Posterior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
  };

  /// Exact conjugate posterior after every step of `history`.
  Posterior posterior(const History& history) const {
    const auto d = mu0_.size();
    Eigen::MatrixXd prec = precision_;
    Eigen::VectorXd shift = precision_ * mu0_;
    for (const auto& step : history) {
      if (step.design.dim() != static_cast<std::size_t>(d)) throw ShapeError("history design dimension mismatch");
      const auto v = detail::as_eigen(step.design.values);
      prec += v * v.transpose() / sigma2_;
      shift += v * step.outcome.scalar() / sigma2_;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(prec);
    Posterior out;
    out.cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
    out.mean = llt.solve(shift);
    return out;
  }

  /// Single-observation Fisher information xi xi^T / sigma2.
  Eigen::MatrixXd fim(const Design& xi) const {
    const auto v = detail::as_eigen(xi.values);
    return v * v.transpose() / sigma2_;
  }

  /// Bayesian D-criterion log det(Sigma0^{-1} + FIM).
  double d_optimality(const Design& xi) const {
    Eigen::LLT<Eigen::MatrixXd> llt(precision_ + fim(xi));
    if (llt.info() != Eigen::Success) throw NumericError("d_optimality: total information is singular");
    return 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  }

  ad::Var ad_mean(ad::Var theta, ad::Var xi) const { return ad::row_sum(theta * xi); }

  ad::Var ad_log_likelihood(ad::Var y, ad::Var theta, ad::Var xi) const override {
    ad::Var r = y - ad_mean(theta, xi);
    return ad::shift(ad::scale(ad::square(r), -0.5 / sigma2_), -0.5 * std::log(2.0 * std::numbers::pi * sigma2_));
  }

  ad::Var ad_log_prior(ad::Var theta) const override {
    using namespace ad;
    Tape& tape = theta.tape();
    const auto d = static_cast<std::size_t>(mu0_.size());
    std::vector<double> mu(mu0_.data(), mu0_.data() + d);
    std::vector<double> prec(d * d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) prec[i * d + j] = precision_(i, j);
    Var diff = theta - tape.constant(Tensor::row(mu));
    Var quad = row_sum(matmul(diff, tape.constant(Tensor(d, d, prec))) * diff);
    return shift(scale(quad, -0.5), -0.5 * log_det_sigma0_ - static_cast<double>(d) * math::kLogSqrt2Pi);
  }

  ad::Var ad_reparam_outcome(ad::Var theta, ad::Var xi, const ad::Tensor& noise) const override {
    ad::Tape& tape = theta.tape();
    return ad_mean(theta, xi) + ad::scale(tape.constant(noise), std::sqrt(sigma2_));
  }

 private:
  Eigen::VectorXd mu0_;
  Eigen::MatrixXd sigma0_;
  double sigma2_;
  double rho_;
  Eigen::MatrixXd chol_;
  Eigen::MatrixXd precision_;
  double log_det_sigma0_ = 0.0;
  Constraint constraint_;
};

// ---------------------------------------------------------------------------

/// K point sources in the plane with standard-normal priors. A probe at xi
/// sees intensity mu = b + sum_k alpha_k / (m + ||theta_k - xi||^2); the
/// recorded outcome is the log-intensity reading, log y ~ N(log mu, sigma_log^2).
class LocationFindingModel final : public Model {
 public:
  LocationFindingModel(std::size_t k = 2, std::vector<double> alpha = {}, double background = 0.1,
                       double damping = 1e-4, double sigma_log = 0.5, std::vector<double> lower = {-4.0, -4.0},
                       std::vector<double> upper = {4.0, 4.0})
      : k_(k), alpha_(alpha.empty() ? std::vector<double>(k, 1.0) : std::move(alpha)), b_(background),
        m_(damping), sigma_log_(sigma_log), constraint_(Constraint::box(std::move(lower), std::move(upper))) {
    if (k_ < 1) throw ConfigError("location finding: K must be at least 1");
    if (alpha_.size() != k_) throw ConfigError("location finding: alpha must have K entries");
    for (double a : alpha_)
      if (!(a > 0.0)) throw ConfigError("location finding: alpha entries must be positive");
    if (!(b_ > 0.0) || !(m_ > 0.0) || !(sigma_log_ > 0.0))
      throw ConfigError("location finding: b, m and sigma_log must be positive");
    if (constraint_.dim() != 2) throw ConfigError("location finding: box must be two-dimensional");
  }

  static LocationFindingModel from_json(const json& p) {
    detail::reject_unknown_keys(p, {"K", "alpha", "b", "m", "sigma_log", "box"}, "location_finding");
    const auto k = detail::get_or<std::size_t>(p, "K", 2);
    std::vector<double> alpha;
    if (!p.is_null() && p.contains("alpha")) {
      if (p["alpha"].is_number()) {
        alpha.assign(k, p["alpha"].get<double>());
      } else {
        alpha = detail::get_or<std::vector<double>>(p, "alpha", {});
      }
    }
    std::vector<double> lo{-4.0, -4.0}, hi{4.0, 4.0};
    if (!p.is_null() && p.contains("box")) {
      const auto& box = p["box"];
      if (box.is_array() && box.size() == 2 && box[0].is_number()) {
        lo.assign(2, box[0].get<double>());
        hi.assign(2, box[1].get<double>());
      } else if (box.is_array() && box.size() == 2 && box[0].is_array()) {
        for (std::size_t i = 0; i < 2; ++i) {
          lo[i] = box[i].at(0).get<double>();
          hi[i] = box[i].at(1).get<double>();
        }
      } else {
        throw ConfigError("location finding: box must be [lo, hi] or [[lo1, hi1], [lo2, hi2]]");
      }
    }
    return LocationFindingModel(k, alpha, detail::get_or(p, "b", 0.1), detail::get_or(p, "m", 1e-4),
                                detail::get_or(p, "sigma_log", 0.5), lo, hi);
  }

  std::string id() const override { return "location_finding"; }
  std::size_t theta_dim() const override { return 2 * k_; }
  std::size_t design_dim() const override { return 2; }
  OutcomeSpace outcome_space() const override { return {false, 0, 1}; }
  Capabilities capabilities() const override { return {false, false, true}; }
  const Constraint& constraint() const override { return constraint_; }

  json params() const override {
    return {{"K", k_},
            {"alpha", alpha_},
            {"b", b_},
            {"m", m_},
            {"sigma_log", sigma_log_},
            {"box", {{constraint_.lower()[0], constraint_.upper()[0]}, {constraint_.lower()[1], constraint_.upper()[1]}}}};
  }

  double intensity(const LatentSample& theta, const Design& xi) const {
    double mu = b_;
    for (std::size_t k = 0; k < k_; ++k) {
      const double dx = theta[2 * k] - xi[0], dy = theta[2 * k + 1] - xi[1];
      mu += alpha_[k] / (m_ + dx * dx + dy * dy);
    }
    return mu;
  }

  LatentSample sample_prior(RngStream& rng) const override {
    std::vector<double> v(2 * k_);
    for (double& x : v) x = rng.normal();
    return LatentSample(std::move(v));
  }

  double log_prior(const LatentSample& theta) const override {
    double s = 0.0;
    for (double x : theta.values) s += -0.5 * x * x - math::kLogSqrt2Pi;
    return s;
  }

  Outcome sample_outcome(const LatentSample& theta, const Design& xi, RngStream& rng) const override {
    return Outcome::continuous({std::log(intensity(theta, xi)) + sigma_log_ * rng.normal()});
  }

  double log_likelihood(const Outcome& y, const LatentSample& theta, const Design& xi) const override {
    return math::log_normal_pdf(y.scalar(), std::log(intensity(theta, xi)), sigma_log_);
  }

  ad::Var ad_log_intensity(ad::Var theta, ad::Var xi) const {
    using namespace ad;
    Tape& tape = theta.tape();
    Var total = tape.constant(Tensor::scalar(b_));
    for (std::size_t k = 0; k < k_; ++k) {
      Var diff = slice_cols(theta, 2 * k, 2 * k + 2) - xi;
      Var dist2 = shift(row_sum(square(diff)), m_);
      total = tape.constant(Tensor::scalar(alpha_[k])) / dist2 + total;
    }
    return log(total);
  }

  ad::Var ad_log_likelihood(ad::Var y, ad::Var theta, ad::Var xi) const override {
    ad::Var r = y - ad_log_intensity(theta, xi);
    return ad::shift(ad::scale(ad::square(r), -0.5 / (sigma_log_ * sigma_log_)),
                     -std::log(sigma_log_) - math::kLogSqrt2Pi);
  }

  ad::Var ad_log_prior(ad::Var theta) const override {
    return ad::shift(ad::scale(ad::row_sum(ad::square(theta)), -0.5),
                     -static_cast<double>(2 * k_) * math::kLogSqrt2Pi);
  }

  ad::Var ad_reparam_outcome(ad::Var theta, ad::Var xi, const ad::Tensor& noise) const override {
    return ad_log_intensity(theta, xi) + ad::scale(theta.tape().constant(noise), sigma_log_);
  }

 private:
  std::size_t k_;
  std::vector<double> alpha_;
  double b_, m_, sigma_log_;
  Constraint constraint_;
};

// ---------------------------------------------------------------------------

/// Psychometric threshold: theta ~ N(mu_theta, sigma_theta^2), binary response
/// with P(y = 1 | theta, xi) = Phi((xi - theta) / slope).
class ProbitThresholdModel final : public Model {
 public:
  ProbitThresholdModel(double mu_theta = 0.0, double sigma_theta = 2.0, double slope = 1.0, double xi_min = -6.0,
                       double xi_max = 6.0)
      : mu_(mu_theta), sigma_(sigma_theta), slope_(slope), constraint_(Constraint::box({xi_min}, {xi_max})) {
    if (!(sigma_ > 0.0) || !(slope_ > 0.0)) throw ConfigError("probit: sigma_theta and slope must be positive");
  }

  static ProbitThresholdModel from_json(const json& p) {
    detail::reject_unknown_keys(p, {"mu_theta", "sigma_theta", "slope", "xi_range"}, "probit");
    const auto range = detail::get_or<std::vector<double>>(p, "xi_range", {-6.0, 6.0});
    if (range.size() != 2) throw ConfigError("probit: xi_range must be [min, max]");
    return ProbitThresholdModel(detail::get_or(p, "mu_theta", 0.0), detail::get_or(p, "sigma_theta", 2.0),
                                detail::get_or(p, "slope", 1.0), range[0], range[1]);
  }

  std::string id() const override { return "probit"; }
  std::size_t theta_dim() const override { return 1; }
  std::size_t design_dim() const override { return 1; }
  OutcomeSpace outcome_space() const override { return {true, 2, 1}; }
  Capabilities capabilities() const override { return {false, false, true}; }
  const Constraint& constraint() const override { return constraint_; }

  json params() const override {
    return {{"mu_theta", mu_},
            {"sigma_theta", sigma_},
            {"slope", slope_},
            {"xi_range", {constraint_.lower()[0], constraint_.upper()[0]}}};
  }

  double mu_theta() const { return mu_; }
  double sigma_theta() const { return sigma_; }
  double slope() const { return slope_; }

  /// P(y = 1 | theta, xi).
  double p_one(double theta, double xi) const { return math::normal_cdf((xi - theta) / slope_); }

  LatentSample sample_prior(RngStream& rng) const override { return {mu_ + sigma_ * rng.normal()}; }

  double log_prior(const LatentSample& theta) const override { return math::log_normal_pdf(theta[0], mu_, sigma_); }

  Outcome sample_outcome(const LatentSample& theta, const Design& xi, RngStream& rng) const override {
    return Outcome::discrete(rng.uniform() < p_one(theta[0], xi[0]) ? 1 : 0);
  }

  double log_likelihood(const Outcome& y, const LatentSample& theta, const Design& xi) const override {
    validate_outcome(y);
    const double z = (xi[0] - theta[0]) / slope_;
    return y.index() == 1 ? math::log_normal_cdf(z) : math::log_normal_cdf(-z);
  }

  std::vector<double> likelihood_table(const LatentSample& theta, const Design& xi) const override {
    const double z = (xi[0] - theta[0]) / slope_;
    return {math::normal_cdf(-z), math::normal_cdf(z)};
  }

  ad::Var ad_log_likelihood_table(ad::Var theta, ad::Var xi) const override {
    ad::Var z = ad::scale(xi - theta, 1.0 / slope_);
    return ad::concat_cols(ad::log_normal_cdf(ad::neg(z)), ad::log_normal_cdf(z));
  }

  ad::Var ad_log_likelihood(ad::Var y, ad::Var theta, ad::Var xi) const override {
    std::vector<std::size_t> idx(y.rows());
    for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = y.value()(r, 0) > 0.5 ? 1 : 0;
    return ad::gather(ad_log_likelihood_table(theta, xi), std::move(idx));
  }

  ad::Var ad_log_prior(ad::Var theta) const override {
    ad::Var z = ad::scale(ad::shift(theta, -mu_), 1.0 / sigma_);
    return ad::shift(ad::scale(ad::square(z), -0.5), -std::log(sigma_) - math::kLogSqrt2Pi);
  }

 private:
  double mu_, sigma_, slope_;
  Constraint constraint_;
};

// ---------------------------------------------------------------------------

/// The finite outcome set in its fixed order.
inline std::vector<Outcome> enumerate_outcomes(const Model& model) {
  const OutcomeSpace space = model.outcome_space();
  if (!space.finite) throw CapabilityError("model '" + model.id() + "' has a continuous outcome space");
  std::vector<Outcome> out;
  for (std::size_t i = 0; i < space.count; ++i) out.push_back(Outcome::discrete(i));
  return out;
}

inline double lg_closed_form_eig(const LinearGaussianModel& model, const Design& xi) {
  require_finite(xi.values, "design");
  return *model.closed_form_eig(xi);
}

inline LinearGaussianModel::Posterior lg_posterior(const LinearGaussianModel& model, const History& history) {
  return model.posterior(history);
}

inline Eigen::MatrixXd lg_fim(const LinearGaussianModel& model, const Design& xi) {
  require_finite(xi.values, "design");
  return model.fim(xi);
}

inline std::unique_ptr<Model> make_model(const std::string& id, const json& params = json::object()) {
  if (id == "lg" || id == "linear_gaussian") return std::make_unique<LinearGaussianModel>(LinearGaussianModel::from_json(params));
  if (id == "location_finding" || id == "location")
    return std::make_unique<LocationFindingModel>(LocationFindingModel::from_json(params));
  if (id == "probit") return std::make_unique<ProbitThresholdModel>(ProbitThresholdModel::from_json(params));
  throw UnknownModelError("unknown model '" + id + "'");
}

/// Model ids with parameter schemas (defaults) and outcome kinds.
inline json param_schema(const std::string& id) {
  if (id == "lg")
    return {{"mu0", "array<number> (prior mean, length d)"},
            {"Sigma0", "array<array<number>> (d x d prior covariance, positive definite)"},
            {"sigma2", "number > 0 (noise variance)"},
            {"rho", "number > 0 (design ball radius)"}};
  if (id == "location_finding")
    return {{"K", "integer >= 1 (source count)"},
            {"alpha", "number > 0 or array<number> of length K (intensities)"},
            {"b", "number > 0 (background)"},
            {"m", "number > 0 (damping)"},
            {"sigma_log", "number > 0 (log-observation noise sd)"},
            {"box", "[lo, hi] or [[lo, hi], [lo, hi]] (design box)"}};
  if (id == "probit")
    return {{"mu_theta", "number (prior mean)"},
            {"sigma_theta", "number > 0 (prior sd)"},
            {"slope", "number > 0"},
            {"xi_range", "[min, max] (stimulus range)"}};
  throw UnknownModelError("unknown model '" + id + "'");
}

inline json model_catalog() {
  json out = json::array();
  for (const char* id : {"lg", "location_finding", "probit"}) {
    auto m = make_model(id);
    const OutcomeSpace space = m->outcome_space();
    out.push_back({{"id", id},
                   {"params", m->params()},
                   {"schema", param_schema(id)},
                   {"theta_dim", m->theta_dim()},
                   {"design_dim", m->design_dim()},
                   {"constraint", m->constraint().to_json()},
                   {"outcome",
                    space.finite ? json{{"kind", "finite"}, {"count", space.count}}
                                 : json{{"kind", "continuous"}, {"dim", space.dim}}}});
  }
  return out;
}

}  // namespace eiglab
