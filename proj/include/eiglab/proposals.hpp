#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "eiglab/core.hpp"
#include "eiglab/math.hpp"
#include "eiglab/models.hpp"

namespace eiglab {

/// Conditional density q(theta | y, xi) that can be sampled and evaluated.
class Proposal {
 public:
  virtual ~Proposal() = default;
  virtual LatentSample sample(const Outcome& y, const Design& xi, RngStream& rng) const = 0;
  virtual double log_density(const LatentSample& theta, const Outcome& y, const Design& xi) const = 0;
  /// True when q ignores (y, xi) and equals the model prior.
  virtual bool is_prior() const { return false; }
};

class PriorProposal final : public Proposal {
 public:
  explicit PriorProposal(const Model& model) : model_(&model) {}
  LatentSample sample(const Outcome&, const Design&, RngStream& rng) const override { return model_->sample_prior(rng); }
  double log_density(const LatentSample& theta, const Outcome&, const Design&) const override {
    return model_->log_prior(theta);
  }
  bool is_prior() const override { return true; }

 private:
  const Model* model_;
};

/// Exact posterior of the linear-Gaussian model after one (xi, y) observation.
class ConjugatePosteriorProposal final : public Proposal {
 public:
  explicit ConjugatePosteriorProposal(const LinearGaussianModel& model) : model_(&model) {}

  LatentSample sample(const Outcome& y, const Design& xi, RngStream& rng) const override {
    const auto post = posterior(y, xi);
    Eigen::LLT<Eigen::MatrixXd> llt(post.cov);
    Eigen::VectorXd z(post.mean.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    const Eigen::VectorXd theta = post.mean + Eigen::MatrixXd(llt.matrixL()) * z;
    return LatentSample(std::vector<double>(theta.data(), theta.data() + theta.size()));
  }

  double log_density(const LatentSample& theta, const Outcome& y, const Design& xi) const override {
    const auto post = posterior(y, xi);
    Eigen::LLT<Eigen::MatrixXd> llt(post.cov);
    const Eigen::MatrixXd l = llt.matrixL();
    const Eigen::VectorXd diff = Eigen::Map<const Eigen::VectorXd>(theta.values.data(), post.mean.size()) - post.mean;
    const Eigen::VectorXd w = l.triangularView<Eigen::Lower>().solve(diff);
    return -0.5 * w.squaredNorm() - l.diagonal().array().log().sum() -
           static_cast<double>(post.mean.size()) * math::kLogSqrt2Pi;
  }

 private:
  LinearGaussianModel::Posterior posterior(const Outcome& y, const Design& xi) const {
    History h;
    h.push(xi, y);
    return model_->posterior(h);
  }

  const LinearGaussianModel* model_;
};

}  // namespace eiglab
