#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "eiglab/autodiff.hpp"
#include "eiglab/errors.hpp"
#include "eiglab/rng.hpp"

namespace eiglab::nn {

using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Plain-double forward pass over [W0, b0, W1, b1, ...] for one input row.
inline std::vector<double> mlp_eval(std::span<const Tensor> params, std::span<const double> x) {
  if (params.empty() || x.size() != params[0].rows()) throw ShapeError("Mlp: input width mismatch");
  std::vector<double> h(x.begin(), x.end()), next;
  for (std::size_t i = 0; i + 1 < params.size(); i += 2) {
    const Tensor& w = params[i];
    const Tensor& b = params[i + 1];
    next.assign(b.data.begin(), b.data.end());
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const double hr = h[r];
      const double* row = &w.data[r * w.cols()];
      for (std::size_t c = 0; c < w.cols(); ++c) next[c] += hr * row[c];
    }
    if (i + 2 < params.size())
      for (double& v : next) v = std::tanh(v);
    h.swap(next);
  }
  return h;
}

/// Fully connected network with tanh hidden activations and a linear output.
/// Parameters are stored flat as [W0, b0, W1, b1, ...], W of shape [in, out].
class Mlp {
 public:
  Mlp() = default;

  /// Glorot-uniform weights, zero biases; the last layer is scaled by `out_scale`.
  Mlp(std::vector<std::size_t> widths, RngStream rng, double out_scale = 1.0) : widths_(std::move(widths)) {
    if (widths_.size() < 2) throw ConfigError("Mlp needs at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const std::size_t in = widths_[l], out = widths_[l + 1];
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out)) *
                           (l + 2 == widths_.size() ? out_scale : 1.0);
      Tensor w(in, out);
      for (double& x : w.data) x = (2.0 * rng.uniform() - 1.0) * limit;
      params_.push_back(std::move(w));
      params_.emplace_back(1, out, 0.0);
    }
  }

  static Mlp from_params(std::vector<Tensor> params) {
    Mlp m;
    if (params.empty() || params.size() % 2 != 0) throw ConfigError("Mlp: parameter list must be weight/bias pairs");
    m.widths_.push_back(params[0].rows());
    for (std::size_t i = 0; i < params.size(); i += 2) {
      if (params[i + 1].rows() != 1 || params[i + 1].cols() != params[i].cols() ||
          params[i].rows() != m.widths_.back())
        throw ShapeError("Mlp: inconsistent layer shapes");
      m.widths_.push_back(params[i].cols());
    }
    m.params_ = std::move(params);
    return m;
  }

  std::size_t input_dim() const { return widths_.front(); }
  std::size_t output_dim() const { return widths_.back(); }
  const std::vector<std::size_t>& widths() const { return widths_; }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }

  /// Forward pass with parameters already placed on the tape.
  static Var forward(std::span<const Var> params, Var x) {
    Var h = x;
    for (std::size_t i = 0; i < params.size(); i += 2) {
      h = ad::affine(h, params[i], params[i + 1]);
      if (i + 2 < params.size()) h = ad::tanh(h);
    }
    return h;
  }

  /// Forward pass with the parameters recorded as constants.
  Var forward_const(Tape& tape, Var x) const {
    std::vector<Var> ps;
    ps.reserve(params_.size());
    for (const auto& p : params_) ps.push_back(tape.constant(p));
    return forward(ps, x);
  }

  /// Same network in plain doubles, one input row.
  std::vector<double> eval(std::span<const double> x) const { return mlp_eval(params_, x); }

 private:
  std::vector<std::size_t> widths_;
  std::vector<Tensor> params_;
};

/// lr(step) = base * decay^(step / decay_every).
struct StepSchedule {
  double base = 1e-2;
  double decay = 1.0;
  std::size_t decay_every = 1000;

  double at(std::size_t step) const {
    return base * std::pow(decay, static_cast<double>(step / decay_every));
  }
};

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

/// First-order optimizer over a list of tensors. `direction` is +1 for ascent.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, StepSchedule schedule, double direction = 1.0)
      : kind_(kind), schedule_(schedule), direction_(direction) {}

  void step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: params/grads length mismatch");
    const double lr = schedule_.at(t_);
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j)
          params[i].data[j] += direction_ * lr * grads[i].data[j];
      return;
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.rows(), p.cols(), 0.0);
        v_.emplace_back(p.rows(), p.cols(), 0.0);
      }
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        const double g = grads[i].data[j];
        double& m = m_[i].data[j];
        double& v = v_[i].data[j];
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        params[i].data[j] += direction_ * lr * (m / c1) / (std::sqrt(v / c2) + eps);
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerKind kind_;
  StepSchedule schedule_;
  double direction_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace eiglab::nn
