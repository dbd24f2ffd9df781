#include <gtest/gtest.h>

#include <cmath>

#include "eiglab/eiglab.hpp"

using namespace eiglab;
using namespace eiglab::ad;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, RngStream& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

// Central-difference gradient of a tape-built scalar function, computed independently of
// finite_difference_check so that routine is itself under test.
std::vector<double> central_diff(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor a = x, b = x;
    a.data[i] += h;
    b.data[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(Autodiff, LogSumExpSymmetric) {
  Tape t;
  Var x = t.constant(Tensor::row({0.0, 0.0}));
  EXPECT_NEAR(logsumexp(x).item(), std::log(2.0), 1e-15);
}

TEST(Autodiff, LogSumExpNoOverflow) {
  Tape t;
  Var x = t.constant(Tensor::row({1000.0, 1000.0}));
  const double v = logsumexp(x).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1000.0 + std::log(2.0), 1e-12);
  Var y = t.constant(Tensor::row({-1000.0, -1000.0}));
  EXPECT_NEAR(logsumexp(y).item(), -1000.0 + std::log(2.0), 1e-12);
}

TEST(Autodiff, MatmulIdentityIsExact) {
  RngStream r(1, 0);
  Tensor eye(3, 3, 0.0);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  const Tensor a = random_tensor(3, 4, r);
  Tape t;
  EXPECT_EQ(matmul(t.constant(eye), t.constant(a)).value().data, a.data);
}

TEST(Autodiff, SquareGradient) {
  Tape t;
  Var x = t.variable(Tensor::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.grad(sum(mul(x, x)), {x})[0].item(), 6.0);
}

TEST(Autodiff, LogSumExpGradientIsSoftmax) {
  Tape t;
  Var x = t.variable(Tensor::row({0.0, 0.0}));
  const auto g = t.grad(logsumexp(x), {x})[0];
  EXPECT_DOUBLE_EQ(g.data[0], 0.5);
  EXPECT_DOUBLE_EQ(g.data[1], 0.5);
}

TEST(Autodiff, TanhNetworkMatchesFiniteDifferences) {
  RngStream r(7, 0);
  nn::Mlp net({3, 5, 5, 2}, r.derive(0, 0));
  const Tensor x = random_tensor(4, 3, r);
  auto objective = [&](std::span<const Var> ps, Tape& t) {
    Var out = nn::Mlp::forward(ps, t.constant(x));
    return sum(mul(out, out));
  };
  Tape tape;
  auto ps = tape.variables(net.params());
  const auto grads = tape.grad(objective(ps, tape), ps);
  for (std::size_t k = 0; k < net.params().size(); ++k) {
    auto f = [&](const Tensor& p) {
      Tape t;
      std::vector<Var> vs;
      for (std::size_t j = 0; j < net.params().size(); ++j) vs.push_back(t.constant(j == k ? p : net.params()[j]));
      return objective(vs, t).item();
    };
    const auto fd = central_diff(f, net.params()[k], 1e-5);
    for (std::size_t i = 0; i < fd.size(); ++i)
      ASSERT_LT(std::abs(grads[k].data[i] - fd[i]) / (std::abs(fd[i]) + 1e-12), 1e-6) << "param " << k << " entry " << i;
  }
}

TEST(Autodiff, FiniteDifferenceCheckOnCubic) {
  const double err = finite_difference_check([](Tape&, Var x) { return sum(mul(mul(x, x), x)); }, Tensor::scalar(2.0), 1e-5);
  EXPECT_LT(err, 1e-8);
}

TEST(Autodiff, FiniteDifferenceCheckOnConstant) {
  const double err = finite_difference_check(
      [](Tape& t, Var x) { return add(scale(sum(x), 0.0), t.constant(Tensor::scalar(4.0))); }, Tensor::row({1.0, 2.0}),
      1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(Autodiff, FiniteDifferenceCheckRejectsBadStep) {
  EXPECT_THROW(finite_difference_check([](Tape&, Var x) { return sum(x); }, Tensor::scalar(1.0), 0.0), ConfigError);
  EXPECT_THROW(finite_difference_check([](Tape&, Var x) { return sum(log(x)); }, Tensor::scalar(1e-7), 1e-5), Error);
}

TEST(Autodiff, EveryPrimitivePassesGradientCheck) {
  RngStream r(3, 0);
  const Tensor w = random_tensor(3, 2, r), b = random_tensor(1, 2, r), other = random_tensor(4, 3, r);
  const Tensor pos = [&] {
    Tensor t = random_tensor(4, 3, r);
    for (double& v : t.data) v = 0.5 + std::abs(v);
    return t;
  }();
  std::vector<std::pair<const char*, ScalarFn>> cases = {
      {"add", [&](Tape& t, Var x) { return sum(square(add(x, t.constant(other)))); }},
      {"sub", [&](Tape& t, Var x) { return sum(square(sub(t.constant(other), x))); }},
      {"mul", [&](Tape& t, Var x) { return sum(mul(x, t.constant(other))); }},
      {"div", [&](Tape& t, Var x) { return sum(div(t.constant(other), x)); }},
      {"exp", [](Tape&, Var x) { return sum(exp(x)); }},
      {"log", [](Tape&, Var x) { return sum(log(x)); }},
      {"sqrt", [](Tape&, Var x) { return sum(sqrt(x)); }},
      {"tanh", [](Tape&, Var x) { return sum(tanh(x)); }},
      {"log_normal_cdf", [](Tape&, Var x) { return sum(log_normal_cdf(x)); }},
      {"matmul", [&](Tape& t, Var x) { return sum(square(matmul(x, t.constant(w)))); }},
      {"affine", [&](Tape& t, Var x) { return sum(tanh(affine(x, t.constant(w), t.constant(b)))); }},
      {"mean", [](Tape&, Var x) { return mean(square(x)); }},
      {"row_sum", [](Tape&, Var x) { return sum(square(row_sum(x))); }},
      {"logsumexp", [](Tape&, Var x) { return sum(logsumexp(x)); }},
      {"gather", [](Tape&, Var x) { return sum(square(gather(x, {0, 2, 1, 1}))); }},
      {"slice_cols", [](Tape&, Var x) { return sum(square(slice_cols(x, 1, 3))); }},
      {"concat_cols", [](Tape&, Var x) { return sum(square(concat_cols(x, scale(x, 2.0)))); }},
      {"repeat_rows", [](Tape&, Var x) { return sum(square(repeat_rows(x, 3))); }},
      {"tile_cols", [](Tape&, Var x) { return sum(square(tile_cols(row_sum(x), 2))); }},
      {"reshape", [](Tape&, Var x) { return sum(square(matmul(reshape(x, 3, 4), reshape(x, 4, 3)))); }},
  };
  for (const auto& [name, f] : cases) EXPECT_LT(finite_difference_check(f, pos, 1e-6), 1e-6) << name;
}

TEST(Autodiff, RowBroadcastOnly) {
  Tape t;
  Var a = t.variable(Tensor(4, 3, 1.0));
  Var row = t.variable(Tensor(1, 3, 2.0));
  EXPECT_NO_THROW(add(a, row));
  EXPECT_THROW(add(a, t.constant(Tensor(4, 1, 1.0))), ShapeError);
  EXPECT_THROW(add(a, t.constant(Tensor(2, 3, 1.0))), ShapeError);
  EXPECT_THROW(matmul(a, t.constant(Tensor(2, 2, 1.0))), ShapeError);
  // broadcast gradient reduces over rows
  const auto g = t.grad(sum(add(a, row)), {row})[0];
  for (double v : g.data) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Autodiff, DomainErrors) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::row({1.0, 0.0}))), DomainError);
  EXPECT_THROW(log(t.constant(Tensor::row({-1.0}))), DomainError);
  EXPECT_THROW(sqrt(t.constant(Tensor::row({-1.0}))), DomainError);
}

TEST(Autodiff, GradRequiresScalarOutputOnTheSameTape) {
  Tape t, other;
  Var x = t.variable(Tensor::row({1.0, 2.0}));
  EXPECT_THROW(t.grad(mul(x, x), {x}), ShapeError);
  Var y = other.variable(Tensor::scalar(1.0));
  EXPECT_THROW(t.grad(sum(x), {y}), Error);
}

TEST(Autodiff, GradientIsLinear) {
  RngStream r(5, 0);
  const Tensor x0 = random_tensor(3, 2, r);
  auto f1 = [](Var x) { return sum(tanh(x)); };
  auto f2 = [](Var x) { return sum(exp(scale(x, 0.3))); };
  Tape a;
  Var xa = a.variable(x0);
  const auto g_sum = a.grad(add(f1(xa), f2(xa)), {xa})[0];
  Tape b;
  Var xb = b.variable(x0);
  const auto g1 = b.grad(f1(xb), {xb})[0];
  Tape c;
  Var xc = c.variable(x0);
  const auto g2 = c.grad(f2(xc), {xc})[0];
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(g_sum.data[i], g1.data[i] + g2.data[i]);
}

TEST(Autodiff, RepeatedGradIsBitIdentical) {
  RngStream r(6, 0);
  Tape t;
  Var x = t.variable(random_tensor(5, 4, r));
  Var out = sum(logsumexp(tanh(x)));
  const auto g1 = t.grad(out, {x})[0];
  const auto g2 = t.grad(out, {x})[0];
  EXPECT_EQ(g1.data, g2.data);
}

TEST(Autodiff, TensorShapeInvariants) {
  EXPECT_THROW(Tensor(0, 3), ShapeError);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(2, 2).item(), ShapeError);
}
