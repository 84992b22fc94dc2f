#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "zlin/optim.hpp"

namespace {

using zlin::CgOptions;
using zlin::Matrix;
using zlin::Rng;
using zlin::testing::random_matrix;

TEST(Sgd, ZeroMomentumIsGradientDescent) {
  std::vector<double> p{1.0, -2.0}, g{0.5, 0.25}, v{0.0, 0.0};
  zlin::sgd_step<double>(p, g, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -2.025);
}

TEST(Sgd, MomentumGeometricSeries) {
  // Constant gradient: v_k = -lr*g*(1-mu^k)/(1-mu).
  const double lr = 0.1, mu = 0.9, g0 = 2.0;
  std::vector<double> p{0.0}, g{g0}, v{0.0};
  double expected_p = 0.0;
  for (int k = 1; k <= 25; ++k) {
    zlin::sgd_step<double>(p, g, v, lr, mu, 0.0);
    const double vk = -lr * g0 * (1 - std::pow(mu, k)) / (1 - mu);
    expected_p += vk;
    EXPECT_NEAR(v[0], vk, 1e-12);
  }
  EXPECT_NEAR(p[0], expected_p, 1e-10);
}

TEST(Sgd, WeightDecayPullsTowardZero) {
  std::vector<double> p{3.0}, g{0.0}, v{0.0};
  zlin::sgd_step<double>(p, g, v, 0.5, 0.0, 0.2);
  EXPECT_DOUBLE_EQ(p[0], 3.0 - 0.5 * 0.2 * 3.0);
}

TEST(Sgd, RejectsBadInputs) {
  std::vector<double> p{1.0}, g{1.0, 2.0}, v{0.0};
  EXPECT_THROW(zlin::sgd_step<double>(p, g, v, 0.1, 0.9, 0.0), zlin::ShapeError);
  std::vector<double> g1{1.0};
  EXPECT_THROW(zlin::sgd_step<double>(p, g1, v, 0.1, 1.0, 0.0), std::invalid_argument);
}

TEST(Sgd, ZeroBiasLayersKeepZeroBias) {
  Rng rng(3);
  auto net = zlin::build_network<double>({{{6, zlin::Activation::zero_bias_relu}}, 3}, 4, {}, rng);
  net.layers[0].kind = zlin::LayerKind::zero_bias_relu(0.5);
  auto x = random_matrix(rng, 10, 4);
  auto y = zlin::testing::random_labels(rng, 10, 3);
  zlin::SgdOptimizer<double> opt(net, 0.9, {1e-3, 1e-3});
  for (int it = 0; it < 5; ++it) {
    auto t = zlin::forward(net, x, zlin::Mode::train, rng);
    auto r = zlin::backward(net, t, std::span<const int>(y));
    opt.step(net, r.grads, 0.1);
  }
  for (double b : net.layers[0].bias) EXPECT_EQ(b, 0.0);
  double head_bias = 0.0;
  for (double b : net.layers[1].bias) head_bias += std::abs(b);
  EXPECT_GT(head_bias, 0.0);
}

TEST(Sgd, QuadraticBowlConverges) {
  std::vector<double> p{3.0, -2.0, 0.5, 4.0}, v(4, 0.0);
  int steps = 0;
  auto norm = [&] { return std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]); };
  while (norm() >= 1e-3 && steps < 200) {
    std::vector<double> g = p;  // gradient of 0.5 |p|^2
    zlin::sgd_step<double>(p, g, v, 0.1, 0.9, 0.0);
    ++steps;
  }
  EXPECT_LT(norm(), 1e-3);
  EXPECT_LT(steps, 200);
}

TEST(Sgd, OptimizerIsDeterministic) {
  auto run = [] {
    Rng rng(3);
    auto net = zlin::build_network<double>({{{6, zlin::Activation::relu}}, 3}, 4, {}, rng);
    zlin::SgdOptimizer<double> opt(net, 0.9, std::vector<double>(net.layers.size(), 1e-4));
    auto x = random_matrix(rng, 8, 4);
    auto y = zlin::testing::random_labels(rng, 8, 3);
    for (int k = 0; k < 5; ++k) {
      auto trace = zlin::forward(net, x, zlin::Mode::train, rng);
      opt.step(net, zlin::backward(net, trace, y).grads, 0.05);
    }
    return net;
  };
  auto a = run(), b = run();
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].weights.values().size(), b.layers[i].weights.values().size());
    for (std::size_t k = 0; k < a.layers[i].weights.size(); ++k)
      EXPECT_EQ(a.layers[i].weights.data()[k], b.layers[i].weights.data()[k]);
  }
}

TEST(LrSchedule, HalvesEveryHundredEpochs) {
  zlin::LrSchedule s{0.08, 0.5, 100};
  EXPECT_DOUBLE_EQ(s.at(0), 0.08);
  EXPECT_DOUBLE_EQ(s.at(99), 0.08);
  EXPECT_DOUBLE_EQ(s.at(100), 0.04);
  EXPECT_DOUBLE_EQ(s.at(250), 0.02);
}

struct Quadratic {
  Matrix<double> a;
  std::vector<double> b;
  double loss(const std::vector<double>& x) const {
    auto ax = zlin::matvec(a, std::span<const double>(x));
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += 0.5 * x[i] * ax[i] - b[i] * x[i];
    return s;
  }
  std::vector<double> grad(const std::vector<double>& x) const {
    auto ax = zlin::matvec(a, std::span<const double>(x));
    for (std::size_t i = 0; i < x.size(); ++i) ax[i] -= b[i];
    return ax;
  }
};

Quadratic random_spd(Rng& rng, std::size_t n) {
  auto m = random_matrix(rng, n, n);
  auto a = zlin::matmul(zlin::transpose(m), m);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 1.0;
  std::vector<double> b(n);
  for (auto& v : b) v = rng.gaussian();
  return {a, b};
}

TEST(Cg, QuadraticWithExactLineSearchFinishesInNSteps) {
  Rng rng(11);
  const std::size_t n = 10;
  auto q = random_spd(rng, n);
  CgOptions opt;
  opt.tol = 1e-8;
  opt.line_search = [&](const std::vector<double>& p, const std::vector<double>& d) {
    auto g = q.grad(p);
    auto ad = zlin::matvec(q.a, std::span<const double>(d));
    double gd = 0.0, dad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      gd += g[i] * d[i];
      dad += d[i] * ad[i];
    }
    return -gd / dad;
  };
  auto r = zlin::cg_minimize([&](const auto& x) { return q.loss(x); }, [&](const auto& x) { return q.grad(x); },
                             std::vector<double>(n, 0.0), opt);
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.iterations, n + 2);
  auto ax = zlin::matvec(q.a, std::span<const double>(r.params));
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ax[i], q.b[i], 1e-7);
}

TEST(Cg, RosenbrockLossNeverIncreases) {
  auto f = [](const std::vector<double>& x) {
    return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2);
  };
  auto g = [](const std::vector<double>& x) {
    return std::vector<double>{-400 * x[0] * (x[1] - x[0] * x[0]) - 2 * (1 - x[0]), 200 * (x[1] - x[0] * x[0])};
  };
  CgOptions opt;
  opt.max_iters = 5000;
  opt.tol = 1e-7;
  double last = f({-1.2, 1.0});
  bool monotone = true;
  opt.on_iteration = [&](std::size_t, double loss) {
    if (loss > last) monotone = false;
    last = loss;
  };
  auto r = zlin::cg_minimize(f, g, {-1.2, 1.0}, opt);
  EXPECT_TRUE(monotone);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.params[0], 1.0, 1e-4);
  EXPECT_NEAR(r.params[1], 1.0, 1e-4);
}

TEST(Cg, OptimalStartReturnsImmediately) {
  Rng rng(2);
  auto q = random_spd(rng, 4);
  std::vector<double> x0 = q.b;
  // Move b so that x0 is the minimiser.
  q.b = zlin::matvec(q.a, std::span<const double>(x0));
  auto r = zlin::cg_minimize([&](const auto& x) { return q.loss(x); }, [&](const auto& x) { return q.grad(x); },
                             x0);
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.params, x0);
}

TEST(Cg, InconsistentGradientRejected) {
  auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
  auto g = [](const std::vector<double>& x) { return std::vector<double>{-2 * x[0]}; };
  EXPECT_THROW(zlin::cg_minimize(f, g, {1.0}), std::invalid_argument);
}

TEST(Cg, LineSearchFailureReturnsBestSoFar) {
  // Finite only at the starting point.
  auto f = [](const std::vector<double>& x) {
    return x[0] == 1.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
  };
  auto g = [](const std::vector<double>&) { return std::vector<double>{2.0}; };
  CgOptions opt;
  opt.check_gradient = false;
  auto r = zlin::cg_minimize(f, g, {1.0}, opt);
  EXPECT_TRUE(r.line_search_failed);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.params, std::vector<double>{1.0});
  EXPECT_EQ(r.loss, 1.0);
}

TEST(SoftmaxObjective, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto x = random_matrix(rng, 20, 6);
  auto y = zlin::testing::random_labels(rng, 20, 4);
  zlin::SoftmaxObjective obj(x, y, 4, 0.3);
  std::vector<double> p(obj.param_count());
  for (auto& v : p) v = 0.5 * rng.gaussian();
  auto g = obj.grad(p);
  for (std::size_t k = 0; k < p.size(); ++k) {
    auto pp = p, pm = p;
    pp[k] += 1e-6;
    pm[k] -= 1e-6;
    EXPECT_NEAR(g[k], (obj.loss(pp) - obj.loss(pm)) / 2e-6, 1e-7) << "coordinate " << k;
  }
}

TEST(SoftmaxHead, SeparableToyReachesFullAccuracy) {
  Rng rng(8);
  const std::size_t n = 200;
  Matrix<double> x(n, 2);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 2);
    const double c = y[i] ? 2.0 : -2.0;
    x(i, 0) = c + 0.5 * rng.gaussian();
    x(i, 1) = rng.gaussian();
  }
  auto head = zlin::Layer<double>::dense(zlin::LayerKind::linear(), 2, 2, rng);
  zlin::SoftmaxFit fit;
  fit.l2 = 1e-4;
  auto r = zlin::fit_softmax_head(head, x, std::span<const int>(y), fit);
  EXPECT_FALSE(r.line_search_failed);
  zlin::Network<double> net{{head}};
  auto pred = zlin::predict(net, x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += pred[i] == y[i];
  EXPECT_EQ(correct, n);
}

}  // namespace
