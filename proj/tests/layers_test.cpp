#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "zlin/layers.hpp"

namespace {

using zlin::Activation;
using zlin::Layer;
using zlin::LayerKind;
using zlin::Matrix;
using zlin::Mode;
using zlin::Network;
using zlin::Rng;
using zlin::testing::random_labels;
using zlin::testing::random_matrix;

Layer<double> fixed_layer(LayerKind kind, Matrix<double> w, std::vector<double> b) {
  return Layer<double>{kind, std::move(w), std::move(b), std::nullopt};
}

Matrix<double> single_layer_output(const Layer<double>& layer, const Matrix<double>& x) {
  Network<double> net{{layer}};
  Rng rng(0);
  return zlin::forward(net, x, Mode::eval, rng).inputs[1];
}

TEST(Forward, ReluDefinition) {
  auto out = single_layer_output(fixed_layer(LayerKind::relu(), Matrix<double>::identity(3), {0, 0, 0}),
                                 Matrix<double>{{-1, 0, 2}});
  EXPECT_EQ(out, (Matrix<double>{{0, 0, 2}}));
}

TEST(Forward, ZeroBiasThreshold) {
  auto out = single_layer_output(
      fixed_layer(LayerKind::zero_bias_relu(1.0), Matrix<double>::identity(3), {0, 0, 0}),
      Matrix<double>{{0.5, 1.5, -2}});
  EXPECT_EQ(out, (Matrix<double>{{0, 1.5, 0}}));
}

TEST(Forward, LinearIsAffine) {
  auto out = single_layer_output(
      fixed_layer(LayerKind::linear(), 2.0 * Matrix<double>::identity(3), {1, 1, 1}),
      Matrix<double>{{0.25, -3, 7}});
  EXPECT_EQ(out, (Matrix<double>{{1.5, -5, 15}}));
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(1);
  auto net = zlin::build_network<float>({{{16, Activation::relu}, {4, Activation::linear}}, 7}, 9, {}, rng);
  auto x = zlin::cast<float>(random_matrix(rng, 12, 9, 3.0));
  auto t = zlin::forward(net, x, Mode::eval, rng);
  for (std::size_t i = 0; i < 12; ++i) {
    double s = 0.0;
    for (float p : t.output().row(i)) s += p;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Forward, ShapeAndNanErrors) {
  Rng rng(2);
  auto net = zlin::build_network<double>({{{5, Activation::relu}}, 3}, 4, {}, rng);
  EXPECT_THROW(zlin::forward(net, Matrix<double>(2, 5), Mode::eval, rng), zlin::ShapeError);
  auto x = Matrix<double>(1, 4, 1.0);
  x(0, 2) = std::nan("");
  try {
    zlin::forward(net, x, Mode::eval, rng);
    FAIL() << "expected NumericError";
  } catch (const zlin::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Forward, ZeroBiasReluIsPositivelyHomogeneous) {
  Rng rng(3);
  auto layer = Layer<double>::dense(LayerKind::zero_bias_relu(0.0), 6, 8, rng);
  auto x = random_matrix(rng, 10, 6);
  auto base = single_layer_output(layer, x);
  for (double alpha : {0.1, 1.0, 3.7}) {
    auto scaled = single_layer_output(layer, alpha * x);
    EXPECT_LT(zlin::max_abs_diff(scaled, alpha * base), 1e-12);
  }
}

TEST(Forward, DropoutEvalMatchesTrainExpectation) {
  const double rate = 0.5;
  Network<double> net{{Layer<double>::dropout(rate)}};
  Rng rng(4);
  Matrix<double> x{{1.0, -2.0, 0.5, 3.0}};
  std::vector<double> mean(4, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto t = zlin::forward(net, x, Mode::train, rng);
    for (std::size_t j = 0; j < 4; ++j) mean[j] += t.inputs[1](0, j) / draws;
  }
  auto eval = zlin::forward(net, x, Mode::eval, rng).inputs[1];
  for (std::size_t j = 0; j < 4; ++j) {
    // Each draw is x/keep w.p. keep, else 0: sd = |x| * sqrt(rate/keep).
    const double sigma = std::abs(x(0, j)) * std::sqrt(rate / (1 - rate)) / std::sqrt(draws);
    EXPECT_NEAR(mean[j], eval(0, j), 3 * sigma);
    EXPECT_EQ(eval(0, j), x(0, j));
  }
}

TEST(Backward, UniformSoftmaxAtZero) {
  const int classes = 5;
  Network<double> net{{fixed_layer(LayerKind::relu(), Matrix<double>(4, 3), {0, 0, 0, 0}),
                       fixed_layer(LayerKind::linear(), Matrix<double>(classes, 4), std::vector<double>(classes, 0))}};
  Rng rng(0);
  Matrix<double> x(2, 3);
  std::vector<int> y{1, 3};
  auto t = zlin::forward(net, x, Mode::train, rng);
  auto r = zlin::backward(net, t, std::span<const int>(y));
  EXPECT_NEAR(r.loss, std::log(classes), 1e-12);
  // Bias gradient of the head is the batch mean of softmax - onehot.
  for (int c = 0; c < classes; ++c) {
    double expected = 1.0 / classes - 0.5 * ((c == 1) + (c == 3));
    EXPECT_NEAR(r.grads.layers[1].bias[c], expected, 1e-12);
  }
}

TEST(Backward, DeadReluLayerGetsZeroWeightGradient) {
  Rng rng(5);
  Matrix<double> w = random_matrix(rng, 6, 4);
  auto relu = fixed_layer(LayerKind::relu(), w, std::vector<double>(6, -1e6));
  Network<double> net{{relu, Layer<double>::dense(LayerKind::linear(), 6, 3, rng)}};
  auto x = random_matrix(rng, 8, 4);
  auto y = random_labels(rng, 8, 3);
  auto t = zlin::forward(net, x, Mode::train, rng);
  auto r = zlin::backward(net, t, std::span<const int>(y));
  for (double g : r.grads.layers[0].weights.values()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, RejectsForeignTrace) {
  Rng rng(6);
  auto a = zlin::build_network<double>({{{5, Activation::relu}}, 3}, 4, {}, rng);
  auto b = zlin::build_network<double>({{{5, Activation::relu}, {2, Activation::linear}}, 3}, 4, {}, rng);
  auto t = zlin::forward(a, random_matrix(rng, 2, 4), Mode::train, rng);
  std::vector<int> y{0, 1};
  EXPECT_THROW(zlin::backward(b, t, std::span<const int>(y)), zlin::ShapeError);
}

struct Family {
  const char* name;
  zlin::Architecture arch;
  double threshold;
};

class GradientFidelity : public ::testing::TestWithParam<Family> {};

TEST_P(GradientFidelity, MatchesCentralDifferences) {
  const auto& fam = GetParam();
  Rng rng(1234);
  auto net = zlin::build_network<double>(fam.arch, 6, {}, rng);
  for (auto& l : net.layers) {
    if (l.kind.type == Activation::zero_bias_relu) l.kind.param = fam.threshold;
    if (l.trains_bias())
      for (auto& b : l.bias) b = 0.1 * rng.gaussian();
  }
  auto x = random_matrix(rng, 7, 6, 2.0);
  auto y = random_labels(rng, 7, static_cast<int>(fam.arch.classes));
  auto res = zlin::testing::finite_difference_check(net, x, y);
  EXPECT_GT(res.checked, 50);
  EXPECT_LT(res.max_rel_error, 1e-4) << fam.name;
}

INSTANTIATE_TEST_SUITE_P(
    Families, GradientFidelity,
    ::testing::Values(
        Family{"relu", {{{9, Activation::relu}, {8, Activation::relu}}, 4}, 0.0},
        Family{"relu_lin", {{{9, Activation::relu}, {3, Activation::linear}, {9, Activation::relu}}, 4}, 0.0},
        Family{"z", {{{9, Activation::zero_bias_relu}, {8, Activation::zero_bias_relu}}, 4}, 0.0},
        Family{"z_lin",
               {{{9, Activation::zero_bias_relu}, {3, Activation::linear}, {9, Activation::zero_bias_relu}}, 4},
               0.0},
        Family{"z_lin_threshold",
               {{{9, Activation::zero_bias_relu}, {3, Activation::linear}, {9, Activation::zero_bias_relu}}, 4},
               1.0},
        Family{"sigmoid", {{{7, Activation::sigmoid}}, 3}, 0.0}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Backward, StandardizedLayersMatchFiniteDifferences) {
  Rng rng(77);
  auto net = zlin::build_network<double>(
      {{{8, Activation::zero_bias_relu}, {3, Activation::linear}, {8, Activation::relu}}, 3}, 5, {}, rng);
  for (auto& l : net.layers) {
    if (!l.has_params() || l.fan_out() == 3) continue;
    zlin::Standardization<double> s;
    for (std::size_t j = 0; j < l.fan_out(); ++j) {
      s.mean.push_back(rng.gaussian());
      s.inv_std.push_back(rng.uniform(0.5, 2.0));
    }
    l.standardize = s;
  }
  auto x = random_matrix(rng, 6, 5);
  auto y = random_labels(rng, 6, 3);
  EXPECT_LT(zlin::testing::finite_difference_check(net, x, y).max_rel_error, 1e-4);
}

TEST(BatchGradients, ShardedReductionIsWorkerIndependent) {
  Rng rng(10);
  auto net = zlin::build_network<float>({{{32, Activation::relu}, {8, Activation::linear}}, 5}, 12, {0.2, 0.5}, rng);
  auto x = zlin::cast<float>(random_matrix(rng, 50, 12));
  auto y = random_labels(rng, 50, 5);
  Rng step(99);
  zlin::GradientOptions one{1, 8};
  auto ref = zlin::batch_gradients(net, x, std::span<const int>(y), step, one);
  for (std::size_t workers : {2u, 3u, 7u}) {
    auto r = zlin::batch_gradients(net, x, std::span<const int>(y), step, {workers, 8});
    EXPECT_EQ(r.loss, ref.loss);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      EXPECT_EQ(r.grads.layers[i].weights, ref.grads.layers[i].weights);
      EXPECT_EQ(r.grads.layers[i].bias, ref.grads.layers[i].bias);
    }
  }
}

TEST(BatchGradients, ShardsAgreeWithFullBatchWithoutDropout) {
  Rng rng(11);
  auto net = zlin::build_network<double>({{{16, Activation::relu}}, 4}, 6, {}, rng);
  auto x = random_matrix(rng, 30, 6);
  auto y = random_labels(rng, 30, 4);
  Rng step(1);
  auto full = zlin::batch_gradients(net, x, std::span<const int>(y), step);
  auto sharded = zlin::batch_gradients(net, x, std::span<const int>(y), step, {1, 7});
  EXPECT_NEAR(full.loss, sharded.loss, 1e-12);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    EXPECT_LT(zlin::max_abs_diff(full.grads.layers[i].weights, sharded.grads.layers[i].weights), 1e-12);
  }
}

TEST(AbsorbLinear, IdentityBottleneckIsNoOp) {
  Rng rng(20);
  auto relu = Layer<double>::dense(LayerKind::relu(), 5, 7, rng);
  for (auto& b : relu.bias) b = rng.gaussian();
  auto lin = fixed_layer(LayerKind::linear(), Matrix<double>::identity(5), std::vector<double>(5, 0));
  auto absorbed = zlin::absorb_linear(relu, lin);
  EXPECT_EQ(absorbed.weights, relu.weights);
  EXPECT_EQ(absorbed.bias, relu.bias);
  EXPECT_EQ(absorbed.kind, relu.kind);
}

TEST(AbsorbLinear, ZeroWeights) {
  Rng rng(21);
  auto relu = fixed_layer(LayerKind::relu(), Matrix<double>(7, 5), {1, 2, 3, 4, 5, 6, 7});
  auto lin = Layer<double>::dense(LayerKind::linear(), 9, 5, rng);
  auto absorbed = zlin::absorb_linear(relu, lin);
  EXPECT_EQ(absorbed.weights, Matrix<double>(7, 9));
  EXPECT_EQ(absorbed.bias, relu.bias);
}

TEST(AbsorbLinear, ForwardEquivalenceOnRandomInputs) {
  Rng rng(22);
  for (auto kind : {LayerKind::relu(), LayerKind::zero_bias_relu(0.0)}) {
    auto lin = Layer<double>::dense(LayerKind::linear(), 10, 4, rng);
    for (auto& b : lin.bias) b = rng.gaussian();
    auto nl = Layer<double>::dense(kind, 4, 12, rng);
    if (nl.trains_bias())
      for (auto& b : nl.bias) b = rng.gaussian();
    auto absorbed = zlin::absorb_linear(nl, lin);
    Network<double> pair{{lin, nl}};
    Network<double> single{{absorbed}};
    auto x = random_matrix(rng, 100, 10);
    Rng unused(0);
    auto a = zlin::forward(pair, x, Mode::eval, unused).inputs.back();
    auto b = zlin::forward(single, x, Mode::eval, unused).inputs.back();
    EXPECT_LT(zlin::max_abs_diff(a, b), 1e-12);
  }
}

TEST(AbsorbLinear, FoldsLinearStandardization) {
  Rng rng(23);
  auto lin = Layer<double>::dense(LayerKind::linear(), 6, 3, rng);
  lin.standardize = zlin::Standardization<double>{{0.3, -1.0, 2.0}, {2.0, 0.5, 1.5}};
  auto nl = Layer<double>::dense(LayerKind::relu(), 3, 5, rng);
  Network<double> pair{{lin, nl}};
  Network<double> single{{zlin::absorb_linear(nl, lin)}};
  auto x = random_matrix(rng, 20, 6);
  Rng unused(0);
  EXPECT_LT(zlin::max_abs_diff(zlin::forward(pair, x, Mode::eval, unused).inputs.back(),
                               zlin::forward(single, x, Mode::eval, unused).inputs.back()),
            1e-12);
}

TEST(AbsorbLinear, InnerDimensionMismatch) {
  Rng rng(24);
  auto lin = Layer<double>::dense(LayerKind::linear(), 6, 3, rng);
  auto nl = Layer<double>::dense(LayerKind::relu(), 4, 5, rng);
  EXPECT_THROW(zlin::absorb_linear(nl, lin), zlin::ShapeError);
}

TEST(EquivalentUpdate, ZeroUpdates) {
  Rng rng(30);
  auto wi = random_matrix(rng, 5, 3);
  auto wl = random_matrix(rng, 3, 4);
  auto d = zlin::equivalent_update(Matrix<double>(5, 3), Matrix<double>(3, 4), wi, wl);
  EXPECT_EQ(d, Matrix<double>(5, 4));
}

TEST(EquivalentUpdate, MatchesProductExpansion) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto wi = random_matrix(rng, 6, 4);
    auto wl = random_matrix(rng, 4, 9);
    auto dwi = random_matrix(rng, 6, 4, 0.1);
    auto dwl = random_matrix(rng, 4, 9, 0.1);
    auto expected = zlin::matmul(wi + dwi, wl + dwl) - zlin::matmul(wi, wl);
    EXPECT_LT(zlin::max_abs_diff(zlin::equivalent_update(dwi, dwl, wi, wl), expected), 1e-12);
  }
}

TEST(EquivalentUpdate, DenseDespiteHalfZeroRows) {
  Rng rng(32);
  auto wi = random_matrix(rng, 40, 10);
  auto wl = random_matrix(rng, 10, 30);
  auto dwi = random_matrix(rng, 40, 10);
  for (std::size_t r = 0; r < 40; r += 2)
    for (auto& v : dwi.row(r)) v = 0.0;
  auto dwl = random_matrix(rng, 10, 30);
  EXPECT_LE(zlin::nonzero_fraction(dwi), 0.5);
  EXPECT_GT(zlin::nonzero_fraction(zlin::equivalent_update(dwi, dwl, wi, wl)), 0.99);
}

TEST(EquivalentUpdate, ShapeMismatch) {
  EXPECT_THROW(zlin::equivalent_update(Matrix<double>(2, 3), Matrix<double>(3, 4), Matrix<double>(2, 2),
                                       Matrix<double>(3, 4)),
               zlin::ShapeError);
}

TEST(CountParams, BottleneckPairAndDirectLayer) {
  using zlin::HiddenSpec;
  std::vector<HiddenSpec> pair{{4000, Activation::relu}, {1000, Activation::linear}, {4000, Activation::relu}};
  EXPECT_EQ(zlin::count_params(pair), 8'005'000u);
  std::vector<HiddenSpec> direct{{4000, Activation::relu}, {4000, Activation::relu}};
  EXPECT_EQ(zlin::count_params(direct), 16'004'000u);
  EXPECT_EQ(zlin::count_params(std::span<const HiddenSpec>{}), 0u);
}

TEST(CountParams, AgreesWithBuiltNetwork) {
  Rng rng(40);
  zlin::Architecture arch{{{20, Activation::zero_bias_relu}, {5, Activation::linear}, {20, Activation::relu}}, 3};
  auto net = zlin::build_network<float>(arch, 11, {0.2, 0.5}, rng);
  EXPECT_EQ(net.parameter_count(), zlin::count_params(arch, 11));
}

TEST(BuildNetwork, DropoutPlacement) {
  Rng rng(41);
  zlin::Architecture arch{{{8, Activation::zero_bias_relu}, {4, Activation::linear}, {8, Activation::zero_bias_relu}}, 3};
  auto net = zlin::build_network<float>(arch, 6, {0.2, 0.5}, rng);
  std::vector<Activation> kinds;
  for (const auto& l : net.layers) kinds.push_back(l.kind.type);
  std::vector<Activation> expected{Activation::dropout, Activation::zero_bias_relu, Activation::dropout,
                                   Activation::linear,  Activation::zero_bias_relu, Activation::dropout,
                                   Activation::linear};
  EXPECT_EQ(kinds, expected);
  for (const auto& l : net.layers) {
    if (l.kind.type != Activation::zero_bias_relu) continue;
    for (float b : l.bias) EXPECT_EQ(b, 0.0f);
  }
}

}  // namespace
