// Copyright (c) the sidenet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.h"
#include "sidenet/adamw.h"
#include "sidenet/autodiff.h"
#include "sidenet/error.h"

namespace sidenet {
namespace {

using ad::Graph;
using ad::Var;
using testing::CheckGradients;
using testing::GradCheckOptions;
using testing::RandomTensor;

constexpr double kTol64 = 1e-6;
constexpr double kTol32 = 1e-3;

// Runs the same check in both precisions.
template <typename Fn>
void ExpectGradientsMatch(Fn fn, const std::vector<TensorD>& inputs,
                          GradCheckOptions options = {}) {
  auto r64 = CheckGradients<double>(fn, inputs, options);
  EXPECT_LT(r64.max_rel_error, kTol64)
      << "64-bit: input " << r64.worst_input << " coord " << r64.worst_coord;
  auto r32 = CheckGradients<float>(fn, inputs, options);
  EXPECT_LT(r32.max_rel_error, kTol32)
      << "32-bit: input " << r32.worst_input << " coord " << r32.worst_coord;
}

// Weighted sum so that every output coordinate carries a distinct cotangent.
template <typename U>
Var<U> Probe(Graph<U>& g, Var<U> y) {
  Tensor<U> w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<U>(std::sin(1.0 + 0.7 * i));
  return ad::Sum(ad::Mul(y, g.Constant(std::move(w))));
}

TEST(MatMul, IdentityAndProjector) {
  Graph<float> g;
  auto a = g.Constant(TensorF({2, 2}, {1, 0, 0, 1}));
  auto b = g.Constant(TensorF({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(ad::MatMul(a, b).value().vec(), (std::vector<float>{1, 2, 3, 4}));
  auto p = g.Constant(TensorF({2, 2}, {1, 0, 0, 0}));
  auto c = g.Constant(TensorF({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(ad::MatMul(p, c).value().vec(), (std::vector<float>{5, 6, 0, 0}));
}

TEST(MatMul, GradientOfSumMatchesClosedForm) {
  Graph<double> g;
  auto a = g.Parameter(TensorD({1, 2}, {1, 2}));
  auto b = g.Constant(TensorD({2, 1}, {3, 4}));
  g.Backward(ad::Sum(ad::MatMul(a, b)));
  EXPECT_EQ(a.grad().vec(), (std::vector<double>{3, 4}));
}

TEST(MatMul, ShapeMismatchNamesBothShapes) {
  Graph<float> g;
  auto a = g.Constant(TensorF({2, 3}));
  auto b = g.Constant(TensorF({2, 3}));
  try {
    ad::MatMul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos) << e.what();
  }
}

TEST(MatMul, BatchedBroadcastGradient) {
  Rng rng(1);
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::MatMul(v[0], v[1])); },
      {RandomTensor({2, 3, 4}, rng), RandomTensor({4, 5}, rng)});
}

TEST(Softmax, SymmetricAndStable) {
  Graph<float> g;
  auto s = ad::Softmax(g.Constant(TensorF({3}, {0, 0, 0})), -1);
  for (float v : s.value().vec()) EXPECT_FLOAT_EQ(v, 1.f / 3.f);
  auto big = ad::Softmax(g.Constant(TensorF({2}, {1000, 0})), 0);
  EXPECT_FLOAT_EQ(big.value()[0], 1.f);
  EXPECT_FLOAT_EQ(big.value()[1], 0.f);
}

TEST(Softmax, SlicesSumToOneForLargeInputs) {
  Rng rng(2);
  Graph<float> g;
  auto x = g.Constant(RandomTensor({8, 16}, rng, -1e4, 1e4).Cast<float>());
  for (int axis : {0, 1}) {
    const TensorF& s = ad::Softmax(x, axis).value();
    const std::size_t n = axis == 0 ? 16 : 8;
    for (std::size_t j = 0; j < n; ++j) {
      double total = 0.0;
      for (std::size_t i = 0; i < (axis == 0 ? 8u : 16u); ++i) {
        total += axis == 0 ? s.at({i, j}) : s.at({j, i});
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, Gradient) {
  Rng rng(3);
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Softmax(v[0], -1)); },
                       {RandomTensor({4}, rng)});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Softmax(v[0], 0)); },
                       {RandomTensor({3, 2, 4}, rng)});
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::LogSoftmax(v[0], 1)); },
      {RandomTensor({3, 5}, rng)});
}

TEST(LayerNorm, ClosedForms) {
  Graph<double> g;
  auto gain = g.Constant(TensorD::Full({2}, 1.0));
  auto bias = g.Constant(TensorD({2}));
  auto y = ad::LayerNorm(g.Constant(TensorD({2}, {1, 3})), gain, bias).value();
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(y[0], -expect, 1e-12);
  EXPECT_NEAR(y[1], expect, 1e-12);
  auto c = ad::LayerNorm(g.Constant(TensorD::Full({2}, 5.0)), gain, bias).value();
  EXPECT_EQ(c.vec(), (std::vector<double>{0, 0}));
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  Rng rng(4);
  Graph<double> g;
  auto x = g.Constant(RandomTensor({3, 7}, rng, -5, 5));
  auto y = ad::LayerNorm(x, g.Constant(TensorD::Full({7}, 1.0)), g.Constant(TensorD({7})), 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, sq = 0;
    for (std::size_t j = 0; j < 7; ++j) mean += y.value().at({r, j});
    mean /= 7;
    for (std::size_t j = 0; j < 7; ++j) sq += std::pow(y.value().at({r, j}) - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(sq / 7, 1.0, 1e-5);
  }
}

TEST(LayerNorm, RejectsEmptyAxis) {
  Graph<float> g;
  EXPECT_THROW(ad::LayerNorm(g.Constant(TensorF({2, 0})), g.Constant(TensorF({0})),
                             g.Constant(TensorF({0}))),
               DimensionError);
}

TEST(LayerNorm, Gradient) {
  Rng rng(5);
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::LayerNorm(v[0], v[1], v[2])); },
      {RandomTensor({3, 6}, rng), RandomTensor({6}, rng), RandomTensor({6}, rng)});
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(6);
  Graph<float> g;
  auto x = g.Constant(RandomTensor({1, 4, 4}, rng).Cast<float>());
  auto y = ad::Conv2d(x, g.Constant(TensorF::Full({1, 1, 1, 1}, 1.f)), g.Constant(TensorF({1})), 0, 1);
  EXPECT_EQ(y.value().vec(), x.value().vec());
}

TEST(Conv2d, BoxSum) {
  Graph<float> g;
  auto y = ad::Conv2d(g.Constant(TensorF::Full({1, 3, 3}, 1.f)),
                      g.Constant(TensorF::Full({1, 1, 3, 3}, 1.f)), g.Constant(TensorF({1})), 1, 1);
  EXPECT_FLOAT_EQ(y.value().at({0, 1, 1}), 9.f);
  EXPECT_FLOAT_EQ(y.value().at({0, 0, 0}), 4.f);
}

TEST(Conv2d, NonIntegralExtentIsConfigError) {
  EXPECT_THROW(ad::ConvOutputExtent(4, 3, 0, 2), ConfigError);
  EXPECT_EQ(ad::ConvOutputExtent(10, 5, 2, 1), 10u);
  Graph<float> g;
  EXPECT_THROW(ad::Conv2d(g.Constant(TensorF({1, 4, 4})), g.Constant(TensorF({1, 1, 2, 2})),
                          g.Constant(TensorF({1})), 0, 1),
               ConfigError);
}

TEST(Conv2d, Gradient) {
  Rng rng(7);
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::Conv2d(v[0], v[1], v[2], 1, 1)); },
      {RandomTensor({1, 4, 4}, rng), RandomTensor({1, 1, 3, 3}, rng), RandomTensor({1}, rng)});
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::Conv2d(v[0], v[1], v[2], 2, 1)); },
      {RandomTensor({2, 3, 5, 5}, rng), RandomTensor({2, 3, 5, 5}, rng), RandomTensor({2}, rng)});
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::Conv2d(v[0], v[1], v[2], 1, 2)); },
      {RandomTensor({2, 5, 5}, rng), RandomTensor({3, 2, 3, 3}, rng), RandomTensor({3}, rng)});
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Rng rng(8);
  Graph<float> g;
  auto q = g.Constant(RandomTensor({3, 4}, rng).Cast<float>());
  auto k = g.Constant(RandomTensor({1, 4}, rng).Cast<float>());
  auto v = g.Constant(TensorF({1, 2}, {0.25f, -2.f}));
  const TensorF& out = ad::ScaledDotAttention(q, k, v).value();
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_FLOAT_EQ(out.at({i, 0}), 0.25f);
    EXPECT_FLOAT_EQ(out.at({i, 1}), -2.f);
  }
}

TEST(Attention, IdenticalKeysAverageValues) {
  Rng rng(9);
  Graph<double> g;
  auto q = g.Constant(RandomTensor({2, 4}, rng));
  TensorD keys({3, 4});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t e = 0; e < 4; ++e) keys.at({j, e}) = 0.3 * e;
  auto v = g.Constant(TensorD({3, 1}, {1, 2, 6}));
  const TensorD& out = ad::ScaledDotAttention(q, g.Constant(keys), v).value();
  EXPECT_NEAR(out[0], 3.0, 1e-12);
  EXPECT_NEAR(out[1], 3.0, 1e-12);
}

TEST(Attention, MismatchedHeadDimension) {
  Graph<float> g;
  EXPECT_THROW(ad::ScaledDotAttention(g.Constant(TensorF({2, 4})), g.Constant(TensorF({3, 5})),
                                      g.Constant(TensorF({3, 4}))),
               DimensionError);
}

TEST(Attention, Gradient) {
  Rng rng(10);
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::ScaledDotAttention(v[0], v[1], v[2])); },
      {RandomTensor({2, 4}, rng), RandomTensor({3, 4}, rng), RandomTensor({3, 4}, rng)});
}

TEST(Cosine, ClosedForms) {
  Graph<double> g;
  auto e1 = g.Constant(TensorD({2}, {1, 0}));
  auto e2 = g.Constant(TensorD({2}, {0, 1}));
  auto d = g.Constant(TensorD({2}, {1, 1}));
  EXPECT_DOUBLE_EQ(ad::CosineSimilarity(e1, e1).value()[0], 1.0);
  EXPECT_DOUBLE_EQ(ad::CosineSimilarity(e1, e2).value()[0], 0.0);
  EXPECT_NEAR(ad::CosineSimilarity(d, e1).value()[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(ad::CosineSimilarity(e1, g.Constant(TensorD({2}))), NumericalError);
}

TEST(Cosine, Gradient) {
  Rng rng(11);
  ExpectGradientsMatch(
      [](auto&, const auto& v) { return ad::CosineSimilarity(v[0], v[1]); },
      {RandomTensor({5}, rng), RandomTensor({5}, rng)});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::L2Normalize(v[0])); },
                       {RandomTensor({3, 4}, rng)});
}

TEST(Backward, IdentityAndSquare) {
  Graph<double> g;
  auto x = g.Parameter(TensorD::Scalar(3.0));
  g.Backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);

  Graph<double> h;
  auto y = h.Parameter(TensorD({2}, {1, 2}));
  h.Backward(ad::Sum(ad::Square(y)));
  EXPECT_EQ(y.grad().vec(), (std::vector<double>{2, 4}));
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph<double> g;
  auto x = g.Parameter(TensorD({2}, {1, 2}));
  EXPECT_THROW(g.Backward(ad::Square(x)), ConfigError);
}

TEST(Backward, EveryGradNodeGetsBufferOfItsShape) {
  Graph<double> g;
  auto x = g.Parameter(TensorD({2, 3}));
  auto unused = g.Parameter(TensorD({4}));
  g.Backward(ad::Sum(ad::Exp(x)));
  EXPECT_EQ(x.grad().shape(), (Shape{2, 3}));
  EXPECT_EQ(unused.grad().shape(), (Shape{4}));
}

TEST(Graph, NaNOutputIsNumericalError) {
  Graph<float> g;
  EXPECT_THROW(ad::Log(g.Constant(TensorF({1}, {-1.f}))), NumericalError);
}

TEST(Elementwise, Gradients) {
  Rng rng(12);
  auto x = RandomTensor({2, 3}, rng);
  auto y = RandomTensor({3}, rng, 0.5, 2.0);
  auto pos = RandomTensor({2, 3}, rng, 0.5, 2.0);
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Add(v[0], v[1])); }, {x, y});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Sub(v[1], v[0])); }, {x, y});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Mul(v[0], v[1])); }, {x, y});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Div(v[0], v[1])); }, {x, y});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Scale(ad::Neg(v[0]), 2.5)); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Exp(v[0])); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Log(v[0])); }, {pos});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::PowScalar(v[0], 2.5)); }, {pos});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Sigmoid(v[0])); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::LogSigmoid(v[0])); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Gelu(v[0])); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::AddScalar(ad::Square(v[0]), 1.0)); }, {x});
}

TEST(Elementwise, LogSigmoidSaturatesWithoutOverflow) {
  Graph<double> g;
  auto y = ad::LogSigmoid(g.Constant(TensorD({2}, {-800.0, 800.0}))).value();
  EXPECT_DOUBLE_EQ(y[0], -800.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(Reductions, Gradients) {
  Rng rng(13);
  auto x = RandomTensor({2, 3, 4}, rng);
  ExpectGradientsMatch([](auto&, const auto& v) { return ad::Mean(v[0]); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Sum(v[0], {1})); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Mean(v[0], {0, 2}, true)); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Mean(v[0], {-1})); }, {x});
}

TEST(Structure, Gradients) {
  Rng rng(14);
  auto x = RandomTensor({2, 3, 4}, rng);
  auto y = RandomTensor({2, 5, 4}, rng);
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Reshape(v[0], {6, 4})); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Permute(v[0], {2, 0, 1})); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Transpose(v[0], 0, 2)); }, {x});
  ExpectGradientsMatch([](auto& g, const auto& v) { return Probe(g, ad::Slice(v[0], 1, 1, 3)); }, {x});
  ExpectGradientsMatch(
      [](auto& g, const auto& v) {
        using V = std::decay_t<decltype(v[0])>;
        std::vector<V> parts{v[0], v[1]};
        return Probe(g, ad::Concat(std::span<const V>(parts), 1));
      },
      {x, y});
}

TEST(Structure, Linear) {
  Rng rng(15);
  ExpectGradientsMatch(
      [](auto& g, const auto& v) { return Probe(g, ad::Linear(v[0], v[1], v[2])); },
      {RandomTensor({3, 4}, rng), RandomTensor({2, 4}, rng), RandomTensor({2}, rng)});
}

TEST(Structure, PermuteRoundTripIsBitExact) {
  Rng rng(16);
  TensorF x = RandomTensor({3, 4, 5, 2}, rng).Cast<float>();
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::size_t> inverse(4);
  for (std::size_t i = 0; i < 4; ++i) inverse[perm[i]] = i;
  TensorF back = Permute(Permute(x, perm), inverse);
  EXPECT_EQ(back, x);
  EXPECT_EQ(x.Reshaped({12, 10}).Reshaped({3, 4, 5, 2}), x);
}

TEST(Determinism, SameSeedSameValuesAndGradients) {
  auto run = [] {
    Rng rng(99);
    Graph<float> g;
    auto a = g.Parameter(RandomTensor({4, 6}, rng).Cast<float>());
    auto b = g.Parameter(RandomTensor({6, 3}, rng).Cast<float>());
    auto loss = ad::Mean(ad::Gelu(ad::Softmax(ad::MatMul(a, b), -1)));
    g.Backward(loss);
    return std::make_tuple(loss.value(), a.grad(), b.grad());
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, ZeroGradientNoDecayLeavesParameter) {
  ParamSet params;
  params.Add("p", TensorF({1}, {0.75f}));
  AdamW opt({.lr = 1e-2, .weight_decay = 0.0});
  std::vector<TensorF> grads{TensorF({1})};
  for (int i = 0; i < 3; ++i) opt.Step(params, grads);
  EXPECT_EQ(params.at("p")[0], 0.75f);
}

TEST(AdamW, FirstStepMatchesHandEvaluation) {
  ParamSet params;
  params.Add("p", TensorF({1}, {1.f}));
  AdamW opt({.lr = 1e-4, .weight_decay = 0.0});
  opt.Step(params, std::vector<TensorF>{TensorF({1}, {1.f})});
  // m_hat = 1, v_hat = 1 after bias correction.
  const double expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8));
  EXPECT_NEAR(params.at("p")[0], expected, 1e-7);
  EXPECT_EQ(opt.step(), 1u);
}

TEST(AdamW, DecayIsDecoupled) {
  ParamSet params;
  params.Add("p", TensorF({1}, {2.f}));
  AdamW opt({.lr = 0.1, .weight_decay = 0.5});
  opt.Step(params, std::vector<TensorF>{TensorF({1})});
  // Zero gradient: only the decoupled shrink applies.
  EXPECT_FLOAT_EQ(params.at("p")[0], 2.f * (1.f - 0.05f));
  EXPECT_EQ(opt.first_moment()[0][0], 0.f);
}

TEST(AdamW, MinimizesQuadratic) {
  ParamSet params;
  params.Add("p", TensorF({1}, {1.f}));
  AdamW opt({.lr = 0.1});
  for (int i = 0; i < 200; ++i) {
    const float p = params.at("p")[0];
    opt.Step(params, std::vector<TensorF>{TensorF({1}, {2.f * p})});
  }
  EXPECT_LT(std::abs(params.at("p")[0]), 0.05f);
}

TEST(AdamW, NaNGradientNamesParameter) {
  ParamSet params;
  params.Add("head/fc_s/weight", TensorF({2}));
  AdamW opt;
  try {
    opt.Step(params, std::vector<TensorF>{TensorF({2}, {0.f, NAN})});
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("head/fc_s/weight"), std::string::npos);
  }
}

}  // namespace
}  // namespace sidenet
