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

#include <gtest/gtest.h>

#include "gradcheck.h"
#include "sidenet/error.h"
#include "sidenet/temporal.h"

namespace sidenet {
namespace {

using ad::Graph;
using ad::Var;
using testing::CheckGradients;
using testing::RandomTensor;

template <typename U>
Var<U> Probe(Graph<U>& g, Var<U> y) {
  Tensor<U> w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<U>(std::sin(0.7 + 0.9 * i));
  return ad::Sum(ad::Mul(y, g.Constant(std::move(w))));
}

LayerAttributes RandomTaps(std::size_t t, std::size_t p, std::size_t h, std::size_t d,
                           std::uint64_t seed) {
  Rng rng(seed);
  LayerAttributes la;
  la.query = RandomTensor({t, p, h, d}, rng).Cast<float>();
  la.key = RandomTensor({t, p, h, d}, rng).Cast<float>();
  la.value = RandomTensor({t, p, h, d}, rng).Cast<float>();
  la.patches = RandomTensor({t, p, h * d}, rng).Cast<float>();
  return la;
}

const std::vector<Attribute> kAllAttributes{Attribute::kQuery, Attribute::kKey,
                                            Attribute::kValue};

TEST(PatchTemporalAttention, FusedMatchesPrimitiveComposition) {
  Rng rng(1);
  std::vector<TensorD> in{RandomTensor({4, 3, 2, 5}, rng), RandomTensor({4, 3, 2, 5}, rng)};
  Graph<double> g1, g2;
  std::vector<Var<double>> a{g1.Parameter(in[0]), g1.Parameter(in[1])};
  std::vector<Var<double>> b{g2.Parameter(in[0]), g2.Parameter(in[1])};
  auto ya = PatchTemporalAttention<double>(a), yb = PatchTemporalAttentionReference<double>(b);
  ASSERT_EQ(ya.shape(), (Shape{3, 4, 4, 4}));
  ASSERT_EQ(ya.shape(), yb.shape());
  for (std::size_t i = 0; i < ya.value().size(); ++i)
    EXPECT_NEAR(ya.value()[i], yb.value()[i], 1e-12);
  g1.Backward(Probe(g1, ya));
  g2.Backward(Probe(g2, yb));
  for (int i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < in[i].size(); ++j)
      EXPECT_NEAR(a[i].grad()[j], b[i].grad()[j], 1e-12);
}

TEST(PatchTemporalAttention, Gradient) {
  Rng rng(2);
  auto fn = [](auto& g, const auto& v) {
    using V = std::decay_t<decltype(v[0])>;
    std::vector<V> attrs{v[0], v[1], v[2]};
    return Probe(g, PatchTemporalAttention(std::span<const V>(attrs)));
  };
  const std::vector<TensorD> in{RandomTensor({3, 4, 2, 3}, rng), RandomTensor({3, 4, 2, 3}, rng),
                                RandomTensor({3, 4, 2, 3}, rng)};
  EXPECT_LT(CheckGradients<double>(fn, in).max_rel_error, 1e-6);
  EXPECT_LT(CheckGradients<float>(fn, in).max_rel_error, 1e-3);
}

TEST(PatchTemporalAttention, ConstantClipGivesUniformRows) {
  Rng rng(3);
  const TensorD frame = RandomTensor({1, 4, 2, 3}, rng);
  TensorD clip({6, 4, 2, 3});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t i = 0; i < frame.size(); ++i) clip[t * frame.size() + i] = frame[i];
  Graph<double> g;
  std::vector<Var<double>> attrs{g.Constant(clip)};
  for (double v : PatchTemporalAttention<double>(attrs).value().vec())
    EXPECT_NEAR(v, 1.0 / 6.0, 1e-12);
}

TEST(PatchTemporalAttention, TwoOrthogonalFramesClosedForm) {
  // x_0 = (a, 0), x_1 = (0, b): row t1 is softmax([|x_t1|^2 / sqrt(D), 0]) up to order.
  const double a = 1.3, b = 0.6;
  TensorD clip({2, 1, 1, 2});
  clip[0] = a;
  clip[3] = b;
  Graph<double> g;
  std::vector<Var<double>> attrs{g.Constant(clip)};
  const auto m = PatchTemporalAttention<double>(attrs).value();
  const double s0 = a * a / std::sqrt(2.0), s1 = b * b / std::sqrt(2.0);
  EXPECT_NEAR(m[0], std::exp(s0) / (std::exp(s0) + 1.0), 1e-12);
  EXPECT_NEAR(m[1], 1.0 / (std::exp(s0) + 1.0), 1e-12);
  EXPECT_NEAR(m[2], 1.0 / (std::exp(s1) + 1.0), 1e-12);
  EXPECT_NEAR(m[3], std::exp(s1) / (std::exp(s1) + 1.0), 1e-12);
}

TemporalGeometry TinyGeometry(std::size_t frames) {
  return {.channels = 12, .frames = frames, .patches = 16};
}

TEST(TemporalForward, TinyShapesAndRowSums) {
  const auto taps = RandomTaps(10, 16, 4, 16, 4);
  const auto geo = TinyGeometry(10);
  const auto shapes = TemporalParameterShapes(geo);
  Rng rng(5);
  Graph<float> g;
  std::vector<Var<float>> w;
  for (const auto& s : shapes) w.push_back(g.Parameter(RandomTensor(s, rng, -0.1, 0.1).Cast<float>()));
  const TemporalWeights<float> weights{w[0], w[1], w[2], w[3], w[4], w[5]};
  const auto r = TemporalForward(g, taps, kAllAttributes, weights, geo);
  EXPECT_EQ(r.m1.shape(), (Shape{16, 12, 10, 10}));
  EXPECT_EQ(r.m2.shape(), (Shape{16, 10, 10}));
  EXPECT_EQ(r.m3.shape(), (Shape{16, 100}));
  EXPECT_EQ(r.embedding.shape(), (Shape{16}));
  const auto& m1 = r.m1.value();
  for (std::size_t row = 0; row < m1.size() / 10; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 10; ++j) s += m1[row * 10 + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(AffinityConv, DeltaKernelSelectsChannel) {
  Rng rng(6);
  const auto m1 = RandomTensor({4, 3, 5, 5}, rng);
  TensorD c1({1, 3, 5, 5}), bias({1});
  c1.at({0, 0, 2, 2}) = 1.0;
  Graph<double> g;
  const TemporalGeometry geo{.channels = 3, .frames = 5, .patches = 4};
  const auto m2 = AffinityConv(g.Constant(m1), g.Constant(c1), g.Constant(bias), geo).value();
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(m2[p * 25 + i], m1[p * 75 + i], 1e-12);
}

TEST(AffinityConv, BoxKernelOnUniformMaps) {
  const std::size_t c = 12, t = 10;
  TensorD m1({2, c, t, t});
  m1.Fill(1.0 / t);
  TensorD c1({1, c, 5, 5}), bias({1});
  c1.Fill(1.0);
  Graph<double> g;
  const TemporalGeometry geo{.channels = c, .frames = t, .patches = 4};
  const auto m2 = AffinityConv(g.Constant(m1), g.Constant(c1), g.Constant(bias), geo).value();
  for (std::size_t i = 2; i < t - 2; ++i)
    for (std::size_t j = 2; j < t - 2; ++j)
      EXPECT_NEAR(m2.at({1, i, j}), c * 25.0 / t, 1e-9);
  // Corner sees a 3x3 window.
  EXPECT_NEAR(m2.at({0, 0, 0}), c * 9.0 / t, 1e-9);
}

TEST(ResidualMix, ZeroAndIdentityWeights) {
  Rng rng(7);
  const auto m2 = RandomTensor({3, 4, 4}, rng);
  TensorD zero({16, 16}), eye({16, 16}), bias({16});
  for (std::size_t i = 0; i < 16; ++i) eye.at({i, i}) = 1.0;
  Graph<double> g;
  const auto a = ResidualMix(g.Constant(m2), g.Constant(zero), g.Constant(bias)).value();
  const auto b = ResidualMix(g.Constant(m2), g.Constant(eye), g.Constant(bias)).value();
  EXPECT_EQ(a.shape(), (Shape{3, 16}));
  for (std::size_t i = 0; i < m2.size(); ++i) {
    EXPECT_DOUBLE_EQ(a[i], m2[i]);
    EXPECT_DOUBLE_EQ(b[i], 2.0 * m2[i]);
  }
}

TEST(ResidualMix, Gradient) {
  Rng rng(8);
  auto fn = [](auto& g, const auto& v) { return Probe(g, ResidualMix(v[0], v[1], v[2])); };
  const std::vector<TensorD> in{RandomTensor({3, 2, 2}, rng), RandomTensor({4, 4}, rng),
                                RandomTensor({4}, rng)};
  EXPECT_LT(CheckGradients<double>(fn, in).max_rel_error, 1e-6);
}

TEST(SpatialAggregate, DeltaOnFirstChannelCopiesIt) {
  Rng rng(9);
  const auto m3 = RandomTensor({16, 9}, rng);
  TensorD c2({1, 9, 5, 5}), bias({1});
  c2.at({0, 0, 2, 2}) = 1.0;
  const TemporalGeometry geo{.channels = 3, .frames = 3, .patches = 16};
  Graph<double> g;
  const auto e = SpatialAggregate(g.Constant(m3), g.Constant(c2), g.Constant(bias), geo).value();
  ASSERT_EQ(e.shape(), (Shape{16}));
  for (std::size_t p = 0; p < 16; ++p) EXPECT_NEAR(e[p], m3.at({p, 0}), 1e-12);
}

TEST(TemporalGeometry, NonSquarePatchCountRejected) {
  const TemporalGeometry geo{.channels = 3, .frames = 4, .patches = 15};
  EXPECT_THROW(geo.Validate(), ConfigError);
  const TemporalGeometry empty{.channels = 0, .frames = 4, .patches = 16};
  EXPECT_THROW(empty.Validate(), ConfigError);
}

// Rotates an [..., n, n] block by 180 degrees in its last two axes.
TensorD Rotate180(const TensorD& x) {
  const std::size_t n = x.shape().back(), block = n * n;
  TensorD out = x;
  for (std::size_t b = 0; b < x.size() / block; ++b)
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] = x[b * block + block - 1 - i];
  return out;
}

TEST(TemporalForward, TimeReversalInvarianceWithSymmetricKernels) {
  const std::size_t t = 5;
  const auto taps = RandomTaps(t, 16, 2, 4, 10);
  LayerAttributes reversed = taps;
  const std::size_t frame = 16 * 8;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < frame; ++j) {
      reversed.query[i * frame + j] = taps.query[(t - 1 - i) * frame + j];
      reversed.key[i * frame + j] = taps.key[(t - 1 - i) * frame + j];
      reversed.value[i * frame + j] = taps.value[(t - 1 - i) * frame + j];
    }
  const TemporalGeometry geo{.channels = 6, .frames = t, .patches = 16};
  Rng rng(11);
  // C1 symmetric under a 180-degree rotation of its (t1, t2) window. Reversing
  // time permutes the T'^2 channels of M3 by the same rotation, so C2 must be
  // symmetric under that channel permutation as well.
  TensorD c1 = RandomTensor({1, 6, 5, 5}, rng);
  {
    const TensorD r = Rotate180(c1);
    for (std::size_t i = 0; i < c1.size(); ++i) c1[i] = 0.5 * (c1[i] + r[i]);
  }
  TensorD c2 = RandomTensor({1, t * t, 5, 5}, rng);
  for (std::size_t ch = 0; ch < t * t; ++ch)
    for (std::size_t k = 0; k < 25; ++k) {
      const std::size_t mirror = t * t - 1 - ch;
      const double avg = 0.5 * (c2.at({0, ch, k / 5, k % 5}) + c2.at({0, mirror, k / 5, k % 5}));
      c2.at({0, ch, k / 5, k % 5}) = avg;
      c2.at({0, mirror, k / 5, k % 5}) = avg;
    }
  TensorD w({t * t, t * t}), wb = RandomTensor({t * t}, rng);
  for (std::size_t i = 0; i < t * t; ++i) wb[t * t - 1 - i] = wb[i];
  const TensorD b1 = RandomTensor({1}, rng), b2 = RandomTensor({1}, rng);

  auto run = [&](const LayerAttributes& la) {
    Graph<double> g;
    const TemporalWeights<double> weights{g.Constant(c1), g.Constant(b1), g.Constant(w),
                                          g.Constant(wb), g.Constant(c2), g.Constant(b2)};
    return TemporalForward(g, la, kAllAttributes, weights, geo).embedding.value();
  };
  const auto a = run(taps), b = run(reversed);
  for (std::size_t p = 0; p < 16; ++p) EXPECT_NEAR(a[p], b[p], 1e-6);

  // A generic C1 breaks the symmetry.
  c1 = RandomTensor({1, 6, 5, 5}, rng);
  const auto c = run(taps), d = run(reversed);
  double diff = 0.0;
  for (std::size_t p = 0; p < 16; ++p) diff = std::max(diff, std::abs(c[p] - d[p]));
  EXPECT_GT(diff, 1e-4);
}

TEST(TemporalForward, GradientReachesEveryWeight) {
  const std::size_t t = 4;
  const auto taps = RandomTaps(t, 4, 2, 3, 12);
  const TemporalGeometry geo{.channels = 4, .frames = t, .patches = 4};
  const std::vector<Attribute> gamma{Attribute::kKey, Attribute::kValue};
  Rng rng(13);
  std::vector<TensorD> in;
  for (const auto& s : TemporalParameterShapes(geo)) in.push_back(RandomTensor(s, rng, -0.5, 0.5));
  auto fn = [&](auto& g, const auto& v) {
    const TemporalWeights w{v[0], v[1], v[2], v[3], v[4], v[5]};
    return Probe(g, TemporalForward(g, taps, gamma, w, geo).embedding);
  };
  EXPECT_LT(CheckGradients<double>(fn, in).max_rel_error, 1e-6);
  EXPECT_LT(CheckGradients<float>(fn, in).max_rel_error, 1e-3);

  Graph<double> g;
  std::vector<Var<double>> v;
  for (const auto& x : in) v.push_back(g.Parameter(x));
  g.Backward(fn(g, v));
  for (std::size_t i = 0; i < v.size(); ++i) {
    double norm = 0.0;
    for (double x : v[i].grad().vec()) norm += x * x;
    EXPECT_GT(norm, 0.0) << "weight " << i;
  }
}

TEST(TemporalForward, ConstantClipsShareOneEmbedding) {
  // Uniform M1 does not depend on what the constant frame is.
  const TemporalGeometry geo{.channels = 3, .frames = 4, .patches = 4};
  Rng rng(14);
  std::vector<TensorD> w;
  for (const auto& s : TemporalParameterShapes(geo)) w.push_back(RandomTensor(s, rng));
  auto run = [&](std::uint64_t seed) {
    auto one = RandomTaps(1, 4, 3, 2, seed);
    LayerAttributes clip;
    clip.query = TensorF({4, 4, 3, 2});
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t i = 0; i < one.query.size(); ++i)
        clip.query[t * one.query.size() + i] = one.query[i];
    Graph<double> g;
    const TemporalWeights<double> tw{g.Constant(w[0]), g.Constant(w[1]), g.Constant(w[2]),
                                     g.Constant(w[3]), g.Constant(w[4]), g.Constant(w[5])};
    const std::vector<Attribute> gamma{Attribute::kQuery};
    return TemporalForward(g, clip, gamma, tw, geo).embedding.value();
  };
  const auto a = run(15), b = run(16);
  for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(a[p], b[p], 1e-9);
}

}  // namespace
}  // namespace sidenet
