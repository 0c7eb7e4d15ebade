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

#include "sidenet/autodiff.h"
#include "sidenet/error.h"
#include "sidenet/rng.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {
namespace {

TensorF RandomFrames(const EncoderConfig& c, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  TensorF f({t, 3, c.image_size, c.image_size});
  for (float& v : f.data()) v = static_cast<float>(rng.Normal());
  return f;
}

// Straight double-precision forward built from autodiff primitives; shares
// no code with the encoder's hand-written kernels.
std::vector<LayerAttributes> ReferenceTaps(const VitEncoder& enc, const TensorF& frames) {
  const EncoderConfig& c = enc.config();
  const EncoderWeights& w = enc.weights();
  const std::size_t t_count = frames.dim(0), s = c.image_size, ps = c.patch_size, g = c.grid();
  const std::size_t n = c.tokens(), p = c.patches(), width = c.width();
  std::vector<LayerAttributes> out(c.layers);
  for (auto& la : out) {
    la.query = TensorF({t_count, p, c.heads, c.head_dim});
    la.key = la.query;
    la.value = la.query;
    la.patches = TensorF({t_count, p, width});
  }
  for (std::size_t t = 0; t < t_count; ++t) {
    ad::Graph<double> graph;
    auto cst = [&](const TensorF& x) { return graph.Constant(x.Cast<double>()); };
    TensorD patches({p, 3 * ps * ps});
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t ch = 0; ch < 3; ++ch)
          for (std::size_t ky = 0; ky < ps; ++ky)
            for (std::size_t kx = 0; kx < ps; ++kx)
              patches.at({gy * g + gx, (ch * ps + ky) * ps + kx}) =
                  frames.at({t, ch, gy * ps + ky, gx * ps + kx});
    auto emb = ad::Linear(graph.Constant(patches), cst(w.patch_weight), cst(w.patch_bias));
    std::vector<ad::Var<double>> rows{ad::Reshape(cst(w.class_token), {1, width}), emb};
    auto x = ad::Add(ad::Concat(std::span<const ad::Var<double>>(rows), 0), cst(w.pos_embed));
    if (w.ln_pre) x = ad::LayerNorm(x, cst(w.ln_pre->first), cst(w.ln_pre->second));
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& lw = w.layers[l];
      auto h = ad::LayerNorm(x, cst(lw.ln1_gain), cst(lw.ln1_bias));
      auto q = ad::Linear(h, cst(lw.wq), cst(lw.bq));
      auto k = ad::Linear(h, cst(lw.wk), cst(lw.bk));
      auto v = ad::Linear(h, cst(lw.wv), cst(lw.bv));
      const std::pair<ad::Var<double>, TensorF*> taps[] = {
          {q, &out[l].query}, {k, &out[l].key}, {v, &out[l].value}};
      for (const auto& [var, dst] : taps) {
        for (std::size_t i = 0; i < p * width; ++i)
          (*dst)[t * p * width + i] = static_cast<float>(var.value()[width + i]);
      }
      auto split = [&](ad::Var<double> z) {
        return ad::Permute(ad::Reshape(z, {n, c.heads, c.head_dim}), {1, 0, 2});
      };
      auto z = ad::ScaledDotAttention(split(q), split(k), split(v));
      z = ad::Reshape(ad::Permute(z, {1, 0, 2}), {n, width});
      x = ad::Add(x, ad::Linear(z, cst(lw.wo), cst(lw.bo)));
      auto m = ad::Linear(ad::LayerNorm(x, cst(lw.ln2_gain), cst(lw.ln2_bias)),
                          cst(lw.fc1_weight), cst(lw.fc1_bias));
      m = c.activation == MlpActivation::kGelu ? ad::Gelu(m)
                                                : ad::Mul(m, ad::Sigmoid(ad::Scale(m, 1.702)));
      x = ad::Add(x, ad::Linear(m, cst(lw.fc2_weight), cst(lw.fc2_bias)));
      for (std::size_t i = 0; i < p * width; ++i)
        out[l].patches[t * p * width + i] = static_cast<float>(x.value()[width + i]);
    }
  }
  return out;
}

double MaxAbsDiff(const TensorF& a, const TensorF& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

TEST(VitEncoder, TinyShapeContract) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 1);
  const auto taps = enc.EncodeClip(RandomFrames(enc.config(), 3, 2));
  ASSERT_EQ(taps.size(), 4u);
  for (const auto& la : taps) {
    EXPECT_EQ(la.query.shape(), (Shape{3, 16, 4, 16}));
    EXPECT_EQ(la.key.shape(), (Shape{3, 16, 4, 16}));
    EXPECT_EQ(la.value.shape(), (Shape{3, 16, 4, 16}));
    EXPECT_EQ(la.patches.shape(), (Shape{3, 16, 64}));
  }
}

TEST(VitEncoder, MatchesPrimitiveReference) {
  for (auto act : {MlpActivation::kGelu, MlpActivation::kQuickGelu}) {
    auto cfg = EncoderConfig::Tiny();
    cfg.activation = act;
    const auto enc = VitEncoder::Synthesize(cfg, 3);
    const auto frames = RandomFrames(cfg, 2, 4);
    const auto mine = enc.EncodeClip(frames);
    const auto ref = ReferenceTaps(enc, frames);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      EXPECT_LT(MaxAbsDiff(mine[l].query, ref[l].query), 1e-4) << "layer " << l;
      EXPECT_LT(MaxAbsDiff(mine[l].key, ref[l].key), 1e-4) << "layer " << l;
      EXPECT_LT(MaxAbsDiff(mine[l].value, ref[l].value), 1e-4) << "layer " << l;
      EXPECT_LT(MaxAbsDiff(mine[l].patches, ref[l].patches), 1e-4) << "layer " << l;
    }
  }
}

TEST(VitEncoder, IdenticalFramesGiveIdenticalTaps) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 5);
  auto one = RandomFrames(enc.config(), 1, 6);
  TensorF two({2, 3, 32, 32});
  std::copy(one.data().begin(), one.data().end(), two.data().begin());
  std::copy(one.data().begin(), one.data().end(), two.data().begin() + one.size());
  for (const auto& la : enc.EncodeClip(two)) {
    for (const TensorF* t : {&la.query, &la.key, &la.value, &la.patches}) {
      const std::size_t half = t->size() / 2;
      EXPECT_TRUE(std::equal(t->data().begin(), t->data().begin() + half,
                             t->data().begin() + half));
    }
  }
  EXPECT_EQ(enc.EncodeClip(two)[3].patches, enc.EncodeClip(two)[3].patches);
}

TEST(VitEncoder, MlpWeightsDoNotReachSameLayerAttributes) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 7);
  auto weights = enc.weights();
  for (float& v : weights.layers[2].fc1_weight.data()) v *= 1.5f;
  const VitEncoder changed(enc.config(), weights);
  const auto frames = RandomFrames(enc.config(), 1, 8);
  const auto a = enc.EncodeClip(frames);
  const auto b = changed.EncodeClip(frames);
  EXPECT_EQ(a[2].query, b[2].query);
  EXPECT_EQ(a[2].key, b[2].key);
  EXPECT_EQ(a[2].value, b[2].value);
  EXPECT_NE(a[2].patches, b[2].patches);
}

TEST(VitEncoder, TranslationChangesKeys) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 9);
  const auto frames = RandomFrames(enc.config(), 1, 10);
  TensorF shifted(frames.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        shifted.at({0, c, y, x}) = frames.at({0, c, y, (x + 8) % 32});
  EXPECT_GT(MaxAbsDiff(enc.EncodeClip(frames)[0].key, enc.EncodeClip(shifted)[0].key), 1e-3);
}

TEST(VitEncoder, ArchiveRoundTripInfersTinyConfig) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 11);
  const auto bytes = enc.ToArchive().Serialize();
  const auto loaded = VitEncoder::FromArchive(TensorArchive::Deserialize(bytes));
  EXPECT_EQ(loaded.config().layers, 4u);
  EXPECT_EQ(loaded.config().patches(), 16u);
  EXPECT_EQ(loaded.config().heads, 4u);
  EXPECT_EQ(loaded.config().head_dim, 16u);
  EXPECT_EQ(loaded.ToArchive().Serialize(), bytes);
  const auto frames = RandomFrames(enc.config(), 2, 12);
  EXPECT_EQ(loaded.EncodeClip(frames)[1].key, enc.EncodeClip(frames)[1].key);
}

TEST(VitEncoder, InfersLargeGeometryFromShapes) {
  // ViT-L/14 geometry (224 px, 14 px patches, 24 layers) with a narrow width
  // so the archive stays small.
  EncoderConfig cfg;
  cfg.layers = 24;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.patch_size = 14;
  cfg.image_size = 224;
  cfg.mlp_width = 8;
  const auto archive = VitEncoder::Synthesize(cfg, 13).ToArchive();
  const auto loaded = VitEncoder::FromArchive(archive);
  EXPECT_EQ(loaded.config().layers, 24u);
  EXPECT_EQ(loaded.config().patches(), 256u);
  EXPECT_EQ(loaded.config().image_size, 224u);
}

TEST(VitEncoder, MissingTensorIsNamed) {
  auto archive = VitEncoder::Synthesize(EncoderConfig::Tiny(), 14).ToArchive();
  archive.Erase("layer2/bk");
  try {
    VitEncoder::FromArchive(archive);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("layer2/bk"), std::string::npos) << e.what();
  }
}

TEST(VitEncoder, ExplicitConfigShapeMismatchReportsBoth) {
  const auto archive = VitEncoder::Synthesize(EncoderConfig::Tiny(), 15).ToArchive();
  auto cfg = EncoderConfig::Tiny();
  cfg.mlp_width = 128;
  try {
    VitEncoder::FromArchive(archive, cfg);
    FAIL();
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[256, 64]"), std::string::npos) << what;
    EXPECT_NE(what.find("[128, 64]"), std::string::npos) << what;
  }
}

TEST(VitEncoder, WrongFrameSizeIsDimensionError) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 16);
  EXPECT_THROW(enc.EncodeClip(TensorF({1, 3, 28, 28})), DimensionError);
  std::vector<Frame> frames{Frame(30, 32)};
  EXPECT_THROW(enc.Normalize(frames), DimensionError);
}

TEST(VitEncoder, NormalizeUsesStoredStatistics) {
  auto archive = VitEncoder::Synthesize(EncoderConfig::Tiny(), 17).ToArchive();
  archive.Put("preprocess/mean", TensorF({3}, {0.1f, 0.2f, 0.3f}));
  archive.Put("preprocess/std", TensorF({3}, {0.5f, 0.25f, 2.f}));
  const auto enc = VitEncoder::FromArchive(archive);
  std::vector<Frame> frames{Frame(32, 32, 51)};  // 51 / 255 = 0.2
  const TensorF x = enc.Normalize(frames);
  EXPECT_NEAR(x.at({0, 0, 5, 5}), (0.2f - 0.1f) / 0.5f, 1e-6);
  EXPECT_NEAR(x.at({0, 1, 5, 5}), 0.f, 1e-6);
  EXPECT_NEAR(x.at({0, 2, 5, 5}), (0.2f - 0.3f) / 2.f, 1e-6);
}

TEST(ImagePatchIndex, RowMajorFloor) {
  EncoderConfig large;
  large.layers = 24;
  large.heads = 16;
  large.head_dim = 64;
  large.patch_size = 14;
  large.image_size = 224;
  large.mlp_width = 4096;
  EXPECT_EQ(ImagePatchIndex(0, 0, large), 0u);
  EXPECT_EQ(ImagePatchIndex(223, 223, large), 255u);
  EXPECT_EQ(ImagePatchIndex(14, 0, large), 1u);
  EXPECT_EQ(ImagePatchIndex(13.9, 14, large), 16u);
  EXPECT_THROW(ImagePatchIndex(224, 0, large), DataError);
  EXPECT_THROW(ImagePatchIndex(-0.5, 3, large), DataError);
}

TEST(GoldenTaps, ReplayMatchesRecording) {
  const auto enc = VitEncoder::Synthesize(EncoderConfig::Tiny(), 18);
  const auto golden = RecordGoldenTaps(enc, RandomFrames(enc.config(), 3, 19));
  const auto reloaded = TensorArchive::Deserialize(golden.Serialize());
  const auto dev = ReplayGoldenTaps(enc, reloaded);
  ASSERT_EQ(dev.size(), 4u);
  for (double d : dev) EXPECT_EQ(d, 0.0);

  // A different encoder must not replay the same fixture.
  const auto other = VitEncoder::Synthesize(EncoderConfig::Tiny(), 20);
  const auto off = ReplayGoldenTaps(other, reloaded);
  EXPECT_GT(off[0], 1e-3);
}

}  // namespace
}  // namespace sidenet
