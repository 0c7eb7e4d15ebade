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

#include "sidenet/vit_encoder.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

std::string LayerKey(std::size_t l, const char* leaf) {
  return fmt::format("layer{}/{}", l, leaf);
}

// y[r, :] = x[r, :] W^T + b for W: [out, in].
void LinearRows(const float* x, std::size_t rows, std::size_t in,
                const TensorF& weight, const TensorF& bias, float* y) {
  const std::size_t out = weight.dim(0);
  const float* w = weight.data().data();
  const float* b = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * in;
    float* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const float* wo = w + o * in;
      float acc = 0.f;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wo[i];
      yr[o] = acc + b[o];
    }
  }
}

void LayerNormRows(const float* x, std::size_t rows, std::size_t n,
                   const TensorF& gain, const TensorF& bias, float* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < n; ++j) {
      y[r * n + j] = static_cast<float>((xr[j] - mean) * rstd) * gain[j] + bias[j];
    }
  }
}

float Activate(float v, MlpActivation act) {
  if (act == MlpActivation::kQuickGelu) {
    return v / (1.f + std::exp(-1.702f * v));
  }
  return 0.5f * v * (1.f + std::erf(v / std::numbers::sqrt2_v<float>));
}

TensorF RandomNormal(Shape shape, double stddev, Rng& rng) {
  TensorF t(std::move(shape));
  for (float& v : t.data()) v = static_cast<float>(rng.Normal() * stddev);
  return t;
}

}  // namespace

const char* AttributeName(Attribute a) {
  switch (a) {
    case Attribute::kQuery:
      return "q";
    case Attribute::kKey:
      return "k";
    case Attribute::kValue:
      return "v";
  }
  return "?";
}

Attribute ParseAttribute(const std::string& text) {
  if (text == "q") return Attribute::kQuery;
  if (text == "k") return Attribute::kKey;
  if (text == "v") return Attribute::kValue;
  throw ConfigError(fmt::format("unknown attention attribute '{}' (want q, k or v)", text));
}

void EncoderConfig::Validate() const {
  if (layers == 0 || heads == 0 || head_dim == 0 || patch_size == 0 ||
      image_size == 0 || mlp_width == 0) {
    throw ConfigError("encoder config has a zero extent");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError(fmt::format("image size {} not divisible by patch size {}",
                                  image_size, patch_size));
  }
}

EncoderConfig EncoderConfig::Tiny() {
  EncoderConfig c;
  c.layers = 4;
  c.heads = 4;
  c.head_dim = 16;
  c.patch_size = 8;
  c.image_size = 32;
  c.mlp_width = 256;
  return c;
}

const TensorF& LayerAttributes::attribute(Attribute a) const {
  switch (a) {
    case Attribute::kQuery:
      return query;
    case Attribute::kKey:
      return key;
    case Attribute::kValue:
      return value;
  }
  return key;
}

VitEncoder::VitEncoder(EncoderConfig config, EncoderWeights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.Validate();
  if (weights_.layers.size() != config_.layers) {
    throw ConfigError(fmt::format("encoder has {} layer weight groups for {} layers",
                                  weights_.layers.size(), config_.layers));
  }
  for (float s : weights_.std) {
    if (!(s > 0.f)) throw DataError("load error: normalization std must be positive");
  }
}

VitEncoder VitEncoder::FromArchive(const TensorArchive& archive,
                                   std::optional<EncoderConfig> config) {
  EncoderConfig cfg;
  if (config) {
    cfg = *config;
  } else {
    const TensorF& cls = archive.Get("class_token");
    const TensorF& patch = archive.Get("patch_embed/weight");
    const TensorF& pos = archive.Get("pos_embed");
    if (cls.rank() != 1 || patch.rank() != 4 || pos.rank() != 2) {
      throw DataError("load error: unexpected rank for class_token, "
                      "patch_embed/weight or pos_embed");
    }
    const std::size_t width = cls.dim(0);
    cfg.patch_size = patch.dim(2);
    const std::size_t patches = pos.dim(0) - 1;
    const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(double(patches))));
    if (grid * grid != patches) {
      throw DataError(fmt::format("load error: {} patches is not a square grid", patches));
    }
    cfg.image_size = grid * cfg.patch_size;
    while (archive.Contains(LayerKey(cfg.layers, "wq"))) ++cfg.layers;
    const std::string& heads = archive.Meta("heads");
    cfg.heads = std::stoul(heads);
    if (cfg.heads == 0 || width % cfg.heads != 0) {
      throw DataError(fmt::format("load error: width {} not divisible by {} heads",
                                  width, heads));
    }
    cfg.head_dim = width / cfg.heads;
    cfg.mlp_width = archive.Get(LayerKey(0, "mlp/fc1/weight")).dim(0);
  }
  auto meta = archive.metadata().find("activation");
  if (meta != archive.metadata().end()) {
    if (meta->second == "quick_gelu") {
      cfg.activation = MlpActivation::kQuickGelu;
    } else if (meta->second == "gelu") {
      cfg.activation = MlpActivation::kGelu;
    } else {
      throw DataError(fmt::format("load error: unknown activation '{}'", meta->second));
    }
  }
  cfg.Validate();

  const std::size_t w = cfg.width();
  const std::size_t ps = cfg.patch_size;
  EncoderWeights wt;
  wt.patch_weight = archive.Get("patch_embed/weight", {w, 3, ps, ps}).Reshaped({w, 3 * ps * ps});
  wt.patch_bias = archive.Contains("patch_embed/bias")
                      ? archive.Get("patch_embed/bias", {w})
                      : TensorF(Shape{w});
  wt.class_token = archive.Get("class_token", {w});
  wt.pos_embed = archive.Get("pos_embed", {cfg.tokens(), w});
  if (archive.Contains("ln_pre/gain")) {
    wt.ln_pre = std::make_pair(archive.Get("ln_pre/gain", {w}), archive.Get("ln_pre/bias", {w}));
  }
  wt.ln_post_gain = archive.Get("ln_post/gain", {w});
  wt.ln_post_bias = archive.Get("ln_post/bias", {w});
  const std::size_t m = cfg.mlp_width;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderLayerWeights lw;
    lw.ln1_gain = archive.Get(LayerKey(l, "ln1/gain"), {w});
    lw.ln1_bias = archive.Get(LayerKey(l, "ln1/bias"), {w});
    lw.wq = archive.Get(LayerKey(l, "wq"), {w, w});
    lw.bq = archive.Get(LayerKey(l, "bq"), {w});
    lw.wk = archive.Get(LayerKey(l, "wk"), {w, w});
    lw.bk = archive.Get(LayerKey(l, "bk"), {w});
    lw.wv = archive.Get(LayerKey(l, "wv"), {w, w});
    lw.bv = archive.Get(LayerKey(l, "bv"), {w});
    lw.wo = archive.Get(LayerKey(l, "wo"), {w, w});
    lw.bo = archive.Get(LayerKey(l, "bo"), {w});
    lw.ln2_gain = archive.Get(LayerKey(l, "ln2/gain"), {w});
    lw.ln2_bias = archive.Get(LayerKey(l, "ln2/bias"), {w});
    lw.fc1_weight = archive.Get(LayerKey(l, "mlp/fc1/weight"), {m, w});
    lw.fc1_bias = archive.Get(LayerKey(l, "mlp/fc1/bias"), {m});
    lw.fc2_weight = archive.Get(LayerKey(l, "mlp/fc2/weight"), {w, m});
    lw.fc2_bias = archive.Get(LayerKey(l, "mlp/fc2/bias"), {w});
    wt.layers.push_back(std::move(lw));
  }
  const TensorF& mean = archive.Get("preprocess/mean", {3});
  const TensorF& std = archive.Get("preprocess/std", {3});
  for (std::size_t c = 0; c < 3; ++c) {
    wt.mean[c] = mean[c];
    wt.std[c] = std[c];
  }
  return VitEncoder(cfg, std::move(wt));
}

VitEncoder VitEncoder::Load(const std::filesystem::path& path,
                            std::optional<EncoderConfig> config) {
  return FromArchive(TensorArchive::Load(path), config);
}

TensorArchive VitEncoder::ToArchive() const {
  const std::size_t w = config_.width();
  const std::size_t ps = config_.patch_size;
  TensorArchive a;
  a.metadata()["heads"] = std::to_string(config_.heads);
  a.metadata()["activation"] =
      config_.activation == MlpActivation::kQuickGelu ? "quick_gelu" : "gelu";
  a.Put("patch_embed/weight", weights_.patch_weight.Reshaped({w, 3, ps, ps}));
  a.Put("patch_embed/bias", weights_.patch_bias);
  a.Put("class_token", weights_.class_token);
  a.Put("pos_embed", weights_.pos_embed);
  if (weights_.ln_pre) {
    a.Put("ln_pre/gain", weights_.ln_pre->first);
    a.Put("ln_pre/bias", weights_.ln_pre->second);
  }
  a.Put("ln_post/gain", weights_.ln_post_gain);
  a.Put("ln_post/bias", weights_.ln_post_bias);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const EncoderLayerWeights& lw = weights_.layers[l];
    a.Put(LayerKey(l, "ln1/gain"), lw.ln1_gain);
    a.Put(LayerKey(l, "ln1/bias"), lw.ln1_bias);
    a.Put(LayerKey(l, "wq"), lw.wq);
    a.Put(LayerKey(l, "bq"), lw.bq);
    a.Put(LayerKey(l, "wk"), lw.wk);
    a.Put(LayerKey(l, "bk"), lw.bk);
    a.Put(LayerKey(l, "wv"), lw.wv);
    a.Put(LayerKey(l, "bv"), lw.bv);
    a.Put(LayerKey(l, "wo"), lw.wo);
    a.Put(LayerKey(l, "bo"), lw.bo);
    a.Put(LayerKey(l, "ln2/gain"), lw.ln2_gain);
    a.Put(LayerKey(l, "ln2/bias"), lw.ln2_bias);
    a.Put(LayerKey(l, "mlp/fc1/weight"), lw.fc1_weight);
    a.Put(LayerKey(l, "mlp/fc1/bias"), lw.fc1_bias);
    a.Put(LayerKey(l, "mlp/fc2/weight"), lw.fc2_weight);
    a.Put(LayerKey(l, "mlp/fc2/bias"), lw.fc2_bias);
  }
  a.Put("preprocess/mean", TensorF({3}, {weights_.mean[0], weights_.mean[1], weights_.mean[2]}));
  a.Put("preprocess/std", TensorF({3}, {weights_.std[0], weights_.std[1], weights_.std[2]}));
  return a;
}

VitEncoder VitEncoder::Synthesize(const EncoderConfig& config, std::uint64_t seed) {
  config.Validate();
  Rng rng(seed);
  const std::size_t w = config.width();
  const std::size_t m = config.mlp_width;
  const std::size_t ps = config.patch_size;
  const double in_scale = 1.0 / std::sqrt(double(w));
  EncoderWeights wt;
  wt.patch_weight = RandomNormal({w, 3 * ps * ps}, 1.0 / std::sqrt(3.0 * ps * ps), rng);
  wt.patch_bias = RandomNormal({w}, 0.02, rng);
  wt.class_token = RandomNormal({w}, 0.5, rng);
  wt.pos_embed = RandomNormal({config.tokens(), w}, 0.5, rng);
  wt.ln_pre = std::make_pair(TensorF::Full({w}, 1.f), TensorF(Shape{w}));
  wt.ln_post_gain = TensorF::Full({w}, 1.f);
  wt.ln_post_bias = TensorF(Shape{w});
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayerWeights lw;
    lw.ln1_gain = TensorF::Full({w}, 1.f);
    lw.ln1_bias = TensorF(Shape{w});
    lw.wq = RandomNormal({w, w}, in_scale, rng);
    lw.bq = RandomNormal({w}, 0.02, rng);
    lw.wk = RandomNormal({w, w}, in_scale, rng);
    lw.bk = RandomNormal({w}, 0.02, rng);
    lw.wv = RandomNormal({w, w}, in_scale, rng);
    lw.bv = RandomNormal({w}, 0.02, rng);
    lw.wo = RandomNormal({w, w}, in_scale, rng);
    lw.bo = RandomNormal({w}, 0.02, rng);
    lw.ln2_gain = TensorF::Full({w}, 1.f);
    lw.ln2_bias = TensorF(Shape{w});
    lw.fc1_weight = RandomNormal({m, w}, in_scale, rng);
    lw.fc1_bias = RandomNormal({m}, 0.02, rng);
    lw.fc2_weight = RandomNormal({w, m}, 1.0 / std::sqrt(double(m)), rng);
    lw.fc2_bias = RandomNormal({w}, 0.02, rng);
    wt.layers.push_back(std::move(lw));
  }
  wt.mean = {0.5f, 0.5f, 0.5f};
  wt.std = {0.25f, 0.25f, 0.25f};
  return VitEncoder(config, std::move(wt));
}

std::size_t VitEncoder::ParameterCount() const {
  std::size_t n = weights_.patch_weight.size() + weights_.patch_bias.size() +
                  weights_.class_token.size() + weights_.pos_embed.size() +
                  weights_.ln_post_gain.size() + weights_.ln_post_bias.size();
  if (weights_.ln_pre) n += weights_.ln_pre->first.size() + weights_.ln_pre->second.size();
  for (const auto& lw : weights_.layers) {
    for (const TensorF* t :
         {&lw.ln1_gain, &lw.ln1_bias, &lw.wq, &lw.bq, &lw.wk, &lw.bk, &lw.wv, &lw.bv,
          &lw.wo, &lw.bo, &lw.ln2_gain, &lw.ln2_bias, &lw.fc1_weight, &lw.fc1_bias,
          &lw.fc2_weight, &lw.fc2_bias}) {
      n += t->size();
    }
  }
  return n;
}

TensorF VitEncoder::Normalize(std::span<const Frame> frames) const {
  const std::size_t s = config_.image_size;
  TensorF out({frames.size(), 3, s, s});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const Frame& f = frames[t];
    if (f.height != s || f.width != s) {
      throw DimensionError(fmt::format("frame {} is {}x{}, encoder expects {}x{}", t,
                                       f.width, f.height, s, s));
    }
    for (std::size_t c = 0; c < 3; ++c) {
      const float mean = weights_.mean[c];
      const float inv_std = 1.f / weights_.std[c];
      float* plane = out.data().data() + (t * 3 + c) * s * s;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          plane[y * s + x] = (f.at(y, x, c) / 255.f - mean) * inv_std;
    }
  }
  return out;
}

std::vector<LayerAttributes> VitEncoder::EncodeClip(const TensorF& frames) const {
  const std::size_t s = config_.image_size;
  if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != s || frames.dim(3) != s) {
    throw DimensionError(fmt::format("encode: frames {} do not match [T, 3, {}, {}]",
                                     ShapeString(frames.shape()), s, s));
  }
  const std::size_t t_count = frames.dim(0);
  const std::size_t p = config_.patches();
  const std::size_t h = config_.heads;
  const std::size_t d = config_.head_dim;
  std::vector<LayerAttributes> out(config_.layers);
  for (auto& la : out) {
    la.query = TensorF({t_count, p, h, d});
    la.key = TensorF({t_count, p, h, d});
    la.value = TensorF({t_count, p, h, d});
    la.patches = TensorF({t_count, p, h * d});
  }
  for (std::size_t t = 0; t < t_count; ++t) {
    EncodeFrame(frames.data().data() + t * 3 * s * s, t, t_count, out);
  }
  return out;
}

void VitEncoder::EncodeFrame(const float* image, std::size_t t, std::size_t,
                             std::vector<LayerAttributes>& out) const {
  const std::size_t w = config_.width();
  const std::size_t ps = config_.patch_size;
  const std::size_t grid = config_.grid();
  const std::size_t s = config_.image_size;
  const std::size_t n = config_.tokens();
  const std::size_t p = config_.patches();
  const std::size_t heads = config_.heads;
  const std::size_t hd = config_.head_dim;
  const std::size_t m = config_.mlp_width;

  // Patch extraction in (c, y, x) order to match the flattened conv kernel.
  std::vector<float> patch_vecs(p * 3 * ps * ps);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      float* dst = patch_vecs.data() + (gy * grid + gx) * 3 * ps * ps;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t ky = 0; ky < ps; ++ky)
          for (std::size_t kx = 0; kx < ps; ++kx)
            *dst++ = image[(c * s + gy * ps + ky) * s + gx * ps + kx];
    }

  std::vector<float> x(n * w);
  LinearRows(patch_vecs.data(), p, 3 * ps * ps, weights_.patch_weight,
             weights_.patch_bias, x.data() + w);
  for (std::size_t j = 0; j < w; ++j) x[j] = weights_.class_token[j];
  for (std::size_t i = 0; i < n * w; ++i) x[i] += weights_.pos_embed[i];
  if (weights_.ln_pre) {
    std::vector<float> tmp(x);
    LayerNormRows(tmp.data(), n, w, weights_.ln_pre->first, weights_.ln_pre->second,
                  x.data());
  }

  std::vector<float> xhat(n * w), q(n * w), k(n * w), v(n * w), z(n * w), proj(n * w);
  std::vector<float> hidden(n * m);
  std::vector<float> scores(n);
  const float scale = 1.f / std::sqrt(static_cast<float>(hd));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const EncoderLayerWeights& lw = weights_.layers[l];
    LayerNormRows(x.data(), n, w, lw.ln1_gain, lw.ln1_bias, xhat.data());
    LinearRows(xhat.data(), n, w, lw.wq, lw.bq, q.data());
    LinearRows(xhat.data(), n, w, lw.wk, lw.bk, k.data());
    LinearRows(xhat.data(), n, w, lw.wv, lw.bv, v.data());

    LayerAttributes& taps = out[l];
    // Patch rows 1..P; the [P, H, D] layout is the [P, H*D] row layout.
    std::copy_n(q.data() + w, p * w, taps.query.data().data() + t * p * w);
    std::copy_n(k.data() + w, p * w, taps.key.data().data() + t * p * w);
    std::copy_n(v.data() + w, p * w, taps.value.data().data() + t * p * w);

    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const float* qi = q.data() + i * w + h * hd;
        float mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const float* kj = k.data() + j * w + h * hd;
          float acc = 0.f;
          for (std::size_t e = 0; e < hd; ++e) acc += qi[e] * kj[e];
          scores[j] = acc * scale;
          mx = std::max(mx, scores[j]);
        }
        float denom = 0.f;
        for (std::size_t j = 0; j < n; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        float* zi = z.data() + i * w + h * hd;
        std::fill_n(zi, hd, 0.f);
        for (std::size_t j = 0; j < n; ++j) {
          const float a = scores[j] / denom;
          const float* vj = v.data() + j * w + h * hd;
          for (std::size_t e = 0; e < hd; ++e) zi[e] += a * vj[e];
        }
      }
    }
    LinearRows(z.data(), n, w, lw.wo, lw.bo, proj.data());
    for (std::size_t i = 0; i < n * w; ++i) x[i] += proj[i];

    LayerNormRows(x.data(), n, w, lw.ln2_gain, lw.ln2_bias, xhat.data());
    LinearRows(xhat.data(), n, w, lw.fc1_weight, lw.fc1_bias, hidden.data());
    for (float& hv : hidden) hv = Activate(hv, config_.activation);
    LinearRows(hidden.data(), n, m, lw.fc2_weight, lw.fc2_bias, proj.data());
    for (std::size_t i = 0; i < n * w; ++i) x[i] += proj[i];

    std::copy_n(x.data() + w, p * w, taps.patches.data().data() + t * p * w);
  }
}

std::size_t ImagePatchIndex(double x, double y, const EncoderConfig& config) {
  const double s = static_cast<double>(config.image_size);
  if (!(x >= 0.0 && y >= 0.0 && x < s && y < s)) {
    throw DataError(fmt::format("pixel ({}, {}) outside the {}x{} image", x, y,
                                config.image_size, config.image_size));
  }
  const auto px = static_cast<std::size_t>(std::floor(x)) / config.patch_size;
  const auto py = static_cast<std::size_t>(std::floor(y)) / config.patch_size;
  return py * config.grid() + px;
}

TensorArchive RecordGoldenTaps(const VitEncoder& encoder, const TensorF& frames) {
  TensorArchive golden;
  golden.Put("input/frames", frames);
  const auto taps = encoder.EncodeClip(frames);
  for (std::size_t l = 0; l < taps.size(); ++l) {
    golden.Put(LayerKey(l, "q"), taps[l].query);
    golden.Put(LayerKey(l, "k"), taps[l].key);
    golden.Put(LayerKey(l, "v"), taps[l].value);
    golden.Put(LayerKey(l, "emb"), taps[l].patches);
  }
  return golden;
}

std::vector<double> ReplayGoldenTaps(const VitEncoder& encoder,
                                     const TensorArchive& golden) {
  const auto taps = encoder.EncodeClip(golden.Get("input/frames"));
  std::vector<double> deviation;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    double worst = 0.0;
    const std::pair<const char*, const TensorF*> pairs[] = {
        {"q", &taps[l].query},
        {"k", &taps[l].key},
        {"v", &taps[l].value},
        {"emb", &taps[l].patches}};
    for (const auto& [leaf, mine] : pairs) {
      const TensorF& ref = golden.Get(LayerKey(l, leaf), mine->shape());
      for (std::size_t i = 0; i < ref.size(); ++i) {
        worst = std::max(worst, std::abs(double(ref[i]) - double((*mine)[i])));
      }
    }
    deviation.push_back(worst);
  }
  return deviation;
}

}  // namespace sidenet
