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

#include "sidenet/spatial.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {
namespace {

constexpr std::array<std::size_t, 20> kLips = {48, 49, 50, 51, 52, 53, 54, 55, 56, 57,
                                               58, 59, 60, 61, 62, 63, 64, 65, 66, 67};
constexpr std::array<std::size_t, 27> kSkin = {0,  1,  2,  3,  4,  5,  6,  7,  8,
                                               9,  10, 11, 12, 13, 14, 15, 16, 17,
                                               18, 19, 20, 21, 22, 23, 24, 25, 26};
constexpr std::array<std::size_t, 12> kEyes = {36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47};
constexpr std::array<std::size_t, 9> kNose = {27, 28, 29, 30, 31, 32, 33, 34, 35};

std::string PhiKey(std::size_t l) { return fmt::format("fcg/phi/layer{}", l); }

}  // namespace

const char* FacialPartName(FacialPart part) {
  switch (part) {
    case FacialPart::kLips:
      return "lips";
    case FacialPart::kSkin:
      return "skin";
    case FacialPart::kEyes:
      return "eyes";
    case FacialPart::kNose:
      return "nose";
  }
  return "?";
}

std::span<const std::size_t> PartLandmarks(FacialPart part) {
  switch (part) {
    case FacialPart::kLips:
      return kLips;
    case FacialPart::kSkin:
      return kSkin;
    case FacialPart::kEyes:
      return kEyes;
    case FacialPart::kNose:
      return kNose;
  }
  return {};
}

std::string LandmarkGroupingDescription() {
  return "lips=48-67;skin=0-16,17-26;eyes=36-47;nose=27-35";
}

std::vector<LandmarkFrame> LoadLandmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open landmark file {}", path.string()));
  std::vector<LandmarkFrame> frames;
  LandmarkFrame current{};
  std::size_t filled = 0;
  std::string line;
  std::size_t line_no = 0;
  auto finish = [&] {
    if (filled == 0) return;
    if (filled != kLandmarkCount) {
      throw DataError(fmt::format("{}:{}: frame {} has {} landmarks, expected 68",
                                  path.string(), line_no, frames.size(), filled));
    }
    frames.push_back(current);
    filled = 0;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      finish();
      continue;
    }
    std::istringstream fields(line);
    Point p;
    std::string extra;
    if (!(fields >> p.x >> p.y) || (fields >> extra) || filled == kLandmarkCount) {
      throw DataError(fmt::format("{}:{}: malformed landmark line '{}'", path.string(),
                                  line_no, line));
    }
    current[filled++] = p;
  }
  finish();
  if (frames.empty()) throw DataError(fmt::format("{}: no landmarks", path.string()));
  return frames;
}

void SaveLandmarks(const std::filesystem::path& path, std::span<const LandmarkFrame> frames) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write landmark file {}", path.string()));
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (f) out << '\n';
    for (const Point& p : frames[f]) out << fmt::format("{} {}\n", p.x, p.y);
  }
}

template <typename T>
ad::Var<T> CrossAttention(ad::Var<T> queries, ad::Var<T> keys, ad::Var<T> values,
                          std::size_t heads, Tensor<T>* attention) {
  const Shape& sq = queries.shape();
  const Shape& sk = keys.shape();
  const Shape& sv = values.shape();
  if (sq.size() != 2 || sk.size() != 4 || sv.size() != 3 || sk[2] != heads ||
      sq[1] != heads * sk[3] || sv[0] != sk[0] || sv[1] != sk[1] || sv[2] != sq[1]) {
    throw DimensionError(fmt::format(
        "cross_attention: queries {}, keys {}, values {} with {} heads", ShapeString(sq),
        ShapeString(sk), ShapeString(sv), heads));
  }
  const std::size_t frames = sk[0], patches = sk[1], d = sk[3], n = sq[0];
  const std::size_t width = heads * d;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const T* q = queries.value().data().data();
  const T* k = keys.value().data().data();
  const T* v = values.value().data().data();

  // Softmax weights [T, H, N, P], kept for the backward pass.
  auto weights = std::make_shared<Tensor<T>>(Shape{frames, heads, n, patches});
  Tensor<T> out({frames, n, width});
  std::vector<T> row(patches);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = q + i * width + h * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t p = 0; p < patches; ++p) {
          const T* kp = k + ((t * patches + p) * heads + h) * d;
          T acc = 0;
          for (std::size_t e = 0; e < d; ++e) acc += qi[e] * kp[e];
          row[p] = acc * scale;
          mx = std::max(mx, row[p]);
        }
        T denom = 0;
        for (std::size_t p = 0; p < patches; ++p) {
          row[p] = std::exp(row[p] - mx);
          denom += row[p];
        }
        T* a = weights->data().data() + ((t * heads + h) * n + i) * patches;
        T* o = out.data().data() + (t * n + i) * width + h * d;
        for (std::size_t p = 0; p < patches; ++p) {
          a[p] = row[p] / denom;
          const T* vp = v + (t * patches + p) * width + h * d;
          for (std::size_t e = 0; e < d; ++e) o[e] += a[p] * vp[e];
        }
      }
    }
  }
  if (attention) *attention = *weights;

  return queries.graph->Record(
      "cross_attention", std::move(out), {queries, keys, values},
      [=](ad::Graph<T>& g, const Tensor<T>&, const Tensor<T>& gy) {
        const bool need_q = g.requires_grad(queries);
        const bool need_k = g.requires_grad(keys);
        const bool need_v = g.requires_grad(values);
        T* gq = need_q ? g.GradBuffer(queries).data().data() : nullptr;
        T* gk = need_k ? g.GradBuffer(keys).data().data() : nullptr;
        T* gv = need_v ? g.GradBuffer(values).data().data() : nullptr;
        const T* qv = g.value(queries).data().data();
        const T* kv = g.value(keys).data().data();
        const T* vv = g.value(values).data().data();
        std::vector<T> da(patches);
        for (std::size_t t = 0; t < frames; ++t) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
              const T* a = weights->data().data() + ((t * heads + h) * n + i) * patches;
              const T* go = gy.data().data() + (t * n + i) * width + h * d;
              T dot = 0;
              for (std::size_t p = 0; p < patches; ++p) {
                const T* vp = vv + (t * patches + p) * width + h * d;
                T acc = 0;
                for (std::size_t e = 0; e < d; ++e) acc += go[e] * vp[e];
                da[p] = acc;
                dot += a[p] * acc;
                if (gv) {
                  T* gvp = gv + (t * patches + p) * width + h * d;
                  for (std::size_t e = 0; e < d; ++e) gvp[e] += a[p] * go[e];
                }
              }
              if (!gq && !gk) continue;
              const T* qi = qv + i * width + h * d;
              for (std::size_t p = 0; p < patches; ++p) {
                const T ds = a[p] * (da[p] - dot) * scale;
                const std::size_t kp = ((t * patches + p) * heads + h) * d;
                if (gq) {
                  T* gqi = gq + i * width + h * d;
                  for (std::size_t e = 0; e < d; ++e) gqi[e] += ds * kv[kp + e];
                }
                if (gk) {
                  for (std::size_t e = 0; e < d; ++e) gk[kp + e] += ds * qi[e];
                }
              }
            }
          }
        }
      });
}

template <typename T>
ad::Var<T> CrossAttentionReference(ad::Var<T> queries, ad::Var<T> keys, ad::Var<T> values,
                                   std::size_t heads) {
  const std::size_t n = queries.shape().at(0);
  const std::size_t frames = keys.shape().at(0), patches = keys.shape().at(1);
  const std::size_t d = keys.shape().at(3);
  auto q = ad::Permute(ad::Reshape(queries, {1, n, heads, d}), {0, 2, 1, 3});  // [1,H,N,D]
  auto k = ad::Permute(keys, {0, 2, 1, 3});                                     // [T,H,P,D]
  auto v = ad::Permute(ad::Reshape(values, {frames, patches, heads, d}), {0, 2, 1, 3});
  auto z = ad::ScaledDotAttention(q, k, v);  // [T,H,N,D]
  return ad::Reshape(ad::Permute(z, {0, 2, 1, 3}), {frames, n, heads * d});
}

template <typename T>
SpatialResult<T> SpatialForward(ad::Graph<T>& g, ad::Var<T> queries,
                                const LayerAttributes& taps, Attribute gamma_s) {
  const std::size_t heads = taps.query.dim(2);
  auto keys = g.Input(taps.attribute(gamma_s));
  auto values = g.Input(taps.patches);
  auto m1 = CrossAttention(queries, keys, values, heads);
  return {m1, ad::Mean(m1, {0, 1})};
}

TensorF AffinityMaps(const TensorF& queries, const LayerAttributes& taps, Attribute gamma_s) {
  const std::size_t heads = taps.query.dim(2);
  const std::size_t frames = taps.query.dim(0), patches = taps.query.dim(1);
  const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(double(patches))));
  if (grid * grid != patches) {
    throw ConfigError(fmt::format("affinity maps need a square patch grid, got {}", patches));
  }
  ad::Graph<float> g;
  TensorF weights;
  CrossAttention(g.Borrow(queries), g.Borrow(taps.attribute(gamma_s)), g.Borrow(taps.patches),
                 heads, &weights);
  const std::size_t n = queries.dim(0);
  TensorF maps({n, frames, grid, grid});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t p = 0; p < patches; ++p) {
        double acc = 0.0;
        for (std::size_t h = 0; h < heads; ++h) acc += weights.at({t, h, i, p});
        maps[(i * frames + t) * patches + p] = static_cast<float>(acc / heads);
      }
  return maps;
}

template <typename T>
ad::Var<T> FcgLoss(std::span<const ad::Var<T>> queries, std::span<const ad::Var<T>> phi,
                   double tau, FcgSign sign) {
  if (queries.empty() || queries.size() != phi.size()) {
    throw DimensionError(fmt::format("fcg: {} query sets for {} phi sets", queries.size(),
                                     phi.size()));
  }
  if (!(tau > 0.0)) throw ConfigError(fmt::format("fcg: tau must be positive, got {}", tau));
  ad::Graph<T>& g = *queries[0].graph;
  std::optional<ad::Var<T>> total;
  std::size_t terms = 0;
  for (std::size_t l = 0; l < queries.size(); ++l) {
    const std::size_t n = queries[l].shape().at(0);
    if (n < 1 || n > kFacialPartCount || phi[l].shape().at(0) != kFacialPartCount ||
        queries[l].shape().at(1) != phi[l].shape().at(1)) {
      throw DimensionError(fmt::format("fcg layer {}: queries {} against phi {}", l,
                                       ShapeString(queries[l].shape()),
                                       ShapeString(phi[l].shape())));
    }
    auto qn = ad::L2Normalize(queries[l]);
    auto pn = ad::L2Normalize(n == kFacialPartCount ? phi[l] : ad::Slice(phi[l], 0, 0, n));
    auto logits = ad::Scale(ad::MatMul(qn, ad::Transpose(pn, 0, 1)), tau);
    auto log_probs = ad::LogSoftmax(logits, 1);
    Tensor<T> eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye.at({i, i}) = T{1};
    auto matched = ad::Sum(ad::Mul(log_probs, g.Constant(std::move(eye))));
    total = total ? ad::Add(*total, matched) : matched;
    terms += n;
  }
  const double factor = (sign == FcgSign::kNegativeLog ? -1.0 : 1.0) / static_cast<double>(terms);
  return ad::Scale(*total, factor);
}

void FacialPartAttributes::WriteTo(TensorArchive& archive) const {
  for (std::size_t l = 0; l < phi.size(); ++l) archive.Put(PhiKey(l), phi[l]);
  auto& meta = archive.metadata();
  meta["fcg/layers"] = std::to_string(phi.size());
  meta["fcg/gamma_s"] = AttributeName(gamma_s);
  meta["fcg/rounds"] = std::to_string(rounds);
  meta["fcg/augment"] = augment ? "true" : "false";
  meta["fcg/seed"] = std::to_string(seed);
  meta["fcg/frames"] = std::to_string(frames);
  meta["fcg/parts"] = "lips,skin,eyes,nose";
  meta["fcg/grouping"] = LandmarkGroupingDescription();
}

FacialPartAttributes FacialPartAttributes::ReadFrom(const TensorArchive& archive) {
  FacialPartAttributes out;
  const std::size_t layers = std::stoul(archive.Meta("fcg/layers"));
  for (std::size_t l = 0; l < layers; ++l) {
    const TensorF& t = archive.Get(PhiKey(l));
    if (t.rank() != 2 || t.dim(0) != kFacialPartCount) {
      throw DataError(fmt::format("{} has shape {}, expected [4, width]", PhiKey(l),
                                  ShapeString(t.shape())));
    }
    out.phi.push_back(t);
  }
  out.gamma_s = ParseAttribute(archive.Meta("fcg/gamma_s"));
  out.rounds = std::stoul(archive.Meta("fcg/rounds"));
  out.augment = archive.Meta("fcg/augment") == "true";
  out.seed = std::stoull(archive.Meta("fcg/seed"));
  out.frames = std::stoul(archive.Meta("fcg/frames"));
  return out;
}

MiningAugmentation DrawMiningAugmentation(Rng& rng, std::size_t height, std::size_t width) {
  MiningAugmentation aug;
  const std::size_t side = std::min(height, width);
  const double scale = rng.Uniform(0.8, 1.0);
  aug.crop_size = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(scale * static_cast<double>(side))), 1, side);
  aug.crop_y = static_cast<std::size_t>(rng.Below(height - aug.crop_size + 1));
  aug.crop_x = static_cast<std::size_t>(rng.Below(width - aug.crop_size + 1));
  aug.flip_horizontal = rng.Bernoulli(0.5);
  aug.flip_vertical = rng.Bernoulli(0.5);
  return aug;
}

MiningSample ApplyMiningAugmentation(const MiningSample& sample, const MiningAugmentation& aug,
                                     std::size_t size) {
  PlanarImage img = Crop(ToPlanar(sample.frame), aug.crop_y, aug.crop_x, aug.crop_size,
                         aug.crop_size);
  img = Resize(img, size, size);
  if (aug.flip_horizontal) img = FlipHorizontal(img);
  if (aug.flip_vertical) img = FlipVertical(img);
  MiningSample out;
  out.frame = ToFrame(img);
  const double ratio = static_cast<double>(size) / static_cast<double>(aug.crop_size);
  const double limit = static_cast<double>(size);
  for (std::size_t i = 0; i < kLandmarkCount; ++i) {
    // Pixel-center convention, matching Resize.
    double x = (sample.landmarks[i].x - static_cast<double>(aug.crop_x) + 0.5) * ratio - 0.5;
    double y = (sample.landmarks[i].y - static_cast<double>(aug.crop_y) + 0.5) * ratio - 0.5;
    if (aug.flip_horizontal) x = limit - 1.0 - x;
    if (aug.flip_vertical) y = limit - 1.0 - y;
    if (!(x >= 0.0 && y >= 0.0 && x < limit && y < limit)) {
      x = y = std::numeric_limits<double>::quiet_NaN();
    }
    out.landmarks[i] = {x, y};
  }
  return out;
}

FacialPartAttributes MineFacialAttributes(const VitEncoder& encoder,
                                          std::span<const MiningSample> samples,
                                          const MiningOptions& options) {
  if (options.rounds == 0) throw ConfigError("mining needs at least one augmentation round");
  if (samples.empty()) throw DataError("mining set is empty");
  const EncoderConfig& cfg = encoder.config();
  const std::size_t layers = cfg.layers, width = cfg.width(), s = cfg.image_size;

  std::vector<std::vector<double>> sums(layers * kFacialPartCount, std::vector<double>(width));
  std::vector<std::size_t> counts(kFacialPartCount, 0);
  const std::size_t rounds = options.augment ? options.rounds : 1;

  for (std::size_t f = 0; f < samples.size(); ++f) {
    Rng rng(DeriveSeed(options.seed, f));
    for (std::size_t r = 0; r < rounds; ++r) {
      MiningSample view;
      const MiningSample& src = samples[f];
      if (options.augment) {
        view = ApplyMiningAugmentation(
            src, DrawMiningAugmentation(rng, src.frame.height, src.frame.width), s);
      } else if (src.frame.height != s || src.frame.width != s) {
        MiningAugmentation full;
        if (src.frame.height != src.frame.width) {
          throw DataError(fmt::format("mining frame {} is not square", f));
        }
        full.crop_size = src.frame.height;
        view = ApplyMiningAugmentation(src, full, s);
      } else {
        view = src;
      }
      const auto taps = encoder.EncodeClip(encoder.Normalize(std::span(&view.frame, 1)));
      for (std::size_t part = 0; part < kFacialPartCount; ++part) {
        std::set<std::size_t> hit;
        for (std::size_t idx : PartLandmarks(static_cast<FacialPart>(part))) {
          const Point& p = view.landmarks[idx];
          if (std::isnan(p.x) || std::isnan(p.y)) continue;
          if (p.x < 0 || p.y < 0 || p.x >= double(s) || p.y >= double(s)) continue;
          hit.insert(ImagePatchIndex(p.x, p.y, cfg));
        }
        counts[part] += hit.size();
        for (std::size_t l = 0; l < layers; ++l) {
          const TensorF& a = taps[l].attribute(options.gamma_s);
          auto& acc = sums[l * kFacialPartCount + part];
          for (std::size_t patch : hit) {
            const float* row = a.data().data() + patch * width;
            double norm = 0.0;
            for (std::size_t j = 0; j < width; ++j) norm += double(row[j]) * row[j];
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
              throw NumericalError(fmt::format("mining: zero attribute at layer {} patch {}", l,
                                               patch));
            }
            for (std::size_t j = 0; j < width; ++j) acc[j] += row[j] / norm;
          }
        }
      }
    }
  }

  FacialPartAttributes out;
  out.gamma_s = options.gamma_s;
  out.rounds = rounds;
  out.augment = options.augment;
  out.seed = options.seed;
  out.frames = samples.size();
  for (std::size_t part = 0; part < kFacialPartCount; ++part) {
    if (counts[part] == 0) {
      throw DataError(fmt::format("mining: no landmark of part '{}' landed inside the image "
                                  "in any round (layer 0)",
                                  FacialPartName(static_cast<FacialPart>(part))));
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    TensorF phi({kFacialPartCount, width});
    for (std::size_t part = 0; part < kFacialPartCount; ++part) {
      const auto& acc = sums[l * kFacialPartCount + part];
      double norm = 0.0;
      for (double v : acc) norm += v * v;
      norm = std::sqrt(norm);
      if (norm < 1e-12) {
        throw NumericalError(fmt::format("mining: mean attribute of part '{}' at layer {} "
                                         "cancels to zero",
                                         FacialPartName(static_cast<FacialPart>(part)), l));
      }
      for (std::size_t j = 0; j < width; ++j) {
        phi[part * width + j] = static_cast<float>(acc[j] / norm);
      }
    }
    out.phi.push_back(std::move(phi));
  }
  return out;
}

std::vector<TensorF> InitSpatialQueries(const FacialPartAttributes* phi, std::size_t layers,
                                        std::size_t count, std::size_t width, Rng& rng) {
  std::vector<TensorF> out;
  for (std::size_t l = 0; l < layers; ++l) {
    TensorF q({count, width});
    for (std::size_t i = 0; i < count; ++i) {
      float* row = q.data().data() + i * width;
      if (phi) {
        if (phi->phi.size() != layers || phi->phi[l].dim(1) != width || i >= kFacialPartCount) {
          throw DimensionError("query warm start: phi does not match the detector extents");
        }
        const float* src = phi->phi[l].data().data() + i * width;
        for (std::size_t j = 0; j < width; ++j) {
          row[j] = src[j] + static_cast<float>(rng.Normal(0.0, 0.02));
        }
      } else {
        double norm = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          row[j] = static_cast<float>(rng.Normal());
          norm += double(row[j]) * row[j];
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(norm));
        for (std::size_t j = 0; j < width; ++j) row[j] *= inv;
      }
    }
    out.push_back(std::move(q));
  }
  return out;
}

#define SIDENET_INSTANTIATE(T)                                                              \
  template ad::Var<T> CrossAttention(ad::Var<T>, ad::Var<T>, ad::Var<T>, std::size_t,      \
                                     Tensor<T>*);                                           \
  template ad::Var<T> CrossAttentionReference(ad::Var<T>, ad::Var<T>, ad::Var<T>,          \
                                              std::size_t);                                 \
  template SpatialResult<T> SpatialForward(ad::Graph<T>&, ad::Var<T>,                      \
                                           const LayerAttributes&, Attribute);              \
  template ad::Var<T> FcgLoss(std::span<const ad::Var<T>>, std::span<const ad::Var<T>>,    \
                              double, FcgSign);

SIDENET_INSTANTIATE(float)
SIDENET_INSTANTIATE(double)

#undef SIDENET_INSTANTIATE

}  // namespace sidenet
