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

#include "sidenet/perturb.h"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sidenet/error.h"
#include "sidenet/jpeg.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

std::uint8_t Clamp8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

double Luma(const Frame& f, std::size_t px) {
  return 0.299 * f.rgb[3 * px] + 0.587 * f.rgb[3 * px + 1] + 0.114 * f.rgb[3 * px + 2];
}

Frame Saturation(const Frame& in, double s) {
  Frame out = in;
  for (std::size_t px = 0; px < in.height * in.width; ++px) {
    const double y = Luma(in, px);
    for (std::size_t c = 0; c < 3; ++c) out.rgb[3 * px + c] = Clamp8(y + s * (in.rgb[3 * px + c] - y));
  }
  return out;
}

Frame Contrast(const Frame& in, double k) {
  double mean = 0.0;
  for (std::size_t px = 0; px < in.height * in.width; ++px) mean += Luma(in, px);
  mean /= static_cast<double>(in.height * in.width);
  Frame out = in;
  for (std::size_t i = 0; i < in.rgb.size(); ++i) out.rgb[i] = Clamp8(mean + k * (in.rgb[i] - mean));
  return out;
}

Frame Blocks(const Frame& in, int count, Rng rng) {
  Frame out = in;
  const std::size_t side = OcclusionBlockSide(in.height, in.width);
  const std::size_t rows = in.height - side + 1, cols = in.width - side + 1;
  for (int b = 0; b < count; ++b) {
    const std::size_t y0 = rng.Below(rows), x0 = rng.Below(cols);
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x)
        for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = 0;
  }
  return out;
}

Frame Noise(const Frame& in, double sigma, Rng rng) {
  Frame out = in;
  for (std::size_t i = 0; i < in.rgb.size(); ++i) out.rgb[i] = Clamp8(in.rgb[i] + sigma * rng.Normal());
  return out;
}

Frame Compress(const Frame& in, double scale, int quality) {
  const auto h = std::max<std::size_t>(1, std::lround(scale * in.height));
  const auto w = std::max<std::size_t>(1, std::lround(scale * in.width));
  const Frame small = ToFrame(Resize(ToPlanar(in), h, w));
  const Frame coded = JpegRoundTrip(small, quality);
  return ToFrame(Resize(ToPlanar(coded), in.height, in.width));
}

}  // namespace

const char* PerturbKindName(PerturbKind kind) {
  switch (kind) {
    case PerturbKind::kSaturation: return "saturation";
    case PerturbKind::kContrast: return "contrast";
    case PerturbKind::kBlock: return "block";
    case PerturbKind::kNoise: return "noise";
    case PerturbKind::kBlur: return "blur";
    case PerturbKind::kJpeg: return "jpeg";
    case PerturbKind::kCompress: return "compress";
  }
  return "?";
}

PerturbKind ParsePerturbKind(std::string_view name) {
  for (PerturbKind k : kAllPerturbKinds) {
    if (name == PerturbKindName(k)) return k;
  }
  throw ConfigError(fmt::format(
      "unknown perturbation '{}' (saturation, contrast, block, noise, blur, jpeg, compress)", name));
}

std::size_t OcclusionBlockSide(std::size_t height, std::size_t width) {
  return std::max<std::size_t>(1, std::min(height, width) / 16);
}

Clip Perturb(const Clip& clip, const PerturbSpec& spec, std::uint64_t seed) {
  if (spec.severity < 0 || spec.severity > 5) {
    throw ConfigError(fmt::format("severity must be 0..5, got {}", spec.severity));
  }
  if (spec.severity == 0) return clip;
  const std::size_t s = static_cast<std::size_t>(spec.severity - 1);
  Clip out;
  out.reserve(clip.size());
  for (std::size_t t = 0; t < clip.size(); ++t) {
    const Frame& f = clip[t];
    const Rng rng(DeriveSeed(seed, t));
    switch (spec.kind) {
      case PerturbKind::kSaturation: out.push_back(Saturation(f, ladder::kSaturation[s])); break;
      case PerturbKind::kContrast: out.push_back(Contrast(f, ladder::kContrast[s])); break;
      case PerturbKind::kBlock: out.push_back(Blocks(f, ladder::kBlocks[s], rng)); break;
      case PerturbKind::kNoise: out.push_back(Noise(f, ladder::kNoiseSigma[s], rng)); break;
      case PerturbKind::kBlur:
        out.push_back(ToFrame(GaussianBlur(ToPlanar(f), ladder::kBlurSigma[s])));
        break;
      case PerturbKind::kJpeg: out.push_back(JpegRoundTrip(f, ladder::kJpegQuality[s])); break;
      case PerturbKind::kCompress:
        out.push_back(Compress(f, ladder::kCompressScale[s], ladder::kCompressQuality[s]));
        break;
    }
  }
  return out;
}

}  // namespace sidenet
