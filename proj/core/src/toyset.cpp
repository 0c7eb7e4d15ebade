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

#include "sidenet/toyset.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Landmark layout in unit face-box coordinates.
LandmarkFrame Template() {
  LandmarkFrame p{};
  for (std::size_t i = 0; i <= 16; ++i) {  // jaw
    const double a = std::numbers::pi * static_cast<double>(i) / 16.0;
    p[i] = {0.5 - 0.5 * std::cos(a), 0.35 + 0.6 * std::sin(a)};
  }
  for (std::size_t i = 0; i < 5; ++i) {  // brows
    p[17 + i] = {0.15 + 0.075 * static_cast<double>(i), 0.22};
    p[22 + i] = {0.55 + 0.075 * static_cast<double>(i), 0.22};
  }
  for (std::size_t i = 0; i < 4; ++i) p[27 + i] = {0.5, 0.35 + 0.08 * static_cast<double>(i)};
  for (std::size_t i = 0; i < 5; ++i) p[31 + i] = {0.4 + 0.05 * static_cast<double>(i), 0.65};
  for (std::size_t i = 0; i < 6; ++i) {  // eyes
    const double a = kTwoPi * static_cast<double>(i) / 6.0;
    p[36 + i] = {0.3 + 0.09 * std::cos(a), 0.38 + 0.04 * std::sin(a)};
    p[42 + i] = {0.7 + 0.09 * std::cos(a), 0.38 + 0.04 * std::sin(a)};
  }
  for (std::size_t i = 0; i < 12; ++i) {  // outer lips
    const double a = kTwoPi * static_cast<double>(i) / 12.0;
    p[48 + i] = {0.5 + 0.18 * std::cos(a), 0.8 + 0.07 * std::sin(a)};
  }
  for (std::size_t i = 0; i < 8; ++i) {  // inner lips
    const double a = kTwoPi * static_cast<double>(i) / 8.0;
    p[60 + i] = {0.5 + 0.1 * std::cos(a), 0.8 + 0.03 * std::sin(a)};
  }
  return p;
}

struct Wave {
  double kx, ky;  // cycles per pixel
  double amplitude;
  std::array<double, 3> phase;
};

Wave DrawWave(Rng& rng, double min_period, double max_period, double lo, double hi) {
  const double angle = rng.Uniform(0.0, kTwoPi);
  const double k = 1.0 / rng.Uniform(min_period, max_period);
  Wave w{k * std::cos(angle), k * std::sin(angle), rng.Uniform(lo, hi), {}};
  for (double& ph : w.phase) ph = rng.Uniform(0.0, kTwoPi);
  return w;
}

// Smoothly translating two-wave texture; `speed` in pixels per frame.
Clip RealProcess(Rng& rng, std::size_t frames, std::size_t size, double min_speed,
                 double max_speed) {
  const Wave a = DrawWave(rng, 10.0, 32.0, 30.0, 50.0);
  const Wave b = DrawWave(rng, 8.0, 20.0, 15.0, 30.0);
  const double heading = rng.Uniform(0.0, kTwoPi);
  const double speed = rng.Uniform(min_speed, max_speed);
  const double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
  Clip clip;
  for (std::size_t t = 0; t < frames; ++t) {
    Frame f(size, size);
    const double dx = vx * static_cast<double>(t), dy = vy * static_cast<double>(t);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x) - dx, py = static_cast<double>(y) - dy;
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = 128.0 +
                           a.amplitude * std::sin(kTwoPi * (a.kx * px + a.ky * py) + a.phase[c]) +
                           b.amplitude * std::sin(kTwoPi * (b.kx * px + b.ky * py) + b.phase[c]);
          f.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
    clip.push_back(std::move(f));
  }
  return clip;
}

void AddFlicker(Clip& clip, Rng& rng) {
  const double amplitude = rng.Uniform(30.0, 45.0);
  for (Frame& f : clip) {
    const std::size_t lo = f.height / 4, hi = f.height - f.height / 4;
    for (std::size_t y = lo; y < hi; ++y)
      for (std::size_t x = lo; x < hi; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = f.at(y, x, c) + amplitude * rng.Uniform(-1.0, 1.0);
          f.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
}

void Shuffle(Clip& clip, Rng& rng) {
  std::vector<std::size_t> order(clip.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // A shuffle that leaves the clip in order would be a real video.
  while (std::is_sorted(order.begin(), order.end())) rng.Shuffle(order);
  Clip out;
  for (std::size_t i : order) out.push_back(clip[i]);
  clip = std::move(out);
}

LandmarkFrame FaceLandmarks(Rng& rng, std::size_t size) {
  const double s = static_cast<double>(size);
  const double side = s * rng.Uniform(0.56, 0.69);
  const double cx = s / 2 + rng.Uniform(-0.05, 0.05) * s;
  const double cy = s / 2 + rng.Uniform(-0.05, 0.05) * s;
  LandmarkFrame p = Template();
  for (Point& q : p) {
    q.x = std::clamp(cx + (q.x - 0.5) * side, 0.0, s - 1.0);
    q.y = std::clamp(cy + (q.y - 0.5) * side, 0.0, s - 1.0);
  }
  return p;
}

std::vector<Video> MakeSplit(const ToysetOptions& o, const char* name, std::size_t count,
                             std::uint64_t stream) {
  std::vector<Video> out;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(DeriveSeed(DeriveSeed(o.seed, stream), i));
    Video v;
    v.id = fmt::format("{}_{:03}", name, i);
    v.label = static_cast<int>(i % 2);
    v.fps = o.fps;
    if (o.kind == ToysetKind::kSeparable) {
      v.frames = RealProcess(rng, o.frames, o.size, 0.5, 1.5);
      if (v.label == 1) {
        AddFlicker(v.frames, rng);
        v.manipulation_tag = "flicker";
      }
    } else {
      v.frames = RealProcess(rng, o.frames, o.size, 1.5, 3.0);
      if (v.label == 1) {
        Shuffle(v.frames, rng);
        v.manipulation_tag = "shuffle";
      }
    }
    v.landmarks.assign(o.frames, FaceLandmarks(rng, o.size));
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

const char* ToysetKindName(ToysetKind kind) {
  return kind == ToysetKind::kSeparable ? "separable" : "temporal_only";
}

ToysetKind ParseToysetKind(const std::string& name) {
  if (name == "separable") return ToysetKind::kSeparable;
  if (name == "temporal_only") return ToysetKind::kTemporalOnly;
  throw ConfigError(fmt::format("unknown toyset '{}' (separable, temporal_only)", name));
}

ToysetOptions ToysetOptions::TemporalOnly() {
  ToysetOptions o;
  o.kind = ToysetKind::kTemporalOnly;
  o.train = 64;
  o.val = 64;
  o.frames = 10;
  return o;
}

Toyset GenerateToyset(const ToysetOptions& o) {
  if (o.size < 8 || o.frames < 2) throw ConfigError("toyset frames must be at least 8 px and 2 long");
  return {MakeSplit(o, "train", o.train, 1), MakeSplit(o, "val", o.val, 2),
          MakeSplit(o, "test", o.test, 3)};
}

std::filesystem::path WriteToyset(const std::filesystem::path& dir, const Toyset& toyset) {
  std::filesystem::create_directories(dir / "clips");
  std::filesystem::create_directories(dir / "landmarks");
  std::vector<ManifestRecord> records;
  auto emit = [&](const std::vector<Video>& videos, Split split) {
    for (const Video& v : videos) {
      ManifestRecord r;
      r.clip_path = dir / "clips" / (v.id + ".clip");
      r.label = v.label;
      r.video_id = v.id;
      r.split = split;
      r.manipulation_tag = v.manipulation_tag;
      WritePackedClip(r.clip_path, v.frames);
      if (!v.landmarks.empty()) {
        r.landmark_path = dir / "landmarks" / (v.id + ".txt");
        SaveLandmarks(*r.landmark_path, v.landmarks);
      }
      records.push_back(std::move(r));
    }
  };
  emit(toyset.train, Split::kTrain);
  emit(toyset.val, Split::kVal);
  emit(toyset.test, Split::kTest);
  const auto manifest = dir / "manifest.tsv";
  SaveManifest(manifest, records);
  return manifest;
}

}  // namespace sidenet
