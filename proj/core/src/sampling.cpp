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

#include "sidenet/sampling.h"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sidenet/error.h"
#include "sidenet/jpeg.h"

namespace sidenet {

std::vector<std::size_t> WindowIndices(const FrameWindow& window, std::size_t frames) {
  if (window.length() < frames) {
    throw DataError(fmt::format("window of {} frames cannot supply {} samples", window.length(),
                                frames));
  }
  std::vector<std::size_t> idx(frames);
  for (std::size_t i = 0; i < frames; ++i) idx[i] = window.begin + i * window.length() / frames;
  return idx;
}

std::vector<FrameWindow> DrawWindows(std::size_t video_frames, double fps, std::size_t frames,
                                     std::size_t count, Rng& rng) {
  if (video_frames < frames) {
    throw DataError(fmt::format("video has {} frames, a clip needs {}", video_frames, frames));
  }
  const auto min_len = static_cast<std::size_t>(std::llround(2.0 * fps));
  if (video_frames <= min_len) return {FrameWindow{0, video_frames}};

  std::vector<FrameWindow> taken;
  for (std::size_t k = 0; k < count; ++k) {
    const double seconds = rng.Uniform(2.0, 4.0);
    const std::size_t len = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(seconds * fps)), frames, video_frames);
    // Free gaps between taken windows, in order.
    std::vector<FrameWindow> gaps;
    std::size_t cursor = 0;
    for (const auto& w : taken) {
      if (w.begin > cursor) gaps.push_back({cursor, w.begin});
      cursor = w.end;
    }
    if (cursor < video_frames) gaps.push_back({cursor, video_frames});
    std::size_t starts = 0;
    for (const auto& g : gaps) starts += g.length() >= len ? g.length() - len + 1 : 0;
    if (starts == 0) break;
    std::size_t pick = static_cast<std::size_t>(rng.Below(starts));
    for (const auto& g : gaps) {
      if (g.length() < len) continue;
      const std::size_t n = g.length() - len + 1;
      if (pick < n) {
        taken.push_back({g.begin + pick, g.begin + pick + len});
        break;
      }
      pick -= n;
    }
    std::sort(taken.begin(), taken.end(),
              [](const FrameWindow& a, const FrameWindow& b) { return a.begin < b.begin; });
  }
  return taken;
}

std::vector<FrameWindow> EvalWindows(std::size_t video_frames, double fps, std::size_t frames,
                                     std::size_t count) {
  if (video_frames < frames) {
    throw DataError(fmt::format("video has {} frames, a clip needs {}", video_frames, frames));
  }
  const std::size_t len = std::max(
      frames, std::min(video_frames, static_cast<std::size_t>(std::llround(2.0 * fps))));
  std::vector<FrameWindow> out;
  for (std::size_t b = 0; b + len <= video_frames && out.size() < count; b += len) {
    out.push_back({b, b + len});
  }
  return out;
}

Clip GatherFrames(const Clip& video, const std::vector<std::size_t>& indices) {
  Clip clip;
  clip.reserve(indices.size());
  for (std::size_t i : indices) clip.push_back(video.at(i));
  return clip;
}

AugmentOptions AugmentOptions::Disabled() {
  AugmentOptions o;
  o.flip_p = o.crop_p = o.jitter_p = o.jpeg_p = o.blur_p = o.rescale_p = 0.0;
  return o;
}

AugmentParams DrawAugmentation(Rng& rng, const AugmentOptions& o) {
  // Every field is drawn whether or not its gate fires, so the stream
  // position does not depend on earlier outcomes.
  AugmentParams p;
  p.flip = rng.Bernoulli(o.flip_p);
  p.crop = rng.Bernoulli(o.crop_p);
  p.crop_scale = rng.Uniform(o.crop_min_scale, 1.0);
  p.crop_y = rng.Uniform();
  p.crop_x = rng.Uniform();
  p.jitter = rng.Bernoulli(o.jitter_p);
  p.brightness = rng.Uniform(-o.jitter, o.jitter);
  p.contrast = 1.0 + rng.Uniform(-o.jitter, o.jitter);
  p.jpeg = rng.Bernoulli(o.jpeg_p);
  p.jpeg_quality = o.jpeg_min_quality +
                   static_cast<int>(rng.Below(o.jpeg_max_quality - o.jpeg_min_quality + 1));
  p.blur = rng.Bernoulli(o.blur_p);
  p.blur_sigma = rng.Uniform(0.1, std::max(0.1, o.blur_max_sigma));
  p.rescale = rng.Bernoulli(o.rescale_p);
  p.rescale_factor = rng.Uniform(o.rescale_min, 1.0);
  return p;
}

Clip ApplyAugmentation(const Clip& clip, const AugmentParams& p) {
  Clip out;
  out.reserve(clip.size());
  for (const Frame& frame : clip) {
    const std::size_t h = frame.height, w = frame.width;
    PlanarImage img = ToPlanar(frame);
    if (p.flip) img = FlipHorizontal(img);
    if (p.crop) {
      const auto ch = std::max<std::size_t>(1, std::llround(p.crop_scale * h));
      const auto cw = std::max<std::size_t>(1, std::llround(p.crop_scale * w));
      const auto y0 = static_cast<std::size_t>(p.crop_y * (h - ch + 1));
      const auto x0 = static_cast<std::size_t>(p.crop_x * (w - cw + 1));
      img = Resize(Crop(img, std::min(y0, h - ch), std::min(x0, w - cw), ch, cw), h, w);
    }
    if (p.jitter) {
      for (float& v : img.data) {
        v = static_cast<float>((v - 127.5) * p.contrast + 127.5 + 255.0 * p.brightness);
      }
    }
    if (p.blur) img = GaussianBlur(img, p.blur_sigma);
    if (p.rescale) {
      const auto sh = std::max<std::size_t>(1, std::llround(p.rescale_factor * h));
      const auto sw = std::max<std::size_t>(1, std::llround(p.rescale_factor * w));
      img = Resize(Resize(img, sh, sw), h, w);
    }
    Frame result = ToFrame(img);
    if (p.jpeg) result = JpegRoundTrip(result, p.jpeg_quality);
    out.push_back(std::move(result));
  }
  return out;
}

}  // namespace sidenet
