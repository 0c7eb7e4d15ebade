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

#pragma once

#include <cstddef>
#include <vector>

#include "sidenet/image.h"
#include "sidenet/rng.h"

namespace sidenet {

// Half-open frame range [begin, end).
struct FrameWindow {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  bool operator==(const FrameWindow&) const = default;
};

// T uniformly spaced indices in `window`: begin + floor(i * length / T).
std::vector<std::size_t> WindowIndices(const FrameWindow& window, std::size_t frames);

// Up to `count` pairwise disjoint windows of 2-4 s (length drawn per window,
// clamped to [frames, video_frames]). Videos shorter than 2 s contribute one
// window covering the whole video. Fewer windows are returned when the
// video has no room left. Throws DataError when video_frames < frames.
std::vector<FrameWindow> DrawWindows(std::size_t video_frames, double fps, std::size_t frames,
                                     std::size_t count, Rng& rng);

// Deterministic evaluation windows: consecutive, non-overlapping, each
// max(frames, min(video_frames, round(2 s * fps))) long, at most `count`.
std::vector<FrameWindow> EvalWindows(std::size_t video_frames, double fps, std::size_t frames,
                                     std::size_t count);

Clip GatherFrames(const Clip& video, const std::vector<std::size_t>& indices);

// Per-clip augmentation gates. A gate with probability 0 never fires.
struct AugmentOptions {
  double flip_p = 0.5;
  double crop_p = 0.5;
  double crop_min_scale = 0.8;
  double jitter_p = 0.5;
  double jitter = 0.2;  // brightness and contrast, +-
  double jpeg_p = 0.2;
  int jpeg_min_quality = 60;
  int jpeg_max_quality = 95;
  double blur_p = 0.2;
  double blur_max_sigma = 1.0;
  double rescale_p = 0.2;
  double rescale_min = 0.5;

  static AugmentOptions Disabled();
};

// One draw of every gate, shared by all frames of a clip.
struct AugmentParams {
  bool flip = false;
  bool crop = false;
  double crop_scale = 1.0;
  double crop_y = 0.0;  // offsets as fractions of the free margin
  double crop_x = 0.0;
  bool jitter = false;
  double brightness = 0.0;  // added, on the 0..255 scale as a fraction of 255
  double contrast = 1.0;
  bool jpeg = false;
  int jpeg_quality = 100;
  bool blur = false;
  double blur_sigma = 0.0;
  bool rescale = false;
  double rescale_factor = 1.0;
};

AugmentParams DrawAugmentation(Rng& rng, const AugmentOptions& options);

// Applies `params` to every frame. Output frames keep the input size.
Clip ApplyAugmentation(const Clip& clip, const AugmentParams& params);

inline Clip Augment(const Clip& clip, Rng& rng, const AugmentOptions& options) {
  return ApplyAugmentation(clip, DrawAugmentation(rng, options));
}

}  // namespace sidenet
