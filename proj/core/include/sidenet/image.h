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
#include <cstdint>
#include <vector>

namespace sidenet {

// 8-bit RGB frame, interleaved (HWC), row-major.
struct Frame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  Frame() = default;
  Frame(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), rgb(h * w * 3, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }

  bool operator==(const Frame&) const = default;
};

using Clip = std::vector<Frame>;

// Planar float image, channel-major [3][H][W], values on the 0..255 scale.
struct PlanarImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  PlanarImage() = default;
  PlanarImage(std::size_t h, std::size_t w) : height(h), width(w), data(3 * h * w, 0.f) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  float* plane(std::size_t c) { return data.data() + c * height * width; }
  const float* plane(std::size_t c) const { return data.data() + c * height * width; }
};

PlanarImage ToPlanar(const Frame& frame);
// Rounds to nearest and clamps to 0..255.
Frame ToFrame(const PlanarImage& image);

// Bilinear resampling with pixel-center alignment.
PlanarImage Resize(const PlanarImage& image, std::size_t height, std::size_t width);
// Crop of [y0, y0+h) x [x0, x0+w); the region must lie inside the image.
PlanarImage Crop(const PlanarImage& image, std::size_t y0, std::size_t x0,
                 std::size_t h, std::size_t w);
PlanarImage FlipHorizontal(const PlanarImage& image);
PlanarImage FlipVertical(const PlanarImage& image);
// Separable Gaussian blur with radius ceil(3 sigma) and clamped borders.
PlanarImage GaussianBlur(const PlanarImage& image, double sigma);

// Peak signal-to-noise ratio in dB over all frames; +inf for identical clips.
double Psnr(const Clip& reference, const Clip& distorted);

}  // namespace sidenet
