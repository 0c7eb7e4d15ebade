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

#include "sidenet/image.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {

PlanarImage ToPlanar(const Frame& frame) {
  PlanarImage out(frame.height, frame.width);
  for (std::size_t y = 0; y < frame.height; ++y)
    for (std::size_t x = 0; x < frame.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = frame.at(y, x, c);
  return out;
}

Frame ToFrame(const PlanarImage& image) {
  Frame out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::nearbyint(image.at(c, y, x));
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.f, 255.f));
      }
  return out;
}

PlanarImage Resize(const PlanarImage& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || image.height == 0 || image.width == 0) {
    throw DimensionError("resize: empty image");
  }
  if (height == image.height && width == image.width) return image;
  PlanarImage out(height, width);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const float wy = static_cast<float>(fy - y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const float wx = static_cast<float>(fx - x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const float bottom = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

PlanarImage Crop(const PlanarImage& image, std::size_t y0, std::size_t x0,
                 std::size_t h, std::size_t w) {
  if (y0 + h > image.height || x0 + w > image.width) {
    throw DimensionError(fmt::format("crop {}x{}+{}+{} outside {}x{} image", w, h,
                                     x0, y0, image.width, image.height));
  }
  PlanarImage out(h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y0 + y, x0 + x);
  return out;
}

PlanarImage FlipHorizontal(const PlanarImage& image) {
  PlanarImage out(image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

PlanarImage FlipVertical(const PlanarImage& image) {
  PlanarImage out(image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x)
        out.at(c, y, x) = image.at(c, image.height - 1 - y, x);
  return out;
}

PlanarImage GaussianBlur(const PlanarImage& image, double sigma) {
  if (sigma <= 0) return image;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<float> taps(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    taps[i + radius] = static_cast<float>(w);
    total += w;
  }
  for (float& w : taps) w = static_cast<float>(w / total);

  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  PlanarImage tmp(image.height, image.width);
  PlanarImage out(image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i)
          acc += taps[i + radius] * image.at(c, y, std::clamp(x + i, 0, w - 1));
        tmp.at(c, y, x) = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float acc = 0.f;
        for (int i = -radius; i <= radius; ++i)
          acc += taps[i + radius] * tmp.at(c, std::clamp(y + i, 0, h - 1), x);
        out.at(c, y, x) = acc;
      }
  }
  return out;
}

double Psnr(const Clip& reference, const Clip& distorted) {
  if (reference.size() != distorted.size()) {
    throw DimensionError("psnr: clips differ in frame count");
  }
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < reference.size(); ++t) {
    const Frame& a = reference[t];
    const Frame& b = distorted[t];
    if (a.height != b.height || a.width != b.width) {
      throw DimensionError("psnr: frame extents differ");
    }
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
      const double d = double(a.rgb[i]) - double(b.rgb[i]);
      se += d * d;
    }
    n += a.rgb.size();
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(n);
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace sidenet
