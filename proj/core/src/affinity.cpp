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

#include "sidenet/affinity.h"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "sidenet/dataset.h"
#include "sidenet/error.h"
#include "sidenet/trainer.h"

namespace sidenet {

TensorF AverageAffinity(const DetectorConfig& config, const ParamSet& params,
                        const VitEncoder& encoder, std::span<const Clip> clips) {
  if (!config.spatial) throw ConfigError("affinity maps need the spatial module");
  if (clips.empty()) throw DataError("no clips to average affinity maps over");
  const std::size_t grid = encoder.config().grid();
  TensorF sum({config.queries, config.frames, grid, grid});
  for (const Clip& clip : clips) {
    if (clip.size() != config.frames) {
      throw DimensionError(
          fmt::format("affinity clip has {} frames, detector expects {}", clip.size(), config.frames));
    }
    const auto taps = EncodeVideo(encoder, clip);
    for (std::size_t l = 0; l < config.layers; ++l) {
      const TensorF maps = AffinityMaps(params.at(fmt::format("spatial/layer{}/queries", l)),
                                        taps[l], config.gamma_s);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += maps[i];
    }
  }
  const float scale = 1.0f / static_cast<float>(clips.size() * config.layers);
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] *= scale;
  return sum;
}

std::vector<std::filesystem::path> WriteAffinityMaps(const TensorF& maps,
                                                     const std::filesystem::path& out_dir,
                                                     std::size_t upscale) {
  if (maps.rank() != 4) throw DimensionError("affinity maps must be [N, T, grid, grid]");
  if (upscale == 0) throw ConfigError("upscale must be positive");
  std::filesystem::create_directories(out_dir);
  const std::size_t n = maps.dim(0), frames = maps.dim(1), gh = maps.dim(2), gw = maps.dim(3);
  const std::size_t h = gh * upscale, w = gw * upscale;
  std::vector<std::filesystem::path> written;
  for (std::size_t q = 0; q < n; ++q) {
    const float* begin = maps.data().data() + q * frames * gh * gw;
    const float peak = *std::max_element(begin, begin + frames * gh * gw);
    for (std::size_t t = 0; t < frames; ++t) {
      const float* map = begin + t * gh * gw;
      std::vector<std::uint8_t> pixels(h * w);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const float v = peak > 0.f ? map[(y / upscale) * gw + x / upscale] / peak : 0.f;
          pixels[y * w + x] = static_cast<std::uint8_t>(std::lround(255.f * std::clamp(v, 0.f, 1.f)));
        }
      written.push_back(out_dir / fmt::format("query{}_frame{:02}.pgm", q, t));
      WritePgm(written.back(), h, w, pixels);
    }
  }
  return written;
}

}  // namespace sidenet
