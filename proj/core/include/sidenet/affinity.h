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

#include <filesystem>
#include <span>
#include <vector>

#include "sidenet/detector.h"
#include "sidenet/image.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {

// Spatial-query attention over patches, [N, T, grid, grid], averaged over
// layers, heads and clips. Every clip must have config.frames frames.
// Throws ConfigError when the detector has no spatial module.
TensorF AverageAffinity(const DetectorConfig& config, const ParamSet& params,
                        const VitEncoder& encoder, std::span<const Clip> clips);

// One binary PGM per query and frame, "query{i}_frame{t:02}.pgm", each pixel
// a grid cell blown up `upscale` times. Each query is scaled by its largest
// value across frames. Returns the paths in (query, frame) order.
std::vector<std::filesystem::path> WriteAffinityMaps(const TensorF& maps,
                                                     const std::filesystem::path& out_dir,
                                                     std::size_t upscale = 8);

}  // namespace sidenet
