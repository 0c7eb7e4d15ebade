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

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "sidenet/image.h"

namespace sidenet {

enum class PerturbKind { kSaturation, kContrast, kBlock, kNoise, kBlur, kJpeg, kCompress };

inline constexpr std::array<PerturbKind, 7> kAllPerturbKinds = {
    PerturbKind::kSaturation, PerturbKind::kContrast, PerturbKind::kBlock, PerturbKind::kNoise,
    PerturbKind::kBlur,       PerturbKind::kJpeg,     PerturbKind::kCompress};

const char* PerturbKindName(PerturbKind kind);
// Throws ConfigError on an unknown name.
PerturbKind ParsePerturbKind(std::string_view name);

struct PerturbSpec {
  PerturbKind kind = PerturbKind::kNoise;
  int severity = 0;  // 0 = identity, 1..5 increasingly strong
};

// Severity ladders, index 0 = severity 1.
namespace ladder {
inline constexpr std::array<double, 5> kSaturation = {0.8, 0.6, 0.4, 0.2, 0.0};
inline constexpr std::array<double, 5> kContrast = {0.85, 0.7, 0.55, 0.4, 0.25};
inline constexpr std::array<int, 5> kBlocks = {16, 32, 48, 64, 80};
inline constexpr std::array<double, 5> kNoiseSigma = {4, 8, 16, 24, 32};
inline constexpr std::array<double, 5> kBlurSigma = {1, 2, 3, 4, 5};
inline constexpr std::array<int, 5> kJpegQuality = {90, 70, 50, 30, 10};
// Re-encode proxy: downscale factor, then JPEG at the paired quality.
inline constexpr std::array<double, 5> kCompressScale = {0.9, 0.75, 0.6, 0.5, 0.4};
inline constexpr std::array<int, 5> kCompressQuality = {60, 50, 40, 30, 20};
}  // namespace ladder

// Deterministic in (clip, spec, seed). Random draws (noise values, block
// positions) depend on the seed only, so stronger severities reuse the
// weaker ones' draws: noise scales the same unit normals and block sets are
// nested.
Clip Perturb(const Clip& clip, const PerturbSpec& spec, std::uint64_t seed);

// Side length of one occlusion block for a frame of the given size.
std::size_t OcclusionBlockSide(std::size_t height, std::size_t width);

}  // namespace sidenet
