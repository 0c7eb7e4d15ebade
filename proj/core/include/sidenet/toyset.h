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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sidenet/dataset.h"

namespace sidenet {

// Synthetic desk-scale video sets.
//
// kSeparable: real videos are smooth low-frequency textures translating at a
// constant velocity; fakes add per-frame independent high-frequency flicker
// inside the face box. Both branches can pick this up.
//
// kTemporalOnly: fakes are real-process videos with their frames shuffled,
// so every fake has exactly the frame multiset of some real video and only
// frame order separates the classes.
enum class ToysetKind { kSeparable, kTemporalOnly };

const char* ToysetKindName(ToysetKind kind);
// "separable" or "temporal_only"; throws ConfigError otherwise.
ToysetKind ParseToysetKind(const std::string& name);

struct ToysetOptions {
  ToysetKind kind = ToysetKind::kSeparable;
  std::size_t train = 64;
  std::size_t val = 16;
  std::size_t test = 0;
  std::size_t frames = 20;  // per video
  std::size_t size = 32;    // square frames
  double fps = 8.0;
  std::uint64_t seed = 0;

  // 64 / 64 videos of exactly 10 frames, so clip sampling keeps every frame
  // in order.
  static ToysetOptions TemporalOnly();
};

struct Toyset {
  std::vector<Video> train, val, test;
};

// Videos alternate real/fake within each split. Every video carries one
// static 68-point landmark set per frame.
Toyset GenerateToyset(const ToysetOptions& options);

// Writes clips/<id>.clip, landmarks/<id>.txt and manifest.tsv under `dir`.
// Returns the manifest path.
std::filesystem::path WriteToyset(const std::filesystem::path& dir, const Toyset& toyset);

}  // namespace sidenet
