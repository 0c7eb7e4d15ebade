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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sidenet/image.h"
#include "sidenet/spatial.h"

namespace sidenet {

enum class Split { kTrain, kVal, kTest };

const char* SplitName(Split split);

struct ManifestRecord {
  std::filesystem::path clip_path;
  int label = 0;  // 1 = fake
  std::string video_id;
  Split split = Split::kTrain;
  std::optional<std::filesystem::path> landmark_path;
  std::string manipulation_tag;
  std::size_t line = 0;
};

// Tab-separated: clip_path, label (real|fake), video_id, split, then optional
// landmark_path and manipulation_tag. '#' lines and blank lines are skipped.
// Relative paths resolve against `base_dir`. Errors name `source` and the
// line. When `check_files` is set every referenced path must exist.
std::vector<ManifestRecord> ParseManifest(std::string_view text, const std::string& source,
                                          const std::filesystem::path& base_dir,
                                          bool check_files);
std::vector<ManifestRecord> LoadManifest(const std::filesystem::path& path,
                                         bool check_files = true);
void SaveManifest(const std::filesystem::path& path, std::span<const ManifestRecord> records);

std::vector<ManifestRecord> FilterSplit(std::span<const ManifestRecord> records, Split split);

// Keeps ceil(fraction * V) of the V distinct videos. Videos are ranked by a
// seeded hash of their id, so a smaller fraction keeps a subset of a larger
// one under the same seed.
std::vector<ManifestRecord> SubsampleVideos(std::span<const ManifestRecord> records,
                                            double fraction, std::uint64_t seed);

// Drops fake records carrying `tag` from the train and val splits; test
// records are untouched. An empty tag is a no-op.
std::vector<ManifestRecord> ExcludeManipulation(std::span<const ManifestRecord> records,
                                                const std::string& tag);

// Packed clip container: u32 count, u32 height, u32 width (little endian),
// then count * height * width * 3 bytes of RGB.
Clip ReadPackedClip(const std::filesystem::path& path);
void WritePackedClip(const std::filesystem::path& path, const Clip& clip);

// Binary PPM (P6, maxval 255) frames, ordered by file name.
Clip ReadFrameDirectory(const std::filesystem::path& dir);
void WriteFrameDirectory(const std::filesystem::path& dir, const Clip& clip);
Frame ReadPpm(const std::filesystem::path& path);
void WritePpm(const std::filesystem::path& path, const Frame& frame);
// Binary PGM (P5) of an 8-bit single-channel image.
void WritePgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
              std::span<const std::uint8_t> pixels);

// Directory -> frame directory, otherwise the packed container.
Clip ReadClip(const std::filesystem::path& path);

// One video with its decoded frames.
struct Video {
  std::string id;
  int label = 0;
  Clip frames;
  double fps = 25.0;
  std::vector<LandmarkFrame> landmarks;  // empty or one per frame
  std::string manipulation_tag;
};

// Groups records by video_id (first-appearance order). Clips of one video
// are concatenated in manifest order. All clips of a video must agree on
// the label.
std::vector<Video> LoadVideos(std::span<const ManifestRecord> records, double fps);

// Up to `per_video` evenly spaced landmarked frames of every video that has
// landmarks.
std::vector<MiningSample> MiningSamples(std::span<const Video> videos, std::size_t per_video);

}  // namespace sidenet
