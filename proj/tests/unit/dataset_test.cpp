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

#include <algorithm>
#include <set>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "scratch_dir.h"
#include "sidenet/dataset.h"
#include "sidenet/error.h"
#include "sidenet/sampling.h"

namespace sidenet {
namespace {

using testing::ScratchDir;

Clip NoiseClip(std::size_t frames, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Clip clip;
  for (std::size_t t = 0; t < frames; ++t) {
    Frame f(h, w);
    for (auto& v : f.rgb) v = static_cast<std::uint8_t>(rng.Below(256));
    clip.push_back(std::move(f));
  }
  return clip;
}

std::string ManifestText(std::size_t videos, std::size_t clips_per_video) {
  std::string text = "# generated\n";
  for (std::size_t v = 0; v < videos; ++v)
    for (std::size_t c = 0; c < clips_per_video; ++c)
      text += fmt::format("v{}_c{}.clip\t{}\tvid{}\t{}\t\t{}\n", v, c, v % 2 ? "fake" : "real", v,
                          v % 5 == 4 ? "test" : "train", v % 2 ? (v % 4 == 1 ? "df" : "f2f") : "");
  return text;
}

TEST(Manifest, ParsesFieldsAndResolvesPaths) {
  const auto r = ParseManifest(
      "# header\n\na.clip\treal\tv0\ttrain\n/abs/b.clip\tfake\tv1\tval\tlm/b.txt\tdf\n", "m.tsv",
      "/data", false);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].clip_path, std::filesystem::path("/data/a.clip"));
  EXPECT_EQ(r[0].label, 0);
  EXPECT_EQ(r[0].split, Split::kTrain);
  EXPECT_FALSE(r[0].landmark_path);
  EXPECT_EQ(r[0].line, 3u);
  EXPECT_EQ(r[1].clip_path, std::filesystem::path("/abs/b.clip"));
  EXPECT_EQ(r[1].label, 1);
  EXPECT_EQ(r[1].split, Split::kVal);
  EXPECT_EQ(*r[1].landmark_path, std::filesystem::path("/data/lm/b.txt"));
  EXPECT_EQ(r[1].manipulation_tag, "df");
}

TEST(Manifest, ErrorsNameTheLine) {
  try {
    ParseManifest("a.clip\treal\tv0\ttrain\nb.clip\treall\tv1\ttrain\n", "m.tsv", "/d", false);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("m.tsv:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("reall"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ParseManifest("a.clip\treal\tv0\n", "m", "/d", false), DataError);
  EXPECT_THROW(ParseManifest("a.clip\treal\tv0\tholdout\n", "m", "/d", false), DataError);
  EXPECT_THROW(ParseManifest("a.clip\treal\tv0\ttrain\na.clip\treal\tv0\ttrain\n", "m", "/d", false),
               DataError);
  EXPECT_THROW(ParseManifest("missing.clip\treal\tv0\ttrain\n", "m", "/nonexistent", true),
               DataError);
}

TEST(Manifest, SaveLoadRoundTrip) {
  ScratchDir dir;
  WritePackedClip(dir / "a.clip", NoiseClip(2, 4, 4, 1));
  WritePackedClip(dir / "b.clip", NoiseClip(2, 4, 4, 2));
  const auto records = ParseManifest("a.clip\treal\tv0\ttrain\nb.clip\tfake\tv1\ttest\t\tnt\n",
                                     "m", dir.path(), true);
  SaveManifest(dir / "m.tsv", records);
  const auto back = LoadManifest(dir / "m.tsv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].clip_path, records[i].clip_path);
    EXPECT_EQ(back[i].label, records[i].label);
    EXPECT_EQ(back[i].split, records[i].split);
    EXPECT_EQ(back[i].manipulation_tag, records[i].manipulation_tag);
  }
}

std::set<std::string> VideoIds(const std::vector<ManifestRecord>& records) {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.video_id);
  return ids;
}

TEST(Subsample, KeepsCeilFractionAndIsSupersetMonotone) {
  const auto records = ParseManifest(ManifestText(10, 2), "m", "/d", false);
  EXPECT_EQ(VideoIds(SubsampleVideos(records, 0.5, 3)).size(), 5u);
  EXPECT_EQ(VideoIds(SubsampleVideos(records, 0.25, 3)).size(), 3u);  // ceil(2.5)
  EXPECT_EQ(VideoIds(SubsampleVideos(records, 1.0, 3)).size(), 10u);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto quarter = VideoIds(SubsampleVideos(records, 0.25, seed));
    const auto half = VideoIds(SubsampleVideos(records, 0.5, seed));
    EXPECT_TRUE(std::includes(half.begin(), half.end(), quarter.begin(), quarter.end()));
  }
  // Clips of a kept video stay together.
  const auto kept = SubsampleVideos(records, 0.5, 3);
  EXPECT_EQ(kept.size(), 10u);
  EXPECT_THROW(SubsampleVideos(records, 0.0, 3), ConfigError);
}

TEST(LeaveOneOut, DropsOnlyTaggedFakesOutsideTest) {
  const auto records = ParseManifest(ManifestText(20, 1), "m", "/d", false);
  std::size_t tagged_train = 0, tagged_test = 0;
  for (const auto& r : records) {
    if (r.manipulation_tag == "df") ++(r.split == Split::kTest ? tagged_test : tagged_train);
  }
  ASSERT_GT(tagged_train, 0u);
  ASSERT_GT(tagged_test, 0u);
  const auto kept = ExcludeManipulation(records, "df");
  EXPECT_EQ(kept.size(), records.size() - tagged_train);
  std::size_t kept_test = 0;
  for (const auto& r : kept) {
    if (r.manipulation_tag == "df") {
      EXPECT_EQ(r.split, Split::kTest);
      ++kept_test;
    }
  }
  EXPECT_EQ(kept_test, tagged_test);
  EXPECT_EQ(ExcludeManipulation(records, "").size(), records.size());
}

TEST(ClipIo, PackedAndFrameDirectoryRoundTrip) {
  ScratchDir dir;
  const Clip clip = NoiseClip(3, 5, 7, 11);
  WritePackedClip(dir / "c.clip", clip);
  EXPECT_EQ(ReadPackedClip(dir / "c.clip"), clip);
  EXPECT_EQ(ReadClip(dir / "c.clip"), clip);
  WriteFrameDirectory(dir / "frames", clip);
  EXPECT_EQ(ReadFrameDirectory(dir / "frames"), clip);
  EXPECT_EQ(ReadClip(dir / "frames"), clip);
}

TEST(ClipIo, TruncatedPackedClipIsDataError) {
  ScratchDir dir;
  WritePackedClip(dir / "c.clip", NoiseClip(2, 4, 4, 1));
  std::filesystem::resize_file(dir / "c.clip", 20);
  EXPECT_THROW(ReadPackedClip(dir / "c.clip"), DataError);
}

TEST(LoadVideos, ConcatenatesClipsAndChecksLabels) {
  ScratchDir dir;
  WritePackedClip(dir / "a.clip", NoiseClip(2, 4, 4, 1));
  WritePackedClip(dir / "b.clip", NoiseClip(3, 4, 4, 2));
  auto records =
      ParseManifest("a.clip\tfake\tv\ttrain\nb.clip\tfake\tv\ttrain\n", "m", dir.path(), true);
  const auto videos = LoadVideos(records, 25.0);
  ASSERT_EQ(videos.size(), 1u);
  EXPECT_EQ(videos[0].frames.size(), 5u);
  EXPECT_EQ(videos[0].label, 1);
  records[1].label = 0;
  EXPECT_THROW(LoadVideos(records, 25.0), DataError);
}

TEST(Sampling, TwoSecondWindowAtTwentyFiveFps) {
  const auto idx = WindowIndices({0, 50}, 10);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 5, 10, 15, 20, 25, 30, 35, 40, 45}));
}

TEST(Sampling, ExactlyTFramesIsIdentity) {
  Rng rng(1);
  const auto windows = DrawWindows(10, 25.0, 10, 4, rng);
  ASSERT_EQ(windows.size(), 1u);
  std::vector<std::size_t> expected(10);
  for (std::size_t i = 0; i < 10; ++i) expected[i] = i;
  EXPECT_EQ(WindowIndices(windows[0], 10), expected);
}

TEST(Sampling, DrawnWindowsAreDisjointAndInRange) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto w = DrawWindows(400, 25.0, 10, 4, rng);
    ASSERT_GE(w.size(), 2u);
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_GE(w[i].length(), 50u);
      EXPECT_LE(w[i].length(), 100u);
      EXPECT_LE(w[i].end, 400u);
      if (i) EXPECT_LE(w[i - 1].end, w[i].begin);
    }
  }
  Rng rng(0);
  EXPECT_THROW(DrawWindows(9, 25.0, 10, 1, rng), DataError);
}

TEST(Sampling, EvalWindowsAreConsecutive) {
  const auto w = EvalWindows(120, 25.0, 10, 4);
  EXPECT_EQ(w, (std::vector<FrameWindow>{{0, 50}, {50, 100}}));
  EXPECT_EQ(EvalWindows(12, 25.0, 10, 4), (std::vector<FrameWindow>{{0, 12}}));
}

TEST(Augment, AllGatesOffIsIdentity) {
  const Clip clip = NoiseClip(3, 16, 16, 5);
  Rng rng(9);
  EXPECT_EQ(Augment(clip, rng, AugmentOptions::Disabled()), clip);
}

TEST(Augment, FlipTwiceIsIdentity) {
  const Clip clip = NoiseClip(2, 16, 12, 5);
  AugmentParams p;
  p.flip = true;
  EXPECT_NE(ApplyAugmentation(clip, p), clip);
  EXPECT_EQ(ApplyAugmentation(ApplyAugmentation(clip, p), p), clip);
}

TEST(Augment, FixedSeedReplaysBitIdentically) {
  const Clip clip = NoiseClip(4, 24, 24, 5);
  AugmentOptions all;
  all.flip_p = all.crop_p = all.jitter_p = all.jpeg_p = all.blur_p = all.rescale_p = 1.0;
  Rng a(42), b(42);
  const Clip x = Augment(clip, a, all), y = Augment(clip, b, all);
  EXPECT_EQ(x, y);
  EXPECT_NE(x, clip);
  // The same parameters apply to every frame: identical frames stay identical.
  Clip same(3, clip[0]);
  Rng c(7);
  const Clip z = Augment(same, c, all);
  EXPECT_EQ(z[0], z[1]);
  EXPECT_EQ(z[1], z[2]);
}

TEST(MiningSamples, EvenlySpacedLandmarkedFrames) {
  Video v;
  v.frames = NoiseClip(10, 4, 4, 1);
  LandmarkFrame lm{};
  for (std::size_t t = 0; t < 10; ++t) {
    lm[0].x = static_cast<double>(t);
    v.landmarks.push_back(lm);
  }
  Video bare;
  bare.frames = NoiseClip(10, 4, 4, 2);
  const std::vector<Video> videos{v, bare};
  const auto s = MiningSamples(videos, 4);
  ASSERT_EQ(s.size(), 4u);
  EXPECT_EQ(s[1].landmarks[0].x, 2.0);  // t = 1 * 10 / 4
  EXPECT_EQ(s[3].frame, v.frames[7]);
}

}  // namespace
}  // namespace sidenet
