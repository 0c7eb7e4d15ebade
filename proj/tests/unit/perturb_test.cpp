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

#include <cmath>

#include <gtest/gtest.h>

#include "sidenet/error.h"
#include "sidenet/jpeg.h"
#include "sidenet/perturb.h"
#include "sidenet/rng.h"
#include "sidenet/toyset.h"

namespace sidenet {
namespace {

// Textured fixture clip: smooth waves plus mild noise, 64x64.
Clip FixtureClip() {
  ToysetOptions o;
  o.train = 1;
  o.val = o.test = 0;
  o.frames = 3;
  o.size = 64;
  o.seed = 5;
  return GenerateToyset(o).train[0].frames;
}

TEST(Perturb, SeverityZeroIsBitIdentity) {
  const Clip clip = FixtureClip();
  for (PerturbKind k : kAllPerturbKinds) EXPECT_EQ(Perturb(clip, {k, 0}, 3), clip);
}

TEST(Perturb, PsnrNonIncreasingInSeverity) {
  const Clip clip = FixtureClip();
  for (PerturbKind k : kAllPerturbKinds) {
    double prev = std::numeric_limits<double>::infinity();
    for (int s = 1; s <= 5; ++s) {
      const double psnr = Psnr(clip, Perturb(clip, {k, s}, 3));
      EXPECT_LE(psnr, prev) << PerturbKindName(k) << " severity " << s;
      prev = psnr;
    }
  }
}

TEST(Perturb, BlurFiveBelowBlurOne) {
  const Clip clip = FixtureClip();
  EXPECT_LT(Psnr(clip, Perturb(clip, {PerturbKind::kBlur, 5}, 0)),
            Psnr(clip, Perturb(clip, {PerturbKind::kBlur, 1}, 0)));
}

TEST(Perturb, NoiseVarianceMatchesLadderSigma) {
  Clip gray(4, Frame(64, 64, 128));
  const Clip noisy = Perturb(gray, {PerturbKind::kNoise, 3}, 17);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const Frame& f : noisy)
    for (std::uint8_t v : f.rgb) {
      sum += v;
      sq += double(v) * v;
      ++n;
    }
  const double mean = sum / double(n);
  const double var = sq / double(n) - mean * mean;
  const double sigma = ladder::kNoiseSigma[2];
  EXPECT_NEAR(var, sigma * sigma, 0.1 * sigma * sigma);
}

TEST(Perturb, DeterministicAndSeedDependent) {
  const Clip clip = FixtureClip();
  for (PerturbKind k : {PerturbKind::kNoise, PerturbKind::kBlock}) {
    EXPECT_EQ(Perturb(clip, {k, 2}, 8), Perturb(clip, {k, 2}, 8));
    EXPECT_NE(Perturb(clip, {k, 2}, 8), Perturb(clip, {k, 2}, 9));
  }
}

TEST(Perturb, BlockSetsAreNested) {
  const Clip clip(1, Frame(64, 64, 200));
  const Clip weak = Perturb(clip, {PerturbKind::kBlock, 1}, 4);
  const Clip strong = Perturb(clip, {PerturbKind::kBlock, 4}, 4);
  for (std::size_t i = 0; i < weak[0].rgb.size(); ++i) {
    if (weak[0].rgb[i] == 0) EXPECT_EQ(strong[0].rgb[i], 0) << i;
  }
}

TEST(Perturb, BadSpecsAreConfigErrors) {
  EXPECT_THROW(ParsePerturbKind("hue"), ConfigError);
  EXPECT_EQ(ParsePerturbKind("jpeg"), PerturbKind::kJpeg);
  const Clip clip = FixtureClip();
  EXPECT_THROW(Perturb(clip, {PerturbKind::kBlur, 6}, 0), ConfigError);
  EXPECT_THROW(Perturb(clip, {PerturbKind::kBlur, -1}, 0), ConfigError);
}

TEST(Jpeg, RoundTripKeepsExtentsAndLosesLittleAtHighQuality) {
  const Clip clip = FixtureClip();
  const Frame back = DecodeJpeg(EncodeJpeg(clip[0], 95));
  EXPECT_EQ(back.height, clip[0].height);
  EXPECT_EQ(back.width, clip[0].width);
  EXPECT_GT(Psnr(Clip{clip[0]}, Clip{back}), 30.0);
  const std::vector<std::uint8_t> garbage{1, 2, 3, 4};
  EXPECT_THROW(DecodeJpeg(garbage), DataError);
}

}  // namespace
}  // namespace sidenet
