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
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "sidenet/error.h"
#include "sidenet/metrics.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

// O(n^2) pair counting.
double PairCountAuroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  return wins / pairs;
}

// Sweep every distinct threshold from the top, recounting from scratch.
double SweepAveragePrecision(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.rbegin(), thresholds.rend());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double positives = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, predicted = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        predicted += 1.0;
        tp += y[i];
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

Instance RandomInstance(Rng& rng) {
  Instance in;
  const std::size_t n = 2 + rng.Below(40);
  for (std::size_t i = 0; i < n; ++i) {
    // Coarse scores so ties occur.
    in.scores.push_back(static_cast<double>(rng.Below(12)) / 11.0);
    in.labels.push_back(static_cast<int>(rng.Below(2)));
  }
  in.labels[0] = 0;
  in.labels[1] = 1;
  return in;
}

TEST(Auroc, MatchesPairCountingOnRandomInstances) {
  Rng rng(2024);
  for (int k = 0; k < 50; ++k) {
    const Instance in = RandomInstance(rng);
    EXPECT_NEAR(Auroc(in.scores, in.labels), PairCountAuroc(in.scores, in.labels), 1e-12);
  }
}

TEST(Auroc, Examples) {
  const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(Auroc(s, y), 1.0);
  const std::vector<double> flat(6, 0.3);
  const std::vector<int> y6{1, 0, 1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(Auroc(flat, y6), 0.5);
  // One inverted pair out of nine.
  const std::vector<double> inv{0.9, 0.8, 0.4, 0.5, 0.2, 0.1};
  const std::vector<int> yi{1, 1, 1, 0, 0, 0};
  EXPECT_NEAR(Auroc(inv, yi), 8.0 / 9.0, 1e-15);
  EXPECT_NEAR(Auroc(inv, yi), PairCountAuroc(inv, yi), 1e-15);
}

TEST(Auroc, SingleClassIsDataError) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> y{1, 1};
  EXPECT_THROW(Auroc(s, y), DataError);
}

TEST(AveragePrecision, MatchesThresholdSweepOnRandomInstances) {
  Rng rng(77);
  for (int k = 0; k < 50; ++k) {
    const Instance in = RandomInstance(rng);
    EXPECT_NEAR(AveragePrecision(in.scores, in.labels),
                SweepAveragePrecision(in.scores, in.labels), 1e-12);
  }
}

TEST(AveragePrecision, Examples) {
  const std::vector<double> s{0.9, 0.8, 0.2, 0.1};
  EXPECT_DOUBLE_EQ(AveragePrecision(s, std::vector<int>{1, 1, 0, 0}), 1.0);
  for (std::size_t n : {2u, 5u, 9u}) {
    std::vector<double> sc(n);
    std::vector<int> y(n, 0);
    for (std::size_t i = 0; i < n; ++i) sc[i] = 1.0 - 0.1 * static_cast<double>(i);
    y[n - 1] = 1;
    EXPECT_NEAR(AveragePrecision(sc, y), 1.0 / static_cast<double>(n), 1e-15);
  }
  EXPECT_THROW(AveragePrecision(s, std::vector<int>{0, 0, 0, 0}), DataError);
}

TEST(VideoPooling, MeanOfClipScoresPerVideo) {
  const std::vector<double> s{0.2, 0.4, 0.9, 0.7, 0.1};
  const std::vector<std::string> ids{"a", "a", "b", "b", "c"};
  const std::vector<int> y{0, 0, 1, 1, 0};
  const auto p = PoolByVideo(s, ids, y);
  ASSERT_EQ(p.video_ids, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_NEAR(p.scores[0], 0.3, 1e-15);
  EXPECT_NEAR(p.scores[1], 0.8, 1e-15);
  EXPECT_EQ(p.labels, (std::vector<int>{0, 1, 0}));
  EXPECT_DOUBLE_EQ(VideoAuroc(s, ids, y), 1.0);
  const std::vector<int> mixed{0, 1, 1, 1, 0};
  EXPECT_THROW(PoolByVideo(s, ids, mixed), DataError);
}

}  // namespace
}  // namespace sidenet
