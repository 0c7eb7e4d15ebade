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

#include <span>
#include <string>
#include <vector>

namespace sidenet {

// Mann-Whitney AUROC; tied positive/negative pairs count 1/2. Labels are
// 0/1 with 1 the positive (fake) class. Throws DataError unless both
// classes are present.
double Auroc(std::span<const double> scores, std::span<const int> labels);

// Sum over distinct descending score thresholds of (R_k - R_{k-1}) * P_k.
// Throws DataError without positives.
double AveragePrecision(std::span<const double> scores, std::span<const int> labels);

struct VideoScores {
  std::vector<std::string> video_ids;
  std::vector<double> scores;  // mean of the video's clip scores
  std::vector<int> labels;
};

// Groups clip scores by video (first-appearance order). A video whose clips
// disagree on the label is a DataError.
VideoScores PoolByVideo(std::span<const double> clip_scores,
                        std::span<const std::string> video_ids, std::span<const int> labels);

double VideoAuroc(std::span<const double> clip_scores, std::span<const std::string> video_ids,
                  std::span<const int> labels);

}  // namespace sidenet
