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

#include "sidenet/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {
namespace {

void CheckInputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DataError(fmt::format("{} scores for {} labels", scores.size(), labels.size()));
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError(fmt::format("label {} is not 0/1", labels[i]));
    if (!std::isfinite(scores[i])) throw NumericalError(fmt::format("score {} is not finite", i));
  }
}

// Indices sorted by descending score.
std::vector<std::size_t> Descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double Auroc(std::span<const double> scores, std::span<const int> labels) {
  CheckInputs(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw DataError("auroc needs at least one real and one fake video");
  }
  // Walk tie groups from the highest score down: each positive beats the
  // negatives below its group and ties with the negatives inside it.
  const auto order = Descending(scores);
  double wins = 0.0;
  std::size_t neg_below = negatives;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, pos = 0, neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos : neg) += 1;
      ++j;
    }
    neg_below -= neg;
    wins += static_cast<double>(pos) * (static_cast<double>(neg_below) + 0.5 * neg);
    i = j;
  }
  return wins / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double AveragePrecision(std::span<const double> scores, std::span<const int> labels) {
  CheckInputs(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw DataError("average precision needs at least one fake sample");
  const auto order = Descending(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

VideoScores PoolByVideo(std::span<const double> clip_scores,
                        std::span<const std::string> video_ids, std::span<const int> labels) {
  if (clip_scores.size() != video_ids.size() || clip_scores.size() != labels.size()) {
    throw DataError("clip scores, video ids and labels differ in length");
  }
  VideoScores out;
  std::map<std::string, std::size_t> index;
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < clip_scores.size(); ++i) {
    auto [it, fresh] = index.try_emplace(video_ids[i], out.video_ids.size());
    if (fresh) {
      out.video_ids.push_back(video_ids[i]);
      out.scores.push_back(0.0);
      out.labels.push_back(labels[i]);
      counts.push_back(0);
    } else if (out.labels[it->second] != labels[i]) {
      throw DataError(fmt::format("video {} has clips with different labels", video_ids[i]));
    }
    out.scores[it->second] += clip_scores[i];
    ++counts[it->second];
  }
  for (std::size_t v = 0; v < out.scores.size(); ++v) out.scores[v] /= static_cast<double>(counts[v]);
  return out;
}

double VideoAuroc(std::span<const double> clip_scores, std::span<const std::string> video_ids,
                  std::span<const int> labels) {
  const auto pooled = PoolByVideo(clip_scores, video_ids, labels);
  return Auroc(pooled.scores, pooled.labels);
}

}  // namespace sidenet
