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
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sidenet/adamw.h"
#include "sidenet/archive.h"
#include "sidenet/dataset.h"
#include "sidenet/detector.h"
#include "sidenet/sampling.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {

struct TrainConfig {
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-3;
  double w_fcg = 0.15;
  double focal_gamma = 4.0;
  std::size_t epochs = 30;
  std::size_t patience = 10;
  std::size_t batch_size = 8;
  std::size_t max_steps = 0;  // 0 = no limit

  double tau = 10.0;
  FcgSign fcg_sign = FcgSign::kNegativeLog;
  Attribute gamma_s = Attribute::kKey;
  std::vector<Attribute> gamma_set = {Attribute::kQuery, Attribute::kKey, Attribute::kValue};
  std::size_t queries = 4;
  bool spatial = true;
  bool temporal = true;
  bool fcg = true;
  bool share_temporal_weights = false;
  Aggregation aggregation = Aggregation::kMean;

  double dataset_fraction = 1.0;
  std::string loo_exclusion;

  std::size_t frames = 10;
  double fps = 25.0;
  std::size_t clips_per_video = 4;
  bool augment = true;
  bool cache_taps = true;

  std::size_t mining_rounds = 32;
  bool mining_augment = true;

  // Applies "key = value" overrides. Unknown keys and bad values are
  // ConfigErrors naming `source` and the line when given.
  void Apply(const std::string& key, const std::string& value);
  std::map<std::string, std::string> ToMap() const;

  DetectorConfig Detector(const EncoderConfig& encoder) const;
  AdamWOptions Optimizer() const;
};

// "key = value" lines; '#' starts a comment. Later keys override earlier ones.
TrainConfig ParseTrainConfig(std::string_view text, const std::string& source,
                             TrainConfig base = {});
TrainConfig LoadTrainConfig(const std::filesystem::path& path, TrainConfig base = {});

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  // Records one epoch's validation metric (higher is better). Returns true
  // when training should stop.
  bool Update(double metric);
  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs() const { return epochs_; }
  std::size_t bad_epochs() const { return bad_epochs_; }
  void Restore(double best, std::size_t best_epoch, std::size_t epochs, std::size_t bad_epochs);

 private:
  std::size_t patience_;
  double best_ = -1.0;
  std::size_t best_epoch_ = 0;
  std::size_t epochs_ = 0;
  std::size_t bad_epochs_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;  // cumulative optimizer steps
  double loss = 0.0;      // per-step means over the epoch
  double focal_t = 0.0;
  double focal_s = 0.0;
  double focal_st = 0.0;
  double fcg = 0.0;
  double train_auroc = 0.0;
  double val_auroc = 0.0;
  double val_ap = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  bool stopped_early = false;

  std::string ToJson() const;
  static TrainHistory FromJson(const std::string& text);
  // FNV-1a of ToJson().
  std::uint64_t Hash() const;
};

// Everything needed to continue a run bit-identically.
struct TrainState {
  DetectorConfig detector;
  ParamSet params;
  ParamSet best_params;
  std::uint64_t adam_step = 0;
  std::vector<TensorF> adam_m, adam_v;
  std::size_t epoch = 0;  // completed epochs
  double best_val_auroc = -1.0;
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  std::uint64_t seed = 0;
  TrainHistory history;

  void WriteTo(TensorArchive& archive) const;
  static TrainState ReadFrom(const TensorArchive& archive);
};

struct TrainOptions {
  // When set, last.ckpt and best.ckpt plus history.json go here.
  std::filesystem::path out_dir;
  const TrainState* resume = nullptr;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainState state;  // final state; best_params holds the early-stopping pick
};

// Frames resized to the encoder input when needed.
Clip PrepareFrames(const Clip& clip, const EncoderConfig& encoder);

// Encodes every frame of a video once (frames resized to the encoder input).
std::vector<LayerAttributes> EncodeVideo(const VitEncoder& encoder, const Clip& frames);
// Rows `indices` of each layer's tap tensors.
std::vector<LayerAttributes> SliceFrames(const std::vector<LayerAttributes>& taps,
                                         const std::vector<std::size_t>& indices);

TrainResult Train(const TrainConfig& config, const VitEncoder& encoder,
                  std::span<const Video> train, std::span<const Video> val,
                  const FacialPartAttributes* phi, const TrainOptions& options = {});

struct EvalResult {
  std::vector<std::string> clip_video_ids;
  std::vector<double> clip_scores;
  std::vector<int> clip_labels;
  double auroc = 0.0;
  double ap = 0.0;
};

// Scores EvalWindows clips of every video and pools them per video.
EvalResult Evaluate(const DetectorConfig& detector, const ParamSet& params,
                    const VitEncoder& encoder, std::span<const Video> videos,
                    std::size_t clips_per_video);

}  // namespace sidenet
