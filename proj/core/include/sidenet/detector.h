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

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sidenet/archive.h"
#include "sidenet/autodiff.h"
#include "sidenet/params.h"
#include "sidenet/spatial.h"
#include "sidenet/temporal.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {

enum class Aggregation { kMean, kSum };

struct DetectorConfig {
  // Extents of the frozen encoder and the clip length.
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t patches = 0;
  std::size_t frames = 10;

  std::size_t queries = 4;
  bool spatial = true;
  bool temporal = true;
  bool fcg = true;
  double tau = 10.0;
  FcgSign fcg_sign = FcgSign::kNegativeLog;
  Attribute gamma_s = Attribute::kKey;
  std::vector<Attribute> gamma_t = {Attribute::kQuery, Attribute::kKey, Attribute::kValue};
  bool share_temporal_weights = false;
  Aggregation aggregation = Aggregation::kMean;
  std::size_t conv_kernel = 5;
  std::size_t conv_padding = 2;
  std::size_t conv_stride = 1;

  double focal_gamma = 4.0;
  double w_fcg = 0.15;

  std::size_t width() const { return heads * head_dim; }
  TemporalGeometry temporal_geometry() const;
  // Throws ConfigError on inconsistent settings.
  void Validate() const;

  // Extents taken from an encoder.
  static DetectorConfig ForEncoder(const EncoderConfig& encoder, std::size_t frames);
  // L=24, H=16, D=64, P=256, T=10.
  static DetectorConfig VitL14();

  // Flat key/value form, stored in checkpoints.
  std::map<std::string, std::string> ToMap() const;
  static DetectorConfig FromMap(const std::map<std::string, std::string>& values);
  std::uint64_t Hash() const;
};

const char* AggregationName(Aggregation a);

// Parameter tensors by name. Per-layer temporal tensors are named
// "temporal/layer{l}/..." or "temporal/shared/..." when shared.
std::vector<std::pair<std::string, Shape>> DetectorParameterShapes(const DetectorConfig& config);
// Closed-form trainable-parameter count.
std::size_t AnalyticParameterCount(const DetectorConfig& config);

// Fresh parameters. Queries are warm-started from `phi` when FCG is on.
ParamSet InitDetectorParams(const DetectorConfig& config, const FacialPartAttributes* phi,
                            std::uint64_t seed);

template <typename T>
struct DetectorOutput {
  std::optional<ad::Var<T>> logit_t, logit_s, logit_st;
  ad::Var<T> score;
  std::vector<ad::Var<T>> spatial_m1;   // per layer, [T, N, H*D]
  std::vector<ad::Var<T>> temporal_m1;  // per layer, [P, |Gamma| H, T, T]
  std::optional<ad::Var<T>> e_t, e_s;   // aggregated embeddings
};

// Graph handles of a ParamSet, in ParamSet order.
template <typename T>
struct BoundParams {
  const ParamSet* names = nullptr;
  std::vector<ad::Var<T>> vars;

  ad::Var<T> operator[](std::string_view name) const { return vars.at(names->IndexOf(name)); }
};

// Registers every parameter with the graph (as gradient leaves when
// `trainable`, as borrowed constants otherwise).
template <typename T>
BoundParams<T> BindParams(ad::Graph<T>& g, const ParamSet& params, bool trainable);

template <typename T>
ad::Var<T> Aggregate(std::span<const ad::Var<T>> embeddings, Aggregation mode);

template <typename T>
DetectorOutput<T> DetectorForward(ad::Graph<T>& g, const DetectorConfig& config,
                                  const BoundParams<T>& params,
                                  const std::vector<LayerAttributes>& taps);

// -(1 - p_t)^gamma log p_t, through log-sigmoid.
template <typename T>
ad::Var<T> FocalLoss(ad::Var<T> logit, int label, double gamma);

// Facial-guidance loss over the bound queries and frozen phi.
template <typename T>
ad::Var<T> DetectorFcgLoss(ad::Graph<T>& g, const DetectorConfig& config,
                           const BoundParams<T>& params, const FacialPartAttributes& phi);

template <typename T>
struct LossTerms {
  ad::Var<T> total;
  std::optional<ad::Var<T>> focal_t, focal_s, focal_st;
};

// Sum of the enabled branches' focal losses plus w * fcg.
template <typename T>
LossTerms<T> TotalLoss(const DetectorOutput<T>& out, int label, double focal_gamma,
                       std::optional<ad::Var<T>> fcg, double w);

struct ClipScore {
  double score = 0.0;
  std::optional<double> logit_t, logit_s, logit_st;
};

// Forward-only scoring with frozen parameters.
ClipScore ScoreClip(const DetectorConfig& config, const ParamSet& params,
                    const std::vector<LayerAttributes>& taps);

// Multi-line trainable-parameter report for both temporal-weight modes.
std::string ParameterReport(const DetectorConfig& config);

// Detector checkpoint: "param/<name>" tensors plus config metadata.
void WriteDetector(TensorArchive& archive, const DetectorConfig& config, const ParamSet& params);
ParamSet ReadDetectorParams(const TensorArchive& archive, const DetectorConfig& config);
DetectorConfig ReadDetectorConfig(const TensorArchive& archive);

}  // namespace sidenet
