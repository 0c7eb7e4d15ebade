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
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sidenet/archive.h"
#include "sidenet/autodiff.h"
#include "sidenet/image.h"
#include "sidenet/rng.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {

// Guided facial parts, in the order that binds query i to part i.
enum class FacialPart { kLips = 0, kSkin = 1, kEyes = 2, kNose = 3 };
inline constexpr std::size_t kFacialPartCount = 4;
inline constexpr std::size_t kLandmarkCount = 68;

const char* FacialPartName(FacialPart part);
// Indices into the 68-point layout belonging to `part`.
std::span<const std::size_t> PartLandmarks(FacialPart part);
// Human-readable grouping, stored next to mined attributes.
std::string LandmarkGroupingDescription();

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};
using LandmarkFrame = std::array<Point, kLandmarkCount>;

// 68 lines of "x y" per frame; frames separated by blank lines.
std::vector<LandmarkFrame> LoadLandmarks(const std::filesystem::path& path);
void SaveLandmarks(const std::filesystem::path& path, std::span<const LandmarkFrame> frames);

// Multi-head cross-attention of learnable queries over patch taps, with no
// projections: queries [N, H*D], keys [T, P, H, D], values [T, P, H*D].
// Returns [T, N, H*D]. When `attention` is given it receives the softmax
// weights as [T, H, N, P].
template <typename T>
ad::Var<T> CrossAttention(ad::Var<T> queries, ad::Var<T> keys, ad::Var<T> values,
                          std::size_t heads, Tensor<T>* attention = nullptr);

// The same quantity assembled from primitive ops; used to cross-check the
// fused kernel.
template <typename T>
ad::Var<T> CrossAttentionReference(ad::Var<T> queries, ad::Var<T> keys, ad::Var<T> values,
                                   std::size_t heads);

template <typename T>
struct SpatialResult {
  ad::Var<T> m1;         // [T, N, H*D]
  ad::Var<T> embedding;  // [H*D], mean over frames and queries
};

template <typename T>
SpatialResult<T> SpatialForward(ad::Graph<T>& g, ad::Var<T> queries,
                                const LayerAttributes& taps, Attribute gamma_s);

// Per-query attention grids averaged over heads: [N, T, grid, grid].
TensorF AffinityMaps(const TensorF& queries, const LayerAttributes& taps, Attribute gamma_s);

// Sign convention of the facial-guidance loss. kNegativeLog is the
// minimized InfoNCE form; kAsPrinted keeps the summand without the minus.
enum class FcgSign { kNegativeLog, kAsPrinted };

// Mean over layers and queries of -log softmax_j(tau * cos(q_{l,i}, phi_{l,j}))
// at j = i. queries[l]: [N, H*D] with 1 <= N <= 4; phi[l]: [4, H*D]. Only the
// first N parts take part in the softmax.
template <typename T>
ad::Var<T> FcgLoss(std::span<const ad::Var<T>> queries, std::span<const ad::Var<T>> phi,
                   double tau, FcgSign sign = FcgSign::kNegativeLog);

struct FacialPartAttributes {
  std::vector<TensorF> phi;  // per layer, [4, H*D], unit rows
  Attribute gamma_s = Attribute::kKey;
  std::size_t rounds = 0;
  bool augment = true;
  std::uint64_t seed = 0;
  std::size_t frames = 0;

  // "fcg/phi/layer{l}" entries plus "fcg/..." metadata.
  void WriteTo(TensorArchive& archive) const;
  static FacialPartAttributes ReadFrom(const TensorArchive& archive);
};

struct MiningOptions {
  Attribute gamma_s = Attribute::kKey;
  std::size_t rounds = 32;
  bool augment = true;
  std::uint64_t seed = 0;
};

struct MiningSample {
  Frame frame;
  LandmarkFrame landmarks;
};

// Parameters of one mining augmentation round, drawn from the frame's stream.
struct MiningAugmentation {
  std::size_t crop_y = 0;
  std::size_t crop_x = 0;
  std::size_t crop_size = 0;  // square crop side
  bool flip_horizontal = false;
  bool flip_vertical = false;
};

// Random square crop covering 80-100% of the shorter side plus independent
// horizontal and vertical flips (p = 0.5 each).
MiningAugmentation DrawMiningAugmentation(Rng& rng, std::size_t height, std::size_t width);

// Applies `aug` to the frame and resamples to `size` x `size`; landmarks are
// mapped through the same transform. Landmarks leaving the image are set to
// NaN.
MiningSample ApplyMiningAugmentation(const MiningSample& sample, const MiningAugmentation& aug,
                                     std::size_t size);

// Accumulates L2-normalized gamma_s attributes of landmark patches per part
// and layer, averages them and re-normalizes. Frame i uses the stream
// DeriveSeed(options.seed, i).
FacialPartAttributes MineFacialAttributes(const VitEncoder& encoder,
                                          std::span<const MiningSample> samples,
                                          const MiningOptions& options);

// Query warm start: phi rows plus N(0, 0.02^2) noise when `phi` is given,
// random unit vectors otherwise. Returns one [N, width] tensor per layer.
std::vector<TensorF> InitSpatialQueries(const FacialPartAttributes* phi, std::size_t layers,
                                        std::size_t count, std::size_t width, Rng& rng);

}  // namespace sidenet
