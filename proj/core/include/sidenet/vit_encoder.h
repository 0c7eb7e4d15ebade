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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sidenet/archive.h"
#include "sidenet/image.h"
#include "sidenet/tensor.h"

namespace sidenet {

enum class Attribute { kQuery = 0, kKey = 1, kValue = 2 };

const char* AttributeName(Attribute a);
// Accepts "q"/"k"/"v"; throws ConfigError otherwise.
Attribute ParseAttribute(const std::string& text);

enum class MlpActivation { kGelu, kQuickGelu };

struct EncoderConfig {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t patch_size = 0;
  std::size_t image_size = 0;
  std::size_t mlp_width = 0;
  MlpActivation activation = MlpActivation::kGelu;

  std::size_t width() const { return heads * head_dim; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + 1; }

  // Throws ConfigError on inconsistent extents.
  void Validate() const;

  // Desk-scale profile used by tests: L=4, H=4, D=16, 32px images, 8px patches.
  static EncoderConfig Tiny();
};

// Per-layer taps for one clip. Class-token rows are excluded.
struct LayerAttributes {
  TensorF query;    // [T, P, H, D]
  TensorF key;      // [T, P, H, D]
  TensorF value;    // [T, P, H, D]
  TensorF patches;  // [T, P, H*D]

  const TensorF& attribute(Attribute a) const;
  std::size_t frames() const { return patches.dim(0); }
};

struct EncoderLayerWeights {
  TensorF ln1_gain, ln1_bias;
  TensorF wq, bq, wk, bk, wv, bv;  // weights are [out, in]
  TensorF wo, bo;
  TensorF ln2_gain, ln2_bias;
  TensorF fc1_weight, fc1_bias;  // [mlp, width], [mlp]
  TensorF fc2_weight, fc2_bias;  // [width, mlp], [width]
};

struct EncoderWeights {
  TensorF patch_weight;  // [width, 3 * patch * patch], (c, y, x) order
  TensorF patch_bias;    // [width]; zeros when the source has none
  TensorF class_token;   // [width]
  TensorF pos_embed;     // [P + 1, width]
  std::optional<std::pair<TensorF, TensorF>> ln_pre;  // gain, bias
  TensorF ln_post_gain, ln_post_bias;
  std::vector<EncoderLayerWeights> layers;
  std::array<float, 3> mean{};  // per-channel, on the [0, 1] pixel scale
  std::array<float, 3> std{};
};

// Frozen pre-norm ViT image encoder, forward only. Immutable after
// construction, so EncodeClip may run concurrently.
class VitEncoder {
 public:
  VitEncoder(EncoderConfig config, EncoderWeights weights);

  // Reads a tensor archive. With no explicit config the extents are inferred
  // from tensor shapes and the head count from the "heads" metadata entry.
  static VitEncoder FromArchive(const TensorArchive& archive,
                                std::optional<EncoderConfig> config = {});
  static VitEncoder Load(const std::filesystem::path& path,
                         std::optional<EncoderConfig> config = {});
  TensorArchive ToArchive() const;

  // Seeded random weights with the given extents, for tests and demos.
  static VitEncoder Synthesize(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  const EncoderWeights& weights() const { return weights_; }
  std::size_t ParameterCount() const;

  // 8-bit RGB frames to the normalized [T, 3, S, S] layout. Frames must
  // already be image_size x image_size.
  TensorF Normalize(std::span<const Frame> frames) const;

  // frames: [T, 3, S, S], already normalized. Returns one entry per layer.
  std::vector<LayerAttributes> EncodeClip(const TensorF& frames) const;

 private:
  void EncodeFrame(const float* image, std::size_t t, std::size_t frame_count,
                   std::vector<LayerAttributes>& out) const;

  EncoderConfig config_;
  EncoderWeights weights_;
};

// Row-major patch index of a pixel coordinate; throws DataError when the
// coordinate is outside the image.
std::size_t ImagePatchIndex(double x, double y, const EncoderConfig& config);

// Largest absolute deviation per layer between the encoder's taps and a
// golden-tap archive ("input/frames" [F,3,S,S]; "layer{l}/{q,k,v}"
// [F,P,H,D]; "layer{l}/emb" [F,P,H*D]).
std::vector<double> ReplayGoldenTaps(const VitEncoder& encoder,
                                     const TensorArchive& golden);
TensorArchive RecordGoldenTaps(const VitEncoder& encoder, const TensorF& frames);

}  // namespace sidenet
