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
#include <vector>

#include "sidenet/autodiff.h"
#include "sidenet/vit_encoder.h"

namespace sidenet {

struct TemporalGeometry {
  std::size_t channels = 0;  // |Gamma| * H
  std::size_t frames = 0;    // T
  std::size_t patches = 0;   // P, a perfect square
  std::size_t kernel = 5;
  std::size_t padding = 2;
  std::size_t stride = 1;

  // T' after the C1 convolution. Throws ConfigError when it does not tile.
  std::size_t reduced_frames() const;
  std::size_t grid() const;
  // Throws ConfigError for a non-square P or an empty attribute set.
  void Validate() const;
};

// Handles to one layer's temporal weights inside a graph.
template <typename T>
struct TemporalWeights {
  ad::Var<T> c1, c1_bias;  // [1, |Gamma| H, k, k], [1]
  ad::Var<T> w, w_bias;    // [T'^2, T'^2], [T'^2]
  ad::Var<T> c2, c2_bias;  // [1, T'^2, k, k], [1]
};

// Self-attention affinity along time, per patch, attribute and head:
// softmax_t2(x_t1 . x_t2 / sqrt(D)) with x = A_gamma[:, p, h, :]. Each input
// is [T, P, H, D]; output [P, |Gamma| H, T, T] in gamma-major channel order.
// Values are never applied; the normalized affinity map is the output.
template <typename T>
ad::Var<T> PatchTemporalAttention(std::span<const ad::Var<T>> attributes);

// Primitive-op assembly of the same quantity, for cross-checking.
template <typename T>
ad::Var<T> PatchTemporalAttentionReference(std::span<const ad::Var<T>> attributes);

// [P, C, T, T] -> [P, T', T'] via C1 applied to every patch.
template <typename T>
ad::Var<T> AffinityConv(ad::Var<T> m1, ad::Var<T> c1, ad::Var<T> c1_bias,
                        const TemporalGeometry& geometry);

// [P, T', T'] -> [P, T'^2]: x + x W^T + b on the row-major flattening.
template <typename T>
ad::Var<T> ResidualMix(ad::Var<T> m2, ad::Var<T> w, ad::Var<T> bias);

// [P, T'^2] -> [P]: channels T'^2 over the sqrt(P) x sqrt(P) patch grid,
// convolved by C2 and flattened row-major.
template <typename T>
ad::Var<T> SpatialAggregate(ad::Var<T> m3, ad::Var<T> c2, ad::Var<T> c2_bias,
                            const TemporalGeometry& geometry);

template <typename T>
struct TemporalResult {
  ad::Var<T> m1, m2, m3;
  ad::Var<T> embedding;  // [P]
};

template <typename T>
TemporalResult<T> TemporalForward(ad::Graph<T>& g, const LayerAttributes& taps,
                                  std::span<const Attribute> gamma_set,
                                  const TemporalWeights<T>& weights,
                                  const TemporalGeometry& geometry);

// Shapes of the six temporal tensors in declaration order of TemporalWeights.
std::vector<Shape> TemporalParameterShapes(const TemporalGeometry& geometry);

}  // namespace sidenet
