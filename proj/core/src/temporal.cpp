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

#include "sidenet/temporal.h"

#include <algorithm>
#include <cmath>
#include <memory>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {

std::size_t TemporalGeometry::reduced_frames() const {
  return ad::ConvOutputExtent(frames, kernel, padding, stride);
}

std::size_t TemporalGeometry::grid() const {
  return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patches))));
}

void TemporalGeometry::Validate() const {
  if (channels == 0) throw ConfigError("temporal module needs a non-empty attribute set");
  if (frames < 2) throw ConfigError(fmt::format("temporal module needs T >= 2, got {}", frames));
  if (grid() * grid() != patches) {
    throw ConfigError(fmt::format("patch count {} is not a perfect square", patches));
  }
  if (kernel % 2 == 0) throw ConfigError("temporal kernels must have odd size");
  reduced_frames();
  ad::ConvOutputExtent(grid(), kernel, padding, stride);
}

template <typename T>
ad::Var<T> PatchTemporalAttention(std::span<const ad::Var<T>> attributes) {
  if (attributes.empty()) throw ConfigError("pt_mhsa: empty attribute set");
  const Shape shape = attributes[0].shape();
  if (shape.size() != 4) {
    throw DimensionError(fmt::format("pt_mhsa: attribute shape {}", ShapeString(shape)));
  }
  for (const auto& a : attributes) {
    if (a.shape() != shape) {
      throw DimensionError(fmt::format("pt_mhsa: attribute shapes {} and {} differ",
                                       ShapeString(shape), ShapeString(a.shape())));
    }
  }
  const std::size_t frames = shape[0], patches = shape[1], heads = shape[2], d = shape[3];
  if (frames < 2) throw DimensionError("pt_mhsa needs at least two frames");
  const std::size_t gammas = attributes.size();
  const std::size_t channels = gammas * heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const std::size_t step_t = patches * heads * d;  // stride between frames

  Tensor<T> out({patches, channels, frames, frames});
  std::vector<T> row(frames);
  for (std::size_t gi = 0; gi < gammas; ++gi) {
    const T* a = attributes[gi].value().data().data();
    for (std::size_t p = 0; p < patches; ++p) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* base = a + (p * heads + h) * d;
        T* m = out.data().data() + ((p * channels + gi * heads + h) * frames) * frames;
        for (std::size_t t1 = 0; t1 < frames; ++t1) {
          const T* x1 = base + t1 * step_t;
          T mx = -INFINITY;
          for (std::size_t t2 = 0; t2 < frames; ++t2) {
            const T* x2 = base + t2 * step_t;
            T acc = 0;
            for (std::size_t e = 0; e < d; ++e) acc += x1[e] * x2[e];
            row[t2] = acc * scale;
            mx = std::max(mx, row[t2]);
          }
          T denom = 0;
          for (std::size_t t2 = 0; t2 < frames; ++t2) {
            row[t2] = std::exp(row[t2] - mx);
            denom += row[t2];
          }
          for (std::size_t t2 = 0; t2 < frames; ++t2) m[t1 * frames + t2] = row[t2] / denom;
        }
      }
    }
  }

  std::vector<ad::Var<T>> parents(attributes.begin(), attributes.end());
  return parents[0].graph->Record(
      "pt_mhsa", std::move(out), parents,
      [parents, frames, patches, heads, d, channels, scale, step_t](
          ad::Graph<T>& g, const Tensor<T>& y, const Tensor<T>& gy) {
        std::vector<T> ds(frames * frames);
        for (std::size_t gi = 0; gi < parents.size(); ++gi) {
          if (!g.requires_grad(parents[gi])) continue;
          const T* a = g.value(parents[gi]).data().data();
          T* ga = g.GradBuffer(parents[gi]).data().data();
          for (std::size_t p = 0; p < patches; ++p) {
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t off = ((p * channels + gi * heads + h) * frames) * frames;
              const T* m = y.data().data() + off;
              const T* gm = gy.data().data() + off;
              for (std::size_t t1 = 0; t1 < frames; ++t1) {
                T dot = 0;
                for (std::size_t t2 = 0; t2 < frames; ++t2) {
                  dot += m[t1 * frames + t2] * gm[t1 * frames + t2];
                }
                for (std::size_t t2 = 0; t2 < frames; ++t2) {
                  const std::size_t i = t1 * frames + t2;
                  ds[i] = m[i] * (gm[i] - dot) * scale;
                }
              }
              const std::size_t base = (p * heads + h) * d;
              for (std::size_t t1 = 0; t1 < frames; ++t1) {
                for (std::size_t t2 = 0; t2 < frames; ++t2) {
                  const T s = ds[t1 * frames + t2];
                  const T* x1 = a + base + t1 * step_t;
                  const T* x2 = a + base + t2 * step_t;
                  T* g1 = ga + base + t1 * step_t;
                  T* g2 = ga + base + t2 * step_t;
                  for (std::size_t e = 0; e < d; ++e) {
                    g1[e] += s * x2[e];
                    g2[e] += s * x1[e];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
ad::Var<T> PatchTemporalAttentionReference(std::span<const ad::Var<T>> attributes) {
  std::vector<ad::Var<T>> maps;
  for (const auto& a : attributes) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(a.shape().at(3)));
    auto x = ad::Permute(a, {1, 2, 0, 3});  // [P, H, T, D]
    auto scores = ad::Scale(ad::MatMul(x, ad::Transpose(x, -1, -2)), scale);
    maps.push_back(ad::Softmax(scores, -1));
  }
  return ad::Concat(std::span<const ad::Var<T>>(maps), 1);
}

template <typename T>
ad::Var<T> AffinityConv(ad::Var<T> m1, ad::Var<T> c1, ad::Var<T> c1_bias,
                        const TemporalGeometry& geometry) {
  if (m1.shape().size() != 4 || c1.shape().size() != 4 || m1.shape()[1] != c1.shape()[1]) {
    throw DimensionError(fmt::format("affinity_conv: M1 {} against C1 {}",
                                     ShapeString(m1.shape()), ShapeString(c1.shape())));
  }
  const std::size_t tp = geometry.reduced_frames();
  auto m2 = ad::Conv2d(m1, c1, c1_bias, geometry.padding, geometry.stride);  // [P, 1, T', T']
  return ad::Reshape(m2, {m1.shape()[0], tp, tp});
}

template <typename T>
ad::Var<T> ResidualMix(ad::Var<T> m2, ad::Var<T> w, ad::Var<T> bias) {
  const Shape& s = m2.shape();
  if (s.size() != 3) {
    throw DimensionError(fmt::format("residual_mix: M2 {}", ShapeString(s)));
  }
  auto flat = ad::Reshape(m2, {s[0], s[1] * s[2]});
  return ad::Add(flat, ad::Linear(flat, w, bias));
}

template <typename T>
ad::Var<T> SpatialAggregate(ad::Var<T> m3, ad::Var<T> c2, ad::Var<T> c2_bias,
                            const TemporalGeometry& geometry) {
  const std::size_t grid = geometry.grid();
  if (grid * grid != geometry.patches) {
    throw ConfigError(fmt::format("patch count {} is not a perfect square", geometry.patches));
  }
  const Shape& s = m3.shape();
  if (s.size() != 2 || s[0] != geometry.patches) {
    throw DimensionError(fmt::format("spatial_aggregate: M3 {} for {} patches", ShapeString(s),
                                     geometry.patches));
  }
  auto channels = ad::Reshape(ad::Transpose(m3, 0, 1), {s[1], grid, grid});
  auto m4 = ad::Conv2d(channels, c2, c2_bias, geometry.padding, geometry.stride);
  return ad::Reshape(m4, {NumElements(m4.shape())});
}

template <typename T>
TemporalResult<T> TemporalForward(ad::Graph<T>& g, const LayerAttributes& taps,
                                  std::span<const Attribute> gamma_set,
                                  const TemporalWeights<T>& weights,
                                  const TemporalGeometry& geometry) {
  std::vector<ad::Var<T>> attrs;
  for (Attribute a : gamma_set) attrs.push_back(g.Input(taps.attribute(a)));
  TemporalResult<T> r;
  r.m1 = PatchTemporalAttention(std::span<const ad::Var<T>>(attrs));
  r.m2 = AffinityConv(r.m1, weights.c1, weights.c1_bias, geometry);
  r.m3 = ResidualMix(r.m2, weights.w, weights.w_bias);
  r.embedding = SpatialAggregate(r.m3, weights.c2, weights.c2_bias, geometry);
  return r;
}

std::vector<Shape> TemporalParameterShapes(const TemporalGeometry& geometry) {
  geometry.Validate();
  const std::size_t tp = geometry.reduced_frames();
  const std::size_t k = geometry.kernel;
  return {{1, geometry.channels, k, k}, {1}, {tp * tp, tp * tp}, {tp * tp},
          {1, tp * tp, k, k},           {1}};
}

#define SIDENET_INSTANTIATE(T)                                                               \
  template ad::Var<T> PatchTemporalAttention(std::span<const ad::Var<T>>);                   \
  template ad::Var<T> PatchTemporalAttentionReference(std::span<const ad::Var<T>>);          \
  template ad::Var<T> AffinityConv(ad::Var<T>, ad::Var<T>, ad::Var<T>,                      \
                                   const TemporalGeometry&);                                 \
  template ad::Var<T> ResidualMix(ad::Var<T>, ad::Var<T>, ad::Var<T>);                       \
  template ad::Var<T> SpatialAggregate(ad::Var<T>, ad::Var<T>, ad::Var<T>,                  \
                                       const TemporalGeometry&);                             \
  template TemporalResult<T> TemporalForward(ad::Graph<T>&, const LayerAttributes&,          \
                                             std::span<const Attribute>,                     \
                                             const TemporalWeights<T>&,                      \
                                             const TemporalGeometry&);

SIDENET_INSTANTIATE(float)
SIDENET_INSTANTIATE(double)

#undef SIDENET_INSTANTIATE

}  // namespace sidenet
