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

#include "sidenet/adamw.h"

#include <cmath>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {

void AdamW::Step(ParamSet& params, std::span<const TensorF> grads) {
  if (grads.size() != params.size()) {
    throw DimensionError(fmt::format("adamw: {} gradients for {} parameters",
                                     grads.size(), params.size()));
  }
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params.value(i).shape());
      v_.emplace_back(params.value(i).shape());
    }
  }
  if (m_.size() != params.size()) {
    throw DimensionError("adamw: optimizer state does not match parameter set");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape() ||
        m_[i].shape() != params.value(i).shape()) {
      throw DimensionError(fmt::format(
          "adamw: gradient {} for parameter {} of shape {}",
          ShapeString(grads[i].shape()), params.name(i),
          ShapeString(params.value(i).shape())));
    }
    for (float g : grads[i].data()) {
      if (std::isnan(g)) {
        throw NumericalError(
            fmt::format("adamw: NaN gradient for parameter {}", params.name(i)));
      }
    }
  }

  ++step_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double bias1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = 1.0 - options_.lr * options_.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double m_hat = mj / bias1;
      const double v_hat = vj / bias2;
      const double updated =
          p[j] * decay - options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      p[j] = static_cast<float>(updated);
    }
  }
}

void AdamW::Restore(std::uint64_t step, std::vector<TensorF> m,
                    std::vector<TensorF> v) {
  if (m.size() != v.size()) throw DimensionError("adamw: moment count mismatch");
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace sidenet
