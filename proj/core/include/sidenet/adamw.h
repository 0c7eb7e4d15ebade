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
#include <span>
#include <vector>

#include "sidenet/params.h"
#include "sidenet/tensor.h"

namespace sidenet {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-3;
  double eps = 1e-8;
};

// AdamW with decoupled weight decay: the decay shrinks the parameter
// directly and never enters the moment estimates.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  // One update of every parameter in `params` with the matching entry of
  // `grads`. Throws NumericalError naming the parameter on a NaN gradient.
  void Step(ParamSet& params, std::span<const TensorF> grads);

  const AdamWOptions& options() const { return options_; }
  std::uint64_t step() const { return step_; }
  const std::vector<TensorF>& first_moment() const { return m_; }
  const std::vector<TensorF>& second_moment() const { return v_; }

  // Restores a saved state; moments are matched to parameters by position.
  void Restore(std::uint64_t step, std::vector<TensorF> m, std::vector<TensorF> v);

 private:
  AdamWOptions options_;
  std::uint64_t step_ = 0;
  std::vector<TensorF> m_;
  std::vector<TensorF> v_;
};

}  // namespace sidenet
