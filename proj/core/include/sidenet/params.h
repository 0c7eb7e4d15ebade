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

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sidenet/tensor.h"

namespace sidenet {

// Ordered collection of named trainable tensors. Order is insertion order and
// is part of the checkpoint contract (optimizer state is matched by name).
class ParamSet {
 public:
  void Add(std::string name, TensorF value);

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  TensorF& value(std::size_t i) { return entries_[i].second; }
  const TensorF& value(std::size_t i) const { return entries_[i].second; }

  bool Contains(std::string_view name) const;
  TensorF& at(std::string_view name);
  const TensorF& at(std::string_view name) const;
  std::size_t IndexOf(std::string_view name) const;

  // Total number of scalar parameters.
  std::size_t ElementCount() const;

 private:
  std::vector<std::pair<std::string, TensorF>> entries_;
};

}  // namespace sidenet
