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

#include "sidenet/params.h"

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet {

void ParamSet::Add(std::string name, TensorF value) {
  if (Contains(name)) throw ConfigError(fmt::format("duplicate parameter {}", name));
  entries_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::Contains(std::string_view name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ParamSet::IndexOf(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == name) return i;
  }
  throw ConfigError(fmt::format("unknown parameter {}", name));
}

TensorF& ParamSet::at(std::string_view name) { return entries_[IndexOf(name)].second; }

const TensorF& ParamSet::at(std::string_view name) const {
  return entries_[IndexOf(name)].second;
}

std::size_t ParamSet::ElementCount() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += v.size();
  return n;
}

}  // namespace sidenet
