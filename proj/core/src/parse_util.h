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
#include <vector>

#include "sidenet/vit_encoder.h"

namespace sidenet::detail {

// Value parsers for key = value settings; all throw ConfigError naming `key`.
bool ParseBool(const std::string& key, const std::string& v);
std::size_t ParseCount(const std::string& key, const std::string& v);
double ParseReal(const std::string& key, const std::string& v);
// Comma-separated "q,k,v" subsets.
std::vector<Attribute> ParseAttributeList(const std::string& v);
std::string AttributeListString(const std::vector<Attribute>& list);
// Shortest text that parses back to the same double.
std::string ExactReal(double v);

}  // namespace sidenet::detail
