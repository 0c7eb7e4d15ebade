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

#include "parse_util.h"

#include <algorithm>

#include <fmt/format.h>

#include "sidenet/error.h"

namespace sidenet::detail {

bool ParseBool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(fmt::format("{}: expected a boolean, got '{}'", key, v));
}

std::size_t ParseCount(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw ConfigError(fmt::format("{}: expected a non-negative integer, got '{}'", key, v));
  }
}

double ParseReal(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, v));
  }
}

std::vector<Attribute> ParseAttributeList(const std::string& v) {
  std::vector<Attribute> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = std::min(v.find(',', start), v.size());
    std::string item = v.substr(start, comma - start);
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (!item.empty()) out.push_back(ParseAttribute(item));
    start = comma + 1;
  }
  return out;
}

std::string AttributeListString(const std::vector<Attribute>& list) {
  std::string out;
  for (Attribute a : list) {
    if (!out.empty()) out += ',';
    out += AttributeName(a);
  }
  return out;
}

std::string ExactReal(double v) { return fmt::format("{}", v); }

}  // namespace sidenet::detail
