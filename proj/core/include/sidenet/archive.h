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
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sidenet/tensor.h"

namespace sidenet {

// Named tensor archive.
//
// Layout (all integers little-endian):
//   u64      header length in bytes
//   bytes    UTF-8 JSON header:
//              {"format": "sidenet-tensor-archive", "version": 1,
//               "metadata": {string: string, ...},
//               "tensors": {name: {"dtype": "f32", "shape": [...],
//                                  "offset": o, "length": n}, ...}}
//            keys sorted, no whitespace; offsets are relative to the start
//            of the payload region
//   bytes    payload: raw little-endian row-major f32 data, tensors in
//            name order, no padding
//   u64      FNV-1a 64 checksum of the payload region
//
// Serialization is deterministic, so load -> save reproduces every byte.
class TensorArchive {
 public:
  void Put(std::string name, TensorF tensor);
  bool Contains(const std::string& name) const;
  // Throws DataError naming the tensor when it is absent.
  const TensorF& Get(const std::string& name) const;
  // Get() plus a shape check that reports expected and actual extents.
  const TensorF& Get(const std::string& name, const Shape& expected) const;
  void Erase(const std::string& name);
  std::vector<std::string> Names() const;
  std::size_t size() const { return tensors_.size(); }

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  // Throws DataError when the key is absent.
  const std::string& Meta(const std::string& key) const;

  std::vector<std::uint8_t> Serialize() const;
  static TensorArchive Deserialize(std::span<const std::uint8_t> bytes,
                                   const std::string& source = "<memory>");

  void Save(const std::filesystem::path& path) const;
  static TensorArchive Load(const std::filesystem::path& path);

 private:
  std::map<std::string, TensorF> tensors_;
  std::map<std::string, std::string> metadata_;
};

}  // namespace sidenet
