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

#include "sidenet/archive.h"

#include <bit>
#include <cstring>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

constexpr const char* kFormat = "sidenet-tensor-archive";

void AppendU64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t ReadU64(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes[at + i]} << (8 * i);
  return v;
}

}  // namespace

void TensorArchive::Put(std::string name, TensorF tensor) {
  if (name.empty()) throw ConfigError("archive tensor names must be non-empty");
  tensors_.insert_or_assign(std::move(name), std::move(tensor));
}

bool TensorArchive::Contains(const std::string& name) const {
  return tensors_.count(name) != 0;
}

const TensorF& TensorArchive::Get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw DataError(fmt::format("load error: missing tensor '{}'", name));
  }
  return it->second;
}

const TensorF& TensorArchive::Get(const std::string& name,
                                  const Shape& expected) const {
  const TensorF& t = Get(name);
  if (t.shape() != expected) {
    throw DataError(fmt::format(
        "load error: tensor '{}' has shape {}, expected {}", name,
        ShapeString(t.shape()), ShapeString(expected)));
  }
  return t;
}

void TensorArchive::Erase(const std::string& name) { tensors_.erase(name); }

std::vector<std::string> TensorArchive::Names() const {
  std::vector<std::string> names;
  for (const auto& [n, t] : tensors_) names.push_back(n);
  return names;
}

const std::string& TensorArchive::Meta(const std::string& key) const {
  auto it = metadata_.find(key);
  if (it == metadata_.end()) {
    throw DataError(fmt::format("load error: missing metadata key '{}'", key));
  }
  return it->second;
}

std::vector<std::uint8_t> TensorArchive::Serialize() const {
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = 1;
  header["metadata"] = nlohmann::json::object();
  for (const auto& [k, v] : metadata_) header["metadata"][k] = v;
  header["tensors"] = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors_) {
    const std::uint64_t length = t.size() * sizeof(float);
    header["tensors"][name] = {{"dtype", "f32"},
                               {"shape", t.shape()},
                               {"offset", offset},
                               {"length", length}};
    offset += length;
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + text.size() + offset);
  AppendU64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  for (const auto& [name, t] : tensors_) {
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), raw, raw + t.size() * sizeof(float));
  }
  const std::uint64_t checksum = Fnv1a64(
      std::span<const std::uint8_t>(out.data() + payload_start, out.size() - payload_start));
  AppendU64(out, checksum);
  return out;
}

TensorArchive TensorArchive::Deserialize(std::span<const std::uint8_t> bytes,
                                         const std::string& source) {
  auto fail = [&](const std::string& why) {
    return DataError(fmt::format("load error in {}: {}", source, why));
  };
  if (bytes.size() < 16) throw fail("file too short");
  const std::uint64_t header_len = ReadU64(bytes, 0);
  if (header_len > bytes.size() - 16) throw fail("header length exceeds file size");
  const std::size_t payload_start = 8 + header_len;
  const std::size_t payload_len = bytes.size() - 8 - payload_start;
  const auto payload = bytes.subspan(payload_start, payload_len);
  const std::uint64_t stored = ReadU64(bytes, bytes.size() - 8);
  const std::uint64_t actual = Fnv1a64(payload);
  if (stored != actual) {
    throw fail(fmt::format("checksum mismatch (stored {:016x}, computed {:016x})",
                           stored, actual));
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + payload_start);
  } catch (const nlohmann::json::exception& e) {
    throw fail(fmt::format("malformed header: {}", e.what()));
  }
  if (header.value("format", "") != kFormat) throw fail("not a tensor archive");

  TensorArchive archive;
  try {
    for (const auto& [k, v] : header.at("metadata").items()) {
      archive.metadata_[k] = v.get<std::string>();
    }
    for (const auto& [name, entry] : header.at("tensors").items()) {
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw fail(fmt::format("tensor '{}' has unsupported dtype", name));
      }
      Shape shape = entry.at("shape").get<Shape>();
      const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
      const std::uint64_t length = entry.at("length").get<std::uint64_t>();
      if (length != NumElements(shape) * sizeof(float)) {
        throw fail(fmt::format("tensor '{}': {} bytes for shape {}", name, length,
                               ShapeString(shape)));
      }
      if (offset > payload_len || length > payload_len - offset) {
        throw fail(fmt::format("tensor '{}' extends past the payload", name));
      }
      std::vector<float> data(NumElements(shape));
      std::memcpy(data.data(), payload.data() + offset, length);
      archive.tensors_.emplace(name, TensorF(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw fail(fmt::format("malformed header: {}", e.what()));
  }
  return archive;
}

void TensorArchive::Save(const std::filesystem::path& path) const {
  const auto bytes = Serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(fmt::format("short write to {}", path.string()));
}

TensorArchive TensorArchive::Load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("load error: cannot open {}", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return Deserialize(bytes, path.string());
}

}  // namespace sidenet
