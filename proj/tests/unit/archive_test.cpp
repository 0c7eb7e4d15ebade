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

#include <cstring>
#include <filesystem>

#include <gtest/gtest.h>
#include <json.hpp>

#include "sidenet/archive.h"
#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

void PutU64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// Builds an archive by hand from the documented layout, without going
// through TensorArchive::Serialize.
std::vector<std::uint8_t> HandBuiltArchive() {
  const std::vector<float> a{1.f, -2.f, 3.5f, 0.f, 7.f, 8.f};
  const std::vector<float> b{0.25f};
  nlohmann::json header = {
      {"format", "sidenet-tensor-archive"},
      {"version", 1},
      {"metadata", {{"heads", "4"}}},
      {"tensors",
       {{"alpha", {{"dtype", "f32"}, {"shape", {2, 3}}, {"offset", 0}, {"length", 24}}},
        {"beta", {{"dtype", "f32"}, {"shape", {1}}, {"offset", 24}, {"length", 4}}}}}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  PutU64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  std::vector<std::uint8_t> payload(28);
  std::memcpy(payload.data(), a.data(), 24);
  std::memcpy(payload.data() + 24, b.data(), 4);
  out.insert(out.end(), payload.begin(), payload.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t c : payload) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  PutU64(out, h);
  return out;
}

TEST(Archive, ReadsHandBuiltLayout) {
  const auto bytes = HandBuiltArchive();
  const auto archive = TensorArchive::Deserialize(bytes);
  EXPECT_EQ(archive.Get("alpha", {2, 3}).vec(), (std::vector<float>{1, -2, 3.5f, 0, 7, 8}));
  EXPECT_EQ(archive.Get("beta")[0], 0.25f);
  EXPECT_EQ(archive.Meta("heads"), "4");
}

TEST(Archive, SerializationIsByteExact) {
  const auto bytes = HandBuiltArchive();
  EXPECT_EQ(TensorArchive::Deserialize(bytes).Serialize(), bytes);
}

TEST(Archive, RoundTripThroughFile) {
  Rng rng(3);
  TensorArchive a;
  TensorF t({3, 4, 5});
  for (float& v : t.data()) v = static_cast<float>(rng.Normal());
  a.Put("layer0/wq", t);
  a.Put("scalar", TensorF::Scalar(2.f));
  a.metadata()["activation"] = "gelu";
  const auto path = std::filesystem::temp_directory_path() / "sidenet_archive_roundtrip.bin";
  a.Save(path);
  const auto b = TensorArchive::Load(path);
  EXPECT_EQ(b.Get("layer0/wq"), t);
  EXPECT_EQ(b.Get("scalar").shape(), Shape{});
  EXPECT_EQ(b.Serialize(), a.Serialize());
  std::filesystem::remove(path);
}

TEST(Archive, CorruptPayloadFailsChecksum) {
  auto bytes = HandBuiltArchive();
  bytes[bytes.size() - 12] ^= 0x40;
  EXPECT_THROW(TensorArchive::Deserialize(bytes), DataError);
}

TEST(Archive, TruncatedFileIsDataError) {
  auto bytes = HandBuiltArchive();
  bytes.resize(bytes.size() - 9);
  EXPECT_THROW(TensorArchive::Deserialize(bytes), DataError);
  EXPECT_THROW(TensorArchive::Deserialize(std::span<const std::uint8_t>(bytes.data(), 5)),
               DataError);
}

TEST(Archive, MissingTensorAndShapeMismatchAreNamed) {
  const auto archive = TensorArchive::Deserialize(HandBuiltArchive());
  try {
    archive.Get("gamma");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("gamma"), std::string::npos);
  }
  try {
    archive.Get("alpha", {3, 2});
    FAIL();
  } catch (const DataError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("[2, 3]"), std::string::npos) << what;
    EXPECT_NE(what.find("[3, 2]"), std::string::npos) << what;
  }
}

}  // namespace
}  // namespace sidenet
