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

#include "sidenet/dataset.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "sidenet/error.h"
#include "sidenet/rng.h"

namespace sidenet {
namespace {

std::vector<std::string> SplitTabs(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.emplace_back(line.substr(start, tab == std::string_view::npos ? line.npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

std::vector<std::uint8_t> ReadAll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void WriteAll(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(fmt::format("short write to {}", path.string()));
}

std::uint32_t GetU32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

void PutU32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

// Netpbm header token, skipping whitespace and comments.
std::string PnmToken(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
  return tok;
}

}  // namespace

const char* SplitName(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::vector<ManifestRecord> ParseManifest(std::string_view text, const std::string& source,
                                          const std::filesystem::path& base_dir,
                                          bool check_files) {
  std::vector<ManifestRecord> records;
  std::set<std::filesystem::path> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
    pos = nl == text.npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;

    auto fail = [&](const std::string& why) {
      return DataError(fmt::format("{}:{}: {}", source, line_no, why));
    };
    const auto fields = SplitTabs(line);
    if (fields.size() < 4 || fields.size() > 6) {
      throw fail(fmt::format("expected 4 to 6 tab-separated fields, got {}", fields.size()));
    }
    ManifestRecord r;
    r.line = line_no;
    r.clip_path = base_dir / fields[0];
    if (fields[1] == "real") {
      r.label = 0;
    } else if (fields[1] == "fake") {
      r.label = 1;
    } else {
      throw fail(fmt::format("unknown label '{}' (expected real or fake)", fields[1]));
    }
    r.video_id = fields[2];
    if (r.video_id.empty()) throw fail("empty video_id");
    if (fields[3] == "train") {
      r.split = Split::kTrain;
    } else if (fields[3] == "val") {
      r.split = Split::kVal;
    } else if (fields[3] == "test") {
      r.split = Split::kTest;
    } else {
      throw fail(fmt::format("unknown split '{}'", fields[3]));
    }
    if (fields.size() > 4 && !fields[4].empty()) r.landmark_path = base_dir / fields[4];
    if (fields.size() > 5) r.manipulation_tag = fields[5];

    if (!seen.insert(r.clip_path.lexically_normal()).second) {
      throw fail(fmt::format("duplicate clip path {}", fields[0]));
    }
    if (check_files) {
      if (!std::filesystem::exists(r.clip_path)) {
        throw fail(fmt::format("missing clip {}", r.clip_path.string()));
      }
      if (r.landmark_path && !std::filesystem::exists(*r.landmark_path)) {
        throw fail(fmt::format("missing landmark file {}", r.landmark_path->string()));
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<ManifestRecord> LoadManifest(const std::filesystem::path& path, bool check_files) {
  const auto bytes = ReadAll(path);
  return ParseManifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                       path.string(), path.parent_path(), check_files);
}

void SaveManifest(const std::filesystem::path& path, std::span<const ManifestRecord> records) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  const auto base = path.parent_path();
  out << "# clip_path\tlabel\tvideo_id\tsplit\tlandmark_path\tmanipulation_tag\n";
  for (const auto& r : records) {
    out << r.clip_path.lexically_relative(base).string() << '\t'
        << (r.label ? "fake" : "real") << '\t' << r.video_id << '\t' << SplitName(r.split)
        << '\t' << (r.landmark_path ? r.landmark_path->lexically_relative(base).string() : "")
        << '\t' << r.manipulation_tag << '\n';
  }
}

std::vector<ManifestRecord> FilterSplit(std::span<const ManifestRecord> records, Split split) {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(r);
  }
  return out;
}

std::vector<ManifestRecord> SubsampleVideos(std::span<const ManifestRecord> records,
                                            double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError(fmt::format("dataset_fraction must lie in (0, 1], got {}", fraction));
  }
  std::vector<std::pair<std::uint64_t, std::string>> ranked;
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (ids.insert(r.video_id).second) {
      ranked.emplace_back(Fnv1a64(r.video_id, DeriveSeed(seed, 0x5u)), r.video_id);
    }
  }
  std::sort(ranked.begin(), ranked.end());
  const auto keep_count = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(ranked.size()) - 1e-9));
  std::set<std::string> keep;
  for (std::size_t i = 0; i < keep_count && i < ranked.size(); ++i) keep.insert(ranked[i].second);
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    if (keep.count(r.video_id)) out.push_back(r);
  }
  return out;
}

std::vector<ManifestRecord> ExcludeManipulation(std::span<const ManifestRecord> records,
                                                const std::string& tag) {
  std::vector<ManifestRecord> out;
  for (const auto& r : records) {
    const bool drop = !tag.empty() && r.label == 1 && r.manipulation_tag == tag &&
                      r.split != Split::kTest;
    if (!drop) out.push_back(r);
  }
  return out;
}

Clip ReadPackedClip(const std::filesystem::path& path) {
  const auto bytes = ReadAll(path);
  if (bytes.size() < 12) throw DataError(fmt::format("{}: truncated clip header", path.string()));
  const std::size_t count = GetU32(bytes.data()), h = GetU32(bytes.data() + 4),
                    w = GetU32(bytes.data() + 8);
  const std::size_t frame_bytes = h * w * 3;
  if (h == 0 || w == 0 || bytes.size() != 12 + count * frame_bytes) {
    throw DataError(fmt::format("{}: header says {} frames of {}x{} but payload is {} bytes",
                                path.string(), count, h, w, bytes.size() - 12));
  }
  Clip clip(count, Frame(h, w));
  for (std::size_t i = 0; i < count; ++i) {
    std::memcpy(clip[i].rgb.data(), bytes.data() + 12 + i * frame_bytes, frame_bytes);
  }
  return clip;
}

void WritePackedClip(const std::filesystem::path& path, const Clip& clip) {
  std::vector<std::uint8_t> out;
  const std::size_t h = clip.empty() ? 0 : clip[0].height, w = clip.empty() ? 0 : clip[0].width;
  PutU32(out, static_cast<std::uint32_t>(clip.size()));
  PutU32(out, static_cast<std::uint32_t>(h));
  PutU32(out, static_cast<std::uint32_t>(w));
  for (const Frame& f : clip) {
    if (f.height != h || f.width != w) throw DataError("clip frames differ in size");
    out.insert(out.end(), f.rgb.begin(), f.rgb.end());
  }
  WriteAll(path, out);
}

Frame ReadPpm(const std::filesystem::path& path) {
  const auto bytes = ReadAll(path);
  std::size_t pos = 0;
  const std::string magic = PnmToken(bytes, pos);
  const std::string ws = PnmToken(bytes, pos), hs = PnmToken(bytes, pos),
                    ms = PnmToken(bytes, pos);
  std::size_t w = 0, h = 0;
  try {
    w = std::stoul(ws);
    h = std::stoul(hs);
    if (magic != "P6" || ms != "255") throw std::invalid_argument("format");
  } catch (const std::exception&) {
    throw DataError(fmt::format("{}: not an 8-bit binary PPM", path.string()));
  }
  ++pos;  // single whitespace after maxval
  Frame f(h, w);
  if (bytes.size() < pos + f.rgb.size()) {
    throw DataError(fmt::format("{}: truncated PPM payload", path.string()));
  }
  std::memcpy(f.rgb.data(), bytes.data() + pos, f.rgb.size());
  return f;
}

void WritePpm(const std::filesystem::path& path, const Frame& frame) {
  const std::string header = fmt::format("P6\n{} {}\n255\n", frame.width, frame.height);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), frame.rgb.begin(), frame.rgb.end());
  WriteAll(path, out);
}

void WritePgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
              std::span<const std::uint8_t> pixels) {
  const std::string header = fmt::format("P5\n{} {}\n255\n", width, height);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  WriteAll(path, out);
}

Clip ReadFrameDirectory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError(fmt::format("{}: no .ppm frames", dir.string()));
  Clip clip;
  for (const auto& f : files) {
    clip.push_back(ReadPpm(f));
    if (clip.back().height != clip[0].height || clip.back().width != clip[0].width) {
      throw DataError(fmt::format("{}: frame size differs from the first frame", f.string()));
    }
  }
  return clip;
}

void WriteFrameDirectory(const std::filesystem::path& dir, const Clip& clip) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < clip.size(); ++i) {
    WritePpm(dir / fmt::format("frame_{:05}.ppm", i), clip[i]);
  }
}

Clip ReadClip(const std::filesystem::path& path) {
  return std::filesystem::is_directory(path) ? ReadFrameDirectory(path) : ReadPackedClip(path);
}

std::vector<Video> LoadVideos(std::span<const ManifestRecord> records, double fps) {
  std::vector<Video> videos;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    auto [it, fresh] = index.try_emplace(r.video_id, videos.size());
    if (fresh) {
      videos.emplace_back();
      videos.back().id = r.video_id;
      videos.back().label = r.label;
      videos.back().fps = fps;
      videos.back().manipulation_tag = r.manipulation_tag;
    }
    Video& v = videos[it->second];
    if (v.label != r.label) {
      throw DataError(fmt::format("line {}: video {} mixes real and fake clips", r.line, r.video_id));
    }
    Clip clip = ReadClip(r.clip_path);
    if (!v.frames.empty() && (clip[0].height != v.frames[0].height ||
                              clip[0].width != v.frames[0].width)) {
      throw DataError(fmt::format("line {}: clip size differs within video {}", r.line, r.video_id));
    }
    if (r.landmark_path) {
      auto lm = LoadLandmarks(*r.landmark_path);
      if (lm.size() != clip.size()) {
        throw DataError(fmt::format("line {}: {} landmark frames for {} clip frames", r.line,
                                    lm.size(), clip.size()));
      }
      if (v.landmarks.size() != v.frames.size()) {
        throw DataError(fmt::format("line {}: video {} has landmarks for only some clips", r.line,
                                    r.video_id));
      }
      v.landmarks.insert(v.landmarks.end(), lm.begin(), lm.end());
    } else if (!v.landmarks.empty()) {
      throw DataError(fmt::format("line {}: video {} has landmarks for only some clips", r.line,
                                  r.video_id));
    }
    v.frames.insert(v.frames.end(), std::make_move_iterator(clip.begin()),
                    std::make_move_iterator(clip.end()));
  }
  return videos;
}

std::vector<MiningSample> MiningSamples(std::span<const Video> videos, std::size_t per_video) {
  std::vector<MiningSample> out;
  for (const Video& v : videos) {
    if (v.landmarks.empty() || per_video == 0) continue;
    const std::size_t n = v.frames.size(), k = std::min(per_video, n);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t t = i * n / k;
      out.push_back({v.frames[t], v.landmarks[t]});
    }
  }
  return out;
}

}  // namespace sidenet
