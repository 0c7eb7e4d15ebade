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

#include "sidenet/image.h"

namespace sidenet {

// Baseline JPEG through libjpeg, 4:2:0 chroma, quality 1..100.
std::vector<std::uint8_t> EncodeJpeg(const Frame& frame, int quality);
Frame DecodeJpeg(std::span<const std::uint8_t> bytes);

inline Frame JpegRoundTrip(const Frame& frame, int quality) {
  return DecodeJpeg(EncodeJpeg(frame, quality));
}

}  // namespace sidenet
