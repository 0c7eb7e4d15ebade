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

#include "sidenet/rng.h"

#include <cmath>
#include <numbers>
#include <string_view>

namespace sidenet {

std::uint64_t Rng::Below(std::uint64_t n) {
  // Rejection keeps the draw unbiased; the loop almost never repeats.
  const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
  std::uint64_t x;
  do {
    x = NextU64();
  } while (x >= limit);
  return x % n;
}

double Rng::Normal() {
  double u1 = Uniform();
  const double u2 = Uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::Fork(std::uint64_t stream_id) const {
  return FromState(Mix(key_ ^ Mix(stream_id + 0x632be59bd9b4e019ULL)), 0);
}

Rng Rng::FromState(std::uint64_t key, std::uint64_t counter) {
  Rng r;
  r.key_ = key;
  r.counter_ = counter;
  return r;
}

std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t index) {
  return Rng::Mix(Rng::Mix(seed) ^ Rng::Mix(index + 0x2545f4914f6cdd1dULL));
}

std::uint64_t Fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t state) {
  for (std::uint8_t b : bytes) {
    state ^= b;
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::uint64_t Fnv1a64(std::string_view text, std::uint64_t state) {
  return Fnv1a64(std::span<const std::uint8_t>(
                     reinterpret_cast<const std::uint8_t*>(text.data()),
                     text.size()),
                 state);
}

}  // namespace sidenet
