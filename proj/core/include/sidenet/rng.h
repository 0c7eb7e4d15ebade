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
#include <string_view>
#include <vector>

namespace sidenet {

// Counter-based 64-bit generator. The n-th draw is a pure function of
// (key, n), so a stream can be checkpointed as two integers and forked
// into independent sub-streams without sharing state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : key_(Mix(seed ^ 0x9e3779b97f4a7c15ULL)), counter_(counter) {}

  std::uint64_t NextU64() { return Mix(key_ + Mix(counter_++)); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double Uniform() { return static_cast<double>(NextU64() >> 11) * 0x1.0p-53; }
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t Below(std::uint64_t n);

  bool Bernoulli(double p) { return Uniform() < p; }

  // Standard normal via Box-Muller; consumes two draws per call.
  double Normal();
  double Normal(double mean, double stddev) { return mean + stddev * Normal(); }

  // Independent stream keyed on (this stream's key, stream_id).
  Rng Fork(std::uint64_t stream_id) const;

  template <typename T>
  void Shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(Below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t counter() const { return counter_; }
  std::uint64_t key() const { return key_; }

  static Rng FromState(std::uint64_t key, std::uint64_t counter);

  // SplitMix64 finalizer.
  static constexpr std::uint64_t Mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

// Seed for item `index` of a parallelizable job, derived from the global seed.
std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t index);

// 64-bit FNV-1a.
std::uint64_t Fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t state = 0xcbf29ce484222325ULL);
std::uint64_t Fnv1a64(std::string_view text,
                      std::uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace sidenet
