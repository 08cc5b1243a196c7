// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace cgsd {

/// Seeded generator. Substreams are derived from (seed, keys...) so that a
/// consumer keyed by e.g. item index draws the same numbers regardless of
/// the order or thread in which items are processed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { reseed({seed}); }

  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
    std::vector<std::uint64_t> words{seed, 0x9e3779b97f4a7c15ULL};
    words.insert(words.end(), keys.begin(), keys.end());
    Rng rng;
    rng.reseed(words);
    return rng;
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  Rng() = default;

  void reseed(const std::vector<std::uint64_t>& words) {
    std::vector<std::uint32_t> halves;
    halves.reserve(words.size() * 2);
    for (auto w : words) {
      halves.push_back(static_cast<std::uint32_t>(w & 0xffffffffULL));
      halves.push_back(static_cast<std::uint32_t>(w >> 32));
    }
    std::seed_seq seq(halves.begin(), halves.end());
    engine_.seed(seq);
    normal_.reset();
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace cgsd
