// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cgsd/numkit.hpp"

namespace cgsd {

struct Dataset {
  int n = 0;
  int d_in = 0;
  int k = 0;
  Matrix features;  // n × d_in
  std::vector<int> labels;
  std::string domain_tag;  // "source" or "target"
  std::uint64_t seed = 0;

  std::vector<int> class_counts() const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Parameters of the synthetic ordinal benchmark. Class j has mean
/// j·separation along the first axis, so `separation` is the gap between
/// adjacent grades in units of the noise scale when noise = 1.
struct SyntheticConfig {
  int n = 3662;
  int d_in = 64;
  int k = 5;
  std::uint64_t seed = 42;
  std::vector<double> proportions{0.50, 0.10, 0.27, 0.05, 0.08};
  double separation = 4.0;
  double noise = 1.0;
  double shift_angle = 0.5;
  double shift_bias = 0.5;
};

void validate(const SyntheticConfig& cfg);

/// Largest-remainder apportionment of n slots; ties go to the smaller index.
std::vector<int> apportion(int n, std::span<const double> proportions);

struct DomainPair {
  Dataset source;
  Dataset target;
};

DomainPair gen_synthetic(const SyntheticConfig& cfg);

/// Rotation by `angle` in the (e1, e2) plane, composed with a rotation by the
/// same angle in a seeded random 2-plane orthogonal to it (when d_in ≥ 4),
/// followed by a translation of `bias` along −e1.
Matrix apply_domain_shift(const Matrix& features, double angle, double bias, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

Split stratified_split(const Dataset& ds, double train_fraction, std::uint64_t seed);

/// CSV (`label,f0,...`) plus `<path>.meta.json` sidecar.
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

/// `<dir>/source.csv` and `<dir>/target.csv`.
void write_benchmark(const std::filesystem::path& dir, const DomainPair& pair);
DomainPair read_benchmark(const std::filesystem::path& dir);

}  // namespace cgsd
