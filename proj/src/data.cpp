// SPDX-License-Identifier: Apache-2.0

#include "cgsd/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cgsd/digest.hpp"
#include "cgsd/errors.hpp"
#include "cgsd/rng.hpp"

namespace cgsd {

using nlohmann::json;

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.n = static_cast<int>(indices.size());
  out.d_in = d_in;
  out.k = k;
  out.features = features.select_rows(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  out.domain_tag = domain_tag;
  out.seed = seed;
  return out;
}

void validate(const SyntheticConfig& cfg) {
  if (cfg.k < 2) throw ConfigError("synthetic: k must be at least 2");
  if (cfg.d_in < 2) throw ConfigError("synthetic: d_in must be at least 2");
  if (cfg.n < cfg.k) {
    throw ConfigError("synthetic: n=" + std::to_string(cfg.n) + " is smaller than k=" + std::to_string(cfg.k));
  }
  if (cfg.proportions.size() != static_cast<std::size_t>(cfg.k)) {
    throw ConfigError("synthetic: expected " + std::to_string(cfg.k) + " proportions, got " +
                      std::to_string(cfg.proportions.size()));
  }
  double total = 0.0;
  for (double p : cfg.proportions) {
    if (!(p >= 0.0)) throw ConfigError("synthetic: proportions must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("synthetic: proportions must sum to 1");
  if (!(cfg.noise > 0.0)) throw ConfigError("synthetic: noise scale must be positive");
  if (!std::isfinite(cfg.separation) || !std::isfinite(cfg.shift_angle) || !std::isfinite(cfg.shift_bias)) {
    throw ConfigError("synthetic: non-finite parameter");
  }
}

std::vector<int> apportion(int n, std::span<const double> proportions) {
  std::vector<int> counts(proportions.size(), 0);
  std::vector<double> remainder(proportions.size(), 0.0);
  int assigned = 0;
  for (std::size_t j = 0; j < proportions.size(); ++j) {
    const double quota = n * proportions[j];
    // The small guard keeps exact quotas like 0.1·50 = 5 from flooring to 4.
    const double fl = std::floor(quota + 1e-9);
    counts[j] = static_cast<int>(fl);
    remainder[j] = quota - fl;
    assigned += counts[j];
  }
  std::vector<std::size_t> order(proportions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % order.size()]];
  return counts;
}

namespace {

Matrix draw_features(const SyntheticConfig& cfg, std::span<const int> labels, Rng& rng) {
  Matrix x(labels.size(), static_cast<std::size_t>(cfg.d_in));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = x.row(i);
    for (double& v : row) v = cfg.noise * rng.normal();
    row[0] += labels[i] * cfg.separation;
  }
  return x;
}

std::vector<int> shuffled_labels(std::span<const int> counts, Rng& rng) {
  std::vector<int> labels;
  for (std::size_t j = 0; j < counts.size(); ++j) labels.insert(labels.end(), counts[j], static_cast<int>(j));
  std::shuffle(labels.begin(), labels.end(), rng.engine());
  return labels;
}

void rotate_plane(Matrix& x, std::span<const double> p, std::span<const double> q, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      a += row[j] * p[j];
      b += row[j] * q[j];
    }
    const double da = (c * a - s * b) - a;
    const double db = (s * a + c * b) - b;
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += da * p[j] + db * q[j];
  }
}

}  // namespace

DomainPair gen_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  const std::vector<int> counts = apportion(cfg.n, cfg.proportions);

  auto make = [&](std::uint64_t stream, const char* tag) {
    Rng rng = Rng::stream(cfg.seed, {stream});
    Dataset ds;
    ds.n = cfg.n;
    ds.d_in = cfg.d_in;
    ds.k = cfg.k;
    ds.labels = shuffled_labels(counts, rng);
    ds.features = draw_features(cfg, ds.labels, rng);
    ds.domain_tag = tag;
    ds.seed = cfg.seed;
    return ds;
  };

  DomainPair pair{make(1, "source"), make(2, "target")};
  pair.target.features = apply_domain_shift(pair.target.features, cfg.shift_angle, cfg.shift_bias, cfg.seed);
  return pair;
}

Matrix apply_domain_shift(const Matrix& features, double angle, double bias, std::uint64_t seed) {
  const std::size_t d = features.cols();
  if (d < 2) throw ConfigError("domain shift needs at least 2 feature dimensions");
  Matrix out = features;
  std::vector<double> e1(d, 0.0), e2(d, 0.0);
  e1[0] = 1.0;
  e2[1] = 1.0;
  if (angle != 0.0) rotate_plane(out, e1, e2, angle);

  if (d >= 4 && angle != 0.0) {
    // Gram-Schmidt of two Gaussian vectors restricted to coordinates ≥ 2.
    Rng rng = Rng::stream(seed, {3});
    std::vector<double> p(d, 0.0), q(d, 0.0);
    for (std::size_t j = 2; j < d; ++j) p[j] = rng.normal();
    for (std::size_t j = 2; j < d; ++j) q[j] = rng.normal();
    auto normalize = [](std::vector<double>& v) {
      double n = 0.0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      for (double& x : v) x /= n;
    };
    normalize(p);
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += p[j] * q[j];
    for (std::size_t j = 0; j < d; ++j) q[j] -= dot * p[j];
    normalize(q);
    rotate_plane(out, p, q, angle);
  }

  if (bias != 0.0) {
    for (std::size_t i = 0; i < out.rows(); ++i) out(i, 0) -= bias;
  }
  return out;
}

Split stratified_split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("split: train fraction must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(ds.k));
  for (std::size_t i = 0; i < ds.labels.size(); ++i) members[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (std::size_t j = 0; j < members.size(); ++j) {
    if (members[j].empty()) throw DataError("split: class " + std::to_string(j) + " has no samples");
  }

  std::vector<int> take(members.size());
  std::vector<double> remainder(members.size());
  long assigned = 0;
  for (std::size_t j = 0; j < members.size(); ++j) {
    const double quota = static_cast<double>(members[j].size()) * train_fraction;
    const double fl = std::floor(quota + 1e-9);
    take[j] = static_cast<int>(fl);
    remainder[j] = quota - fl;
    assigned += take[j];
  }
  const long target = std::lround(static_cast<double>(ds.labels.size()) * train_fraction);
  std::vector<std::size_t> order(members.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < target && i < order.size(); ++i) {
    const std::size_t j = order[i];
    if (static_cast<std::size_t>(take[j]) < members[j].size() && remainder[j] > 1e-9) {
      ++take[j];
      ++assigned;
    }
  }

  Split split;
  for (std::size_t j = 0; j < members.size(); ++j) {
    Rng rng = Rng::stream(seed, {0x5b17ULL, j});
    std::vector<std::size_t> idx = members[j];
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + take[j]);
    split.test.insert(split.test.end(), idx.begin() + take[j], idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// ---- file I/O --------------------------------------------------------------

namespace {

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  throw ParseError(what + " at line " + std::to_string(line) + " of " + path.string());
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.features.rows() != static_cast<std::size_t>(ds.n) || ds.labels.size() != static_cast<std::size_t>(ds.n) ||
      ds.features.cols() != static_cast<std::size_t>(ds.d_in)) {
    throw DataError("write_dataset: dataset shape is inconsistent");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "label";
  for (int j = 0; j < ds.d_in; ++j) out << ",f" << j;
  out << '\n';
  for (int i = 0; i < ds.n; ++i) {
    out << ds.labels[static_cast<std::size_t>(i)];
    for (double v : ds.features.row(static_cast<std::size_t>(i))) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());

  json meta{{"n", ds.n}, {"d_in", ds.d_in}, {"k", ds.k}, {"domain_tag", ds.domain_tag}, {"seed", ds.seed}};
  std::ofstream side(sidecar_path(path), std::ios::binary);
  side << meta.dump(2) << '\n';
  if (!side) throw DataError("failed writing " + sidecar_path(path).string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  const auto meta_path = sidecar_path(path);
  if (!std::filesystem::exists(meta_path)) {
    throw DataError("metadata not found: " + meta_path.string());
  }
  Dataset ds;
  try {
    std::ifstream side(meta_path);
    const json meta = json::parse(side);
    ds.n = meta.at("n").get<int>();
    ds.d_in = meta.at("d_in").get<int>();
    ds.k = meta.at("k").get<int>();
    ds.domain_tag = meta.at("domain_tag").get<std::string>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ParseError("bad metadata in " + meta_path.string() + ": " + e.what());
  }
  if (ds.n < 0 || ds.d_in < 1 || ds.k < 1) throw ParseError("bad metadata values in " + meta_path.string());

  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) parse_fail(path, line_no, "missing header");
  std::string expected = "label";
  for (int j = 0; j < ds.d_in; ++j) expected += ",f" + std::to_string(j);
  if (line != expected) parse_fail(path, line_no, "header mismatch");

  ds.features = Matrix(static_cast<std::size_t>(ds.n), static_cast<std::size_t>(ds.d_in));
  ds.labels.reserve(static_cast<std::size_t>(ds.n));
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != static_cast<std::size_t>(ds.d_in) + 1) {
      parse_fail(path, line_no, "expected " + std::to_string(ds.d_in + 1) + " fields, got " +
                                    std::to_string(fields.size()));
    }
    int label = 0;
    const auto lf = fields[0];
    auto [lp, lec] = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (lec != std::errc() || lp != lf.data() + lf.size()) {
      parse_fail(path, line_no, "non-integer label '" + std::string(lf) + "'");
    }
    if (label < 0 || label >= ds.k) {
      throw ParseError("label " + std::to_string(label) + " out of range [0," + std::to_string(ds.k) +
                       ") at line " + std::to_string(line_no));
    }
    if (row >= static_cast<std::size_t>(ds.n)) parse_fail(path, line_no, "more rows than metadata n");
    for (std::size_t j = 1; j < fields.size(); ++j) {
      double v = 0.0;
      const auto f = fields[j];
      auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || p != f.data() + f.size() || !std::isfinite(v)) {
        parse_fail(path, line_no, "bad feature value '" + std::string(f) + "'");
      }
      ds.features(row, j - 1) = v;
    }
    ds.labels.push_back(label);
    ++row;
  }
  if (row != static_cast<std::size_t>(ds.n)) {
    parse_fail(path, line_no, "expected " + std::to_string(ds.n) + " rows, got " + std::to_string(row));
  }
  return ds;
}

void write_benchmark(const std::filesystem::path& dir, const DomainPair& pair) {
  write_dataset(dir / "source.csv", pair.source);
  write_dataset(dir / "target.csv", pair.target);
}

DomainPair read_benchmark(const std::filesystem::path& dir) {
  return DomainPair{read_dataset(dir / "source.csv"), read_dataset(dir / "target.csv")};
}

}  // namespace cgsd
