// SPDX-License-Identifier: Apache-2.0

#include "cgsd/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include <Eigen/Dense>

#include "cgsd/errors.hpp"

namespace cgsd {

long ConfusionMatrix::total() const {
  long t = 0;
  for (long c : counts) t += c;
  return t;
}

std::vector<std::vector<long>> ConfusionMatrix::as_rows() const {
  std::vector<std::vector<long>> rows(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) rows[static_cast<std::size_t>(i)].push_back(at(i, j));
  return rows;
}

ClassificationMetrics confusion_and_metrics(std::span<const int> preds, std::span<const int> labels, int k) {
  if (preds.size() != labels.size()) {
    throw DataError("metrics: " + std::to_string(preds.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw DataError("metrics: nothing to evaluate");
  if (k < 1) throw DataError("metrics: k must be positive");

  ClassificationMetrics m;
  m.confusion.k = k;
  m.confusion.counts.assign(static_cast<std::size_t>(k * k), 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= k || labels[i] < 0 || labels[i] >= k) {
      throw DataError("metrics: value out of range [0," + std::to_string(k) + ") at index " + std::to_string(i));
    }
    ++m.confusion.counts[static_cast<std::size_t>(labels[i] * k + preds[i])];
  }

  long trace = 0;
  for (int c = 0; c < k; ++c) trace += m.confusion.at(c, c);
  m.accuracy = static_cast<double>(trace) / static_cast<double>(preds.size());

  m.per_class_f1.assign(static_cast<std::size_t>(k), 0.0);
  for (int c = 0; c < k; ++c) {
    const long tp = m.confusion.at(c, c);
    long fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += m.confusion.at(o, c);
      fn += m.confusion.at(c, o);
    }
    const long denom = 2 * tp + fp + fn;
    m.per_class_f1[static_cast<std::size_t>(c)] = denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
  }
  double total = 0.0;
  for (double f : m.per_class_f1) total += f;
  m.macro_f1 = total / k;
  return m;
}

Matrix pca_project_2d(const Matrix& points) {
  const std::size_t n = points.rows();
  const std::size_t m = points.cols();
  if (n < 3) throw DataError("pca_project_2d: need at least 3 points, got " + std::to_string(n));
  if (m < 1) throw DataError("pca_project_2d: points have no coordinates");

  Eigen::MatrixXd centered(n, m);
  for (std::size_t j = 0; j < m; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += points(i, j);
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = points(i, j) - mu;
  }
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_project_2d: eigendecomposition failed");

  Matrix out(n, 2);
  const Eigen::Index top = static_cast<Eigen::Index>(m) - 1;
  for (int c = 0; c < 2 && c <= top; ++c) {
    Eigen::VectorXd axis = solver.eigenvectors().col(top - c);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    const Eigen::VectorXd proj = centered * axis;
    for (std::size_t i = 0; i < n; ++i) out(i, static_cast<std::size_t>(c)) = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

double silhouette_score(const Matrix& points, std::span<const int> labels) {
  const std::size_t n = points.rows();
  if (labels.size() != n) throw DataError("silhouette: label count does not match points");
  std::map<int, std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters[labels[i]].push_back(i);
  if (clusters.size() < 2) throw DataError("silhouette: need at least 2 distinct labels");

  auto dist = [&](std::size_t a, std::size_t b) {
    double sq = 0.0;
    for (std::size_t j = 0; j < points.cols(); ++j) {
      const double d = points(a, j) - points(b, j);
      sq += d * d;
    }
    return std::sqrt(sq);
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& own = clusters[labels[i]];
    if (own.size() < 2) continue;
    double a = 0.0;
    for (std::size_t j : own)
      if (j != i) a += dist(i, j);
    a /= static_cast<double>(own.size() - 1);
    double b = INFINITY;
    for (const auto& [label, members] : clusters) {
      if (label == labels[i]) continue;
      double s = 0.0;
      for (std::size_t j : members) s += dist(i, j);
      b = std::min(b, s / static_cast<double>(members.size()));
    }
    const double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

}  // namespace cgsd
