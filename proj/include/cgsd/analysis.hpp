// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "cgsd/numkit.hpp"

namespace cgsd {

/// Rows are true classes, columns are predictions.
struct ConfusionMatrix {
  int k = 0;
  std::vector<long> counts;

  long at(int truth, int predicted) const { return counts[static_cast<std::size_t>(truth * k + predicted)]; }
  long total() const;
  std::vector<std::vector<long>> as_rows() const;
};

struct ClassificationMetrics {
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  std::vector<double> per_class_f1;
  /// Unweighted mean over all k classes; a class that never occurs in either
  /// predictions or labels contributes F1 = 0.
  double macro_f1 = 0.0;
};

ClassificationMetrics confusion_and_metrics(std::span<const int> preds, std::span<const int> labels, int k);

/// Projection onto the top two principal axes of the sample covariance.
/// Each axis is signed so that its largest-magnitude loading is positive.
Matrix pca_project_2d(const Matrix& points);

/// Mean silhouette with Euclidean distance; singleton clusters score 0.
double silhouette_score(const Matrix& points, std::span<const int> labels);

}  // namespace cgsd
