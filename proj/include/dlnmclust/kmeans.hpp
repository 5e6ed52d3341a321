#pragma once

#include "dlnmclust/numeric.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace dlnmclust {

/// Lloyd's k-means with k-means++ seeding. Returns std::nullopt when fewer
/// distinct points than clusters exist or a cluster empties out.
inline std::optional<std::vector<int>> kmeans(const RowMatrix& points, int k, Rng& rng, int max_iter = 100) {
  const auto n = static_cast<int>(points.rows());
  if (k < 1 || n < k) return std::nullopt;
  RowMatrix centers(k, points.cols());

  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  int first = static_cast<int>(draw_uniform(rng) * n);
  centers.row(0) = points.row(std::min(first, n - 1));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      dist[static_cast<std::size_t>(i)] =
          std::min(dist[static_cast<std::size_t>(i)], (points.row(i) - centers.row(c - 1)).squaredNorm());
      total += dist[static_cast<std::size_t>(i)];
    }
    if (!(total > 0.0)) return std::nullopt;
    double target = draw_uniform(rng) * total;
    int pick = n - 1;
    for (int i = 0; i < n; ++i) {
      target -= dist[static_cast<std::size_t>(i)];
      if (target < 0.0) {
        pick = i;
        break;
      }
    }
    centers.row(c) = points.row(pick);
  }

  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    RowMatrix sums = RowMatrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) return std::nullopt;
      centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
    if (!changed) break;
  }
  return labels;
}

}  // namespace dlnmclust
