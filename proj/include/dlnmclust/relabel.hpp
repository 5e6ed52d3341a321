#pragma once

// Minimum-cost assignment and label-switching correction for mixture draws.

#include "dlnmclust/numeric.hpp"

#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace dlnmclust {

/// Hungarian (Kuhn-Munkres) algorithm on a square cost matrix; returns, for
/// each row, the column assigned to it.
inline std::vector<int> hungarian_assignment(const Eigen::MatrixXd& cost) {
  const auto n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("hungarian: cost matrix must be square");
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> row_pot(n + 1, 0.0), col_pot(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int row = 1; row <= n; ++row) {
    match[0] = row;
    int col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const int r0 = match[col0];
      double delta = inf;
      int col1 = 0;
      for (int col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const double reduced = cost(r0 - 1, col - 1) - row_pot[r0] - col_pot[col];
        if (reduced < minv[col]) {
          minv[col] = reduced;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= n; ++col) {
        if (used[col]) {
          row_pot[match[col]] += delta;
          col_pot[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const int col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n), -1);
  for (int col = 1; col <= n; ++col) assignment[static_cast<std::size_t>(match[col] - 1)] = col - 1;
  return assignment;
}

/// Permutation mapping each current cluster label to its reference label,
/// chosen to minimize the total squared Euclidean distance between rows.
inline std::vector<int> match_to_reference(const RowMatrix& current, const RowMatrix& reference) {
  const auto c = current.rows();
  Eigen::MatrixXd cost(c, c);
  for (Eigen::Index a = 0; a < c; ++a)
    for (Eigen::Index b = 0; b < c; ++b) cost(a, b) = (current.row(a) - reference.row(b)).squaredNorm();
  return hungarian_assignment(cost);
}

}  // namespace dlnmclust
