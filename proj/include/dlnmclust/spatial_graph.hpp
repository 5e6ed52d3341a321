#pragma once

// Areal adjacency with implicit row-normalized weights w_ij = 1 / n(i), plus the
// intrinsic CAR quantities used by every spatial random effect.

#include "dlnmclust/numeric.hpp"

#include <algorithm>
#include <queue>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dlnmclust {

class AdjacencyGraph {
 public:
  AdjacencyGraph() = default;

  /// Builds a symmetric, deduplicated graph from 1-based (i, j) pairs.
  static AdjacencyGraph from_edges(std::span<const std::pair<int, int>> edges, int n) {
    if (n < 0) throw std::invalid_argument("adjacency: negative area count");
    AdjacencyGraph g;
    g.neighbors_.assign(static_cast<std::size_t>(n), {});
    for (const auto& [a, b] : edges) {
      if (a < 1 || a > n || b < 1 || b > n)
        throw std::out_of_range("adjacency: area index " + std::to_string(a < 1 || a > n ? a : b) +
                                " outside 1.." + std::to_string(n));
      if (a == b) throw std::invalid_argument("adjacency: self-loop on area " + std::to_string(a));
      g.neighbors_[static_cast<std::size_t>(a - 1)].push_back(b - 1);
      g.neighbors_[static_cast<std::size_t>(b - 1)].push_back(a - 1);
    }
    for (auto& nb : g.neighbors_) {
      std::sort(nb.begin(), nb.end());
      nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    g.finalize();
    return g;
  }

  int size() const { return static_cast<int>(neighbors_.size()); }
  const std::vector<int>& neighbors(int i) const { return neighbors_[static_cast<std::size_t>(i)]; }
  int degree(int i) const { return static_cast<int>(neighbors(i).size()); }
  bool is_isolated(int i) const { return neighbors(i).empty(); }

  double weight(int i, int j) const {
    const auto& nb = neighbors(i);
    return std::binary_search(nb.begin(), nb.end(), j) ? 1.0 / static_cast<double>(nb.size()) : 0.0;
  }

  /// Areas with at least one neighbor, in index order.
  const std::vector<int>& connected_areas() const { return connected_; }
  const std::vector<int>& isolated_areas() const { return isolated_; }

  /// Connected-component label per area (isolated areas get their own label).
  const std::vector<int>& component_labels() const { return component_; }
  /// Number of components among non-isolated areas.
  int connected_component_count() const { return connected_components_; }

  /// Rank of the intrinsic CAR precision: one null direction per component.
  int car_rank() const { return static_cast<int>(connected_.size()) - connected_components_; }

  /// Undirected edges (i < j), 0-based.
  std::vector<std::pair<int, int>> edges() const {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < size(); ++i)
      for (int j : neighbors(i))
        if (i < j) out.emplace_back(i, j);
    return out;
  }

  std::size_t edge_count() const {
    std::size_t total = 0;
    for (const auto& nb : neighbors_) total += nb.size();
    return total / 2;
  }

 private:
  void finalize() {
    connected_.clear();
    isolated_.clear();
    for (int i = 0; i < size(); ++i) (is_isolated(i) ? isolated_ : connected_).push_back(i);

    component_.assign(neighbors_.size(), -1);
    int label = 0;
    connected_components_ = 0;
    for (int start = 0; start < size(); ++start) {
      if (component_[static_cast<std::size_t>(start)] >= 0) continue;
      if (!is_isolated(start)) ++connected_components_;
      std::queue<int> frontier;
      frontier.push(start);
      component_[static_cast<std::size_t>(start)] = label;
      while (!frontier.empty()) {
        const int i = frontier.front();
        frontier.pop();
        for (int j : neighbors(i))
          if (component_[static_cast<std::size_t>(j)] < 0) {
            component_[static_cast<std::size_t>(j)] = label;
            frontier.push(j);
          }
      }
      ++label;
    }
  }

  std::vector<std::vector<int>> neighbors_;
  std::vector<int> connected_;
  std::vector<int> isolated_;
  std::vector<int> component_;
  int connected_components_ = 0;
};

inline AdjacencyGraph load_adjacency(std::span<const std::pair<int, int>> edges, int n) {
  return AdjacencyGraph::from_edges(edges, n);
}

/// Rook-contiguity grid; area index = row * cols + col.
inline AdjacencyGraph grid_graph(int rows, int cols) {
  std::vector<std::pair<int, int>> edges;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int id = r * cols + c + 1;
      if (c + 1 < cols) edges.emplace_back(id, id + 1);
      if (r + 1 < rows) edges.emplace_back(id, id + cols);
    }
  return AdjacencyGraph::from_edges(edges, rows * cols);
}

inline AdjacencyGraph path_graph(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 1; i < n; ++i) edges.emplace_back(i, i + 1);
  return AdjacencyGraph::from_edges(edges, n);
}

struct CarConditional {
  double mean;
  double variance;
};

/// Full conditional of site i under the intrinsic CAR: neighbor average and
/// variance sigma2 / n(i).
inline CarConditional car_conditional(int i, std::span<const double> field, const AdjacencyGraph& graph,
                                      double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("car_conditional: variance must be positive");
  if (static_cast<int>(field.size()) != graph.size())
    throw std::invalid_argument("car_conditional: field size does not match the graph");
  if (graph.is_isolated(i))
    throw std::invalid_argument("car_conditional: area " + std::to_string(i + 1) + " has no neighbors");
  double acc = 0.0;
  for (int j : graph.neighbors(i)) acc += field[static_cast<std::size_t>(j)];
  const double nb = graph.degree(i);
  return {acc / nb, sigma2 / nb};
}

/// Sum over undirected edges of squared differences.
inline double car_pairwise_sum(std::span<const double> field, const AdjacencyGraph& graph) {
  double acc = 0.0;
  for (int i = 0; i < graph.size(); ++i)
    for (int j : graph.neighbors(i))
      if (i < j) {
        const double d = field[static_cast<std::size_t>(i)] - field[static_cast<std::size_t>(j)];
        acc += d * d;
      }
  return acc;
}

/// Intrinsic CAR log density without its normalizing constant:
/// -(1 / (2 sigma2)) * sum_{i~j} (u_i - u_j)^2.
inline double car_log_density(std::span<const double> field, const AdjacencyGraph& graph, double sigma2) {
  if (!(sigma2 > 0.0)) throw std::invalid_argument("car_log_density: variance must be positive");
  if (static_cast<int>(field.size()) != graph.size())
    throw std::invalid_argument("car_log_density: field size does not match the graph");
  return -0.5 * car_pairwise_sum(field, graph) / sigma2;
}

/// Change of the pairwise sum when site i moves by delta.
inline double car_pairwise_delta(std::span<const double> field, const AdjacencyGraph& graph, int i, double delta) {
  const double ui = field[static_cast<std::size_t>(i)];
  double acc = 0.0;
  for (int j : graph.neighbors(i)) {
    const double d = ui - field[static_cast<std::size_t>(j)];
    acc += 2.0 * delta * d + delta * delta;
  }
  return acc;
}

}  // namespace dlnmclust
