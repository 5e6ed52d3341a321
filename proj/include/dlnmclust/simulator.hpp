#pragma once

// Forward simulation of panels from the model hierarchy with known truths, and
// scoring of a fit against them.

#include "dlnmclust/inference.hpp"

#include <deque>
#include <utility>

namespace dlnmclust {

enum class GraphKind { grid, path, edge_list };
enum class PartitionKind { contiguous_blocks, random, softmax_field };
enum class ExposureProcess { iid_lognormal, ar1_positive };
enum class OffsetKind { constant, lognormal };

struct SimulationScenario {
  GraphKind graph_kind = GraphKind::grid;
  int grid_rows = 10;
  int grid_cols = 10;
  int n_areas = 100;                          // used by path and edge-list graphs
  std::vector<std::pair<int, int>> edges;     // 1-based, for edge_list
  int n_times = 80;
  int max_lag = 8;
  int exposure_knots = 2;
  int lag_knots = 1;
  int true_clusters = 2;
  RowMatrix true_eta;                         // C x p; empty selects default_true_eta
  PartitionKind partition = PartitionKind::contiguous_blocks;
  double alpha = -6.0;
  double sigma_u = 0.5;
  double sigma_v = 0.2;
  double sigma_gamma = 0.003;
  double r_true = 5.0;
  ExposureProcess exposure = ExposureProcess::ar1_positive;
  double exposure_mean = 10.0;
  double exposure_sd = 3.0;
  double exposure_ar = 0.8;
  OffsetKind offsets = OffsetKind::lognormal;
  double offset_value = 20000.0;
  double offset_log_sd = 0.5;
  int car_sweeps = 500;

  int n() const { return graph_kind == GraphKind::grid ? grid_rows * grid_cols : n_areas; }

  void validate() const {
    if (n() < 1) throw std::invalid_argument("scenario: need at least one area");
    if (max_lag < 0 || n_times <= max_lag) throw std::invalid_argument("scenario: need T > L >= 0");
    if (true_clusters < 1 || true_clusters > n()) throw std::invalid_argument("scenario: invalid number of clusters");
    if (!(r_true > 0.0)) throw std::invalid_argument("scenario: r_true must be positive");
    if (sigma_u < 0.0 || sigma_v < 0.0 || sigma_gamma < 0.0) throw std::invalid_argument("scenario: negative scale");
    if (!(offset_value > 0.0)) throw std::invalid_argument("scenario: offsets must be positive");
    if (!(exposure_sd >= 0.0) || std::abs(exposure_ar) >= 1.0)
      throw std::invalid_argument("scenario: exposure process needs sd >= 0 and |ar| < 1");
  }
};

/// Default surfaces in cardinal-basis coordinates, where entry (j, k) is the
/// log RR contribution at exposure knot j and lag knot k. Odd clusters carry a
/// harmful effect that fades with lag, even clusters a protective one that
/// peaks at mid lag.
inline RowMatrix default_true_eta(int clusters, int vx, int vl) {
  RowMatrix eta(clusters, vx * vl);
  for (int c = 0; c < clusters; ++c) {
    const double sign = c % 2 == 0 ? 1.0 : -1.0;
    const double size = 0.15 * (1.0 + c / 2);
    for (int j = 0; j < vx; ++j)
      for (int k = 0; k < vl; ++k) {
        const double pos = vl > 1 ? static_cast<double>(k) / (vl - 1) : 0.0;
        const double lag_weight = c % 2 == 0 ? 1.0 - pos : 1.0 - std::abs(pos - 0.5);
        eta(c, j * vl + k) = sign * size * (j + 1) * lag_weight * (c % 2 == 0 ? 1.0 : 2.0 / 3.0);
      }
  }
  return eta;
}

inline AdjacencyGraph scenario_graph(const SimulationScenario& sc) {
  switch (sc.graph_kind) {
    case GraphKind::grid: return grid_graph(sc.grid_rows, sc.grid_cols);
    case GraphKind::path: return path_graph(sc.n_areas);
    case GraphKind::edge_list: return AdjacencyGraph::from_edges(sc.edges, sc.n_areas);
  }
  throw std::logic_error("unreachable");
}

/// Breadth-first hop distances from a set of sources (-1 when unreachable).
inline std::vector<int> bfs_distances(const AdjacencyGraph& g, const std::vector<int>& sources) {
  std::vector<int> dist(static_cast<std::size_t>(g.size()), -1);
  std::deque<int> queue;
  for (int s : sources) {
    dist[static_cast<std::size_t>(s)] = 0;
    queue.push_back(s);
  }
  while (!queue.empty()) {
    const int a = queue.front();
    queue.pop_front();
    for (int b : g.neighbors(a))
      if (dist[static_cast<std::size_t>(b)] < 0) {
        dist[static_cast<std::size_t>(b)] = dist[static_cast<std::size_t>(a)] + 1;
        queue.push_back(b);
      }
  }
  return dist;
}

/// Connected blocks grown simultaneously from farthest-point seeds.
inline std::vector<int> contiguous_blocks(const AdjacencyGraph& g, int clusters) {
  const int n = g.size();
  std::vector<int> seeds{0};
  while (static_cast<int>(seeds.size()) < clusters) {
    const auto dist = bfs_distances(g, seeds);
    int best = -1, best_d = -1;
    for (int i = 0; i < n; ++i) {
      if (std::find(seeds.begin(), seeds.end(), i) != seeds.end()) continue;
      // Unreachable areas count as infinitely far.
      const int d = dist[static_cast<std::size_t>(i)] < 0 ? n + 1 : dist[static_cast<std::size_t>(i)];
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    seeds.push_back(best);
  }
  std::vector<int> label(static_cast<std::size_t>(n), -1);
  std::deque<int> queue;
  for (int c = 0; c < clusters; ++c) {
    label[static_cast<std::size_t>(seeds[static_cast<std::size_t>(c)])] = c;
    queue.push_back(seeds[static_cast<std::size_t>(c)]);
  }
  while (!queue.empty()) {
    const int a = queue.front();
    queue.pop_front();
    for (int b : g.neighbors(a))
      if (label[static_cast<std::size_t>(b)] < 0) {
        label[static_cast<std::size_t>(b)] = label[static_cast<std::size_t>(a)];
        queue.push_back(b);
      }
  }
  // Areas cut off from every seed join the nearest-indexed block.
  for (auto& l : label)
    if (l < 0) l = 0;
  return label;
}

/// Intrinsic CAR draw by repeated Gibbs sweeps over the conditionals, centred
/// over the connected areas; isolated areas stay at zero.
inline Eigen::VectorXd simulate_car(const AdjacencyGraph& g, double sigma, int sweeps, Rng& rng) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(g.size());
  const auto& conn = g.connected_areas();
  if (conn.empty() || sigma == 0.0) return u;
  for (int s = 0; s < sweeps; ++s)
    for (int i : conn) {
      const auto cond = car_conditional(i, as_span(u), g, sigma * sigma);
      u[i] = draw_normal(rng, cond.mean, std::sqrt(cond.variance));
    }
  double mean = 0.0;
  for (int i : conn) mean += u[i];
  mean /= static_cast<double>(conn.size());
  for (int i : conn) u[i] -= mean;
  return u;
}

/// RW2 forward simulation from gamma_0 = 0, recentred to sum to zero.
inline Eigen::VectorXd simulate_rw2(int n_times, double sigma, Rng& rng) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(n_times);
  if (n_times > 1) g[1] = draw_normal(rng, 0.0, sigma);
  for (int t = 2; t < n_times; ++t) g[t] = draw_normal(rng, 2.0 * g[t - 1] - g[t - 2], sigma);
  g.array() -= g.mean();
  return g;
}

struct SimulatedPanel {
  PanelDataset data;
  ParameterState truth;
  CrossBasisSpec crossbasis;
};

inline SimulatedPanel simulate_panel(const SimulationScenario& sc, std::uint64_t seed) {
  sc.validate();
  Rng rng(seed);
  SimulatedPanel out;
  PanelDataset& d = out.data;
  d.graph = scenario_graph(sc);
  const int n = d.graph.size();
  const int t_len = sc.n_times;
  const int clusters = sc.true_clusters;
  for (int i = 0; i < n; ++i) d.area_ids.push_back("A" + std::to_string(i + 1));

  // Offsets and exposure.
  d.offsets.resize(n);
  for (int i = 0; i < n; ++i)
    d.offsets[i] = sc.offsets == OffsetKind::constant
                       ? sc.offset_value
                       : sc.offset_value * std::exp(draw_normal(rng, 0.0, sc.offset_log_sd));
  d.exposure.resize(n, t_len);
  const double innov = std::sqrt(1.0 - sc.exposure_ar * sc.exposure_ar);
  for (int i = 0; i < n; ++i) {
    double a = draw_normal(rng);
    for (int t = 0; t < t_len; ++t) {
      if (t > 0) a = sc.exposure_ar * a + innov * draw_normal(rng);
      if (sc.exposure == ExposureProcess::ar1_positive) {
        d.exposure(i, t) = std::max(0.1 * sc.exposure_mean, sc.exposure_mean + sc.exposure_sd * a);
      } else {
        // Lognormal with the requested mean and sd, independent over time.
        const double cv2 = (sc.exposure_sd * sc.exposure_sd) / (sc.exposure_mean * sc.exposure_mean);
        const double s2 = std::log1p(cv2);
        d.exposure(i, t) = sc.exposure_mean * std::exp(std::sqrt(s2) * draw_normal(rng) - 0.5 * s2);
      }
    }
  }

  out.crossbasis = make_crossbasis_spec(d.exposure, sc.max_lag, sc.exposure_knots, sc.lag_knots);
  const int vx = out.crossbasis.exposure_dim();
  const int vl = out.crossbasis.lag_dim();
  const CrossBasis cb = build_crossbasis(d.exposure, out.crossbasis);

  ParameterState& s = out.truth;
  s = ParameterState::zeros(n, t_len, vx * vl, clusters,
                            clusters > 1 ? ModelVariant::mixture_flat : ModelVariant::standard);
  s.alpha = sc.alpha;
  s.log_r = std::log(sc.r_true);
  s.sigma_u = sc.sigma_u;
  s.sigma_v = sc.sigma_v;
  s.sigma_gamma = sc.sigma_gamma;
  if (sc.true_eta.size() > 0) {
    if (sc.true_eta.rows() != clusters || sc.true_eta.cols() != vx * vl)
      throw std::invalid_argument("scenario: true_eta must be C x p");
    s.eta = sc.true_eta;
  } else {
    s.eta = default_true_eta(clusters, vx, vl);
  }
  s.u = simulate_car(d.graph, sc.sigma_u, sc.car_sweeps, rng);
  s.v.resize(n);
  for (int i = 0; i < n; ++i) s.v[i] = draw_normal(rng, 0.0, sc.sigma_v);
  if (n > 1) s.v.array() -= s.v.mean();
  s.gamma = simulate_rw2(t_len, sc.sigma_gamma, rng);

  switch (sc.partition) {
    case PartitionKind::contiguous_blocks:
      s.z = contiguous_blocks(d.graph, clusters);
      break;
    case PartitionKind::random:
      for (auto& zi : s.z) zi = std::min(clusters - 1, static_cast<int>(draw_uniform(rng) * clusters));
      break;
    case PartitionKind::softmax_field: {
      RowMatrix logits = RowMatrix::Zero(clusters, n);
      for (int c = 0; c + 1 < clusters; ++c) {
        const Eigen::VectorXd uc = simulate_car(d.graph, 1.0, sc.car_sweeps, rng);
        for (int i = 0; i < n; ++i) logits(c, i) = uc[i] + draw_normal(rng, 0.0, 0.5);
      }
      for (int i = 0; i < n; ++i) {
        std::vector<double> li(static_cast<std::size_t>(clusters));
        for (int c = 0; c < clusters; ++c) li[static_cast<std::size_t>(c)] = logits(c, i);
        s.z[static_cast<std::size_t>(i)] = draw_categorical_log(rng, li);
      }
      break;
    }
  }
  for (int i = 0; i < n; ++i) {
    s.q.row(i).setZero();
    s.q(i, s.z[static_cast<std::size_t>(i)]) = 1.0;
  }

  d.counts = CountMatrix::Zero(n, t_len);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < t_len; ++t) {
      // Times before L only feed the lags; they get counts from the baseline.
      const double pred = t >= sc.max_lag
                              ? linear_predictor(s, d, cb, i, t, s.z[static_cast<std::size_t>(i)])
                              : std::log(d.offsets[i]) + s.alpha + s.u[i] + s.v[i] + s.gamma[t];
      d.counts(i, t) = draw_negative_binomial(rng, std::exp(pred), sc.r_true);
    }
  d.validate();
  return out;
}

// ---- recovery scores ------------------------------------------------------------

/// Adjusted Rand index between two labelings (Hubert and Arabie).
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw std::invalid_argument("ari: labelings differ in length");
  const auto n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> cells;
  std::map<int, double> rows, cols;
  for (std::size_t k = 0; k < a.size(); ++k) {
    cells[{a[k], b[k]}] += 1.0;
    rows[a[k]] += 1.0;
    cols[b[k]] += 1.0;
  }
  auto pairs = [](double x) { return x * (x - 1.0) / 2.0; };
  double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (const auto& [key, v] : cells) index += pairs(v);
  for (const auto& [key, v] : rows) sum_rows += pairs(v);
  for (const auto& [key, v] : cols) sum_cols += pairs(v);
  const double expected = sum_rows * sum_cols / pairs(n);
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;  // both labelings trivial
  return (index - expected) / (max_index - expected);
}

struct RecoveryReport {
  double ari = 0.0;
  std::vector<double> eta_rmse;   // per true cluster
  double eta_coverage = 0.0;      // fraction of true eta entries inside 95% intervals
  int eta_covered = 0;
  int eta_total = 0;
  std::vector<int> matching;      // true cluster -> fitted cluster
};

/// Scores a fit against the truth. Fitted clusters are matched to true ones
/// by Hungarian assignment on posterior-mean eta; with more fitted than true
/// clusters the surplus is ignored.
inline RecoveryReport score_recovery(const ParameterState& truth, const ClusterSummary& summary,
                                     const std::vector<ParameterState>& draws) {
  if (draws.empty()) throw std::invalid_argument("score_recovery: no posterior draws");
  const int true_c = truth.clusters();
  const int fit_c = draws.front().clusters();
  const auto p = truth.eta.cols();
  if (draws.front().eta.cols() != p) throw std::invalid_argument("score_recovery: eta dimension mismatch");
  RowMatrix mean = RowMatrix::Zero(fit_c, p);
  for (const auto& s : draws) mean += s.eta;
  mean /= static_cast<double>(draws.size());

  RecoveryReport rep;
  const int size = std::max(true_c, fit_c);
  Eigen::MatrixXd cost = Eigen::MatrixXd::Zero(size, size);
  for (int a = 0; a < true_c; ++a)
    for (int b = 0; b < fit_c; ++b) cost(a, b) = (truth.eta.row(a) - mean.row(b)).squaredNorm();
  const auto assign = hungarian_assignment(cost);
  for (int a = 0; a < true_c; ++a) {
    int b = assign[static_cast<std::size_t>(a)];
    if (b >= fit_c) b = 0;  // fewer fitted than true clusters
    rep.matching.push_back(b);
    rep.eta_rmse.push_back(std::sqrt((truth.eta.row(a) - mean.row(b)).squaredNorm() / static_cast<double>(p)));
    for (Eigen::Index k = 0; k < p; ++k) {
      std::vector<double> xs;
      xs.reserve(draws.size());
      for (const auto& s : draws) xs.push_back(s.eta(b, k));
      const Interval iv = summarize(xs);
      ++rep.eta_total;
      if (truth.eta(a, k) >= iv.lo && truth.eta(a, k) <= iv.hi) ++rep.eta_covered;
    }
  }
  rep.eta_coverage = static_cast<double>(rep.eta_covered) / rep.eta_total;
  rep.ari = adjusted_rand_index(truth.z, summary.map_assignment);
  return rep;
}

}  // namespace dlnmclust
