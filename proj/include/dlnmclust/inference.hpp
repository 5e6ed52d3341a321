#pragma once

// Posterior summaries: exposure-lag relative risk surfaces, cumulative RR,
// WAIC (pWAIC2), membership entropy, cluster summaries, random-effect bands and
// effective sample sizes.

#include "dlnmclust/sampler.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace dlnmclust {

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Posterior mean and central 95% interval (type-7 quantiles).
inline Interval summarize(std::vector<double> values, double level = 0.95) {
  if (values.empty()) throw std::invalid_argument("summarize: no values");
  Interval out;
  out.mean = mean_of(values);
  std::sort(values.begin(), values.end());
  out.lo = sorted_quantile(values, 0.5 * (1.0 - level));
  out.hi = sorted_quantile(values, 1.0 - 0.5 * (1.0 - level));
  return out;
}

// ---- relative risk ------------------------------------------------------------

struct ExposureGrid {
  std::vector<double> values;  // sorted, contains the reference exactly
  double reference = 0.0;
};

/// `points` equally spaced values from the observed minimum to the observed
/// `upper_p` quantile, with the `reference_p` quantile inserted exactly.
inline ExposureGrid default_exposure_grid(const Eigen::MatrixXd& exposure, int points = 50, double upper_p = 0.99,
                                          double reference_p = 0.05) {
  if (points < 2) throw std::invalid_argument("exposure grid: need at least two points");
  std::vector<double> pooled(exposure.data(), exposure.data() + exposure.size());
  std::sort(pooled.begin(), pooled.end());
  const double lo = pooled.front();
  const double hi = sorted_quantile(pooled, upper_p);
  ExposureGrid grid;
  grid.reference = sorted_quantile(pooled, reference_p);
  for (int k = 0; k < points; ++k) grid.values.push_back(lo + (hi - lo) * k / (points - 1));
  if (std::find(grid.values.begin(), grid.values.end(), grid.reference) == grid.values.end()) {
    grid.values.push_back(grid.reference);
    std::sort(grid.values.begin(), grid.values.end());
  }
  return grid;
}

inline std::vector<int> full_lag_grid(int max_lag) {
  std::vector<int> lags(static_cast<std::size_t>(max_lag + 1));
  for (int l = 0; l <= max_lag; ++l) lags[static_cast<std::size_t>(l)] = l;
  return lags;
}

/// Precomputed basis differences B_x(x) - B_x(ref) and lag values B_l(l).
class RRKernel {
 public:
  RRKernel(const CrossBasisSpec& spec, double reference, std::span<const double> exposure_grid,
           std::span<const int> lag_grid)
      : vx_(spec.exposure_dim()), vl_(spec.lag_dim()) {
    const SplineBasis xb(spec.exposure_basis);
    const SplineBasis lb(spec.lag_basis);
    const Eigen::VectorXd ref = xb(reference);
    dx_.resize(static_cast<Eigen::Index>(exposure_grid.size()), vx_);
    for (std::size_t g = 0; g < exposure_grid.size(); ++g)
      dx_.row(static_cast<Eigen::Index>(g)) = (xb(exposure_grid[g]) - ref).transpose();
    lag_.resize(static_cast<Eigen::Index>(lag_grid.size()), vl_);
    for (std::size_t l = 0; l < lag_grid.size(); ++l) lag_.row(static_cast<Eigen::Index>(l)) = lb(lag_grid[l]).transpose();
  }

  /// log RR over (exposure grid x lag grid) for one coefficient vector.
  Eigen::MatrixXd log_rr(std::span<const double> eta) const {
    if (eta.size() != static_cast<std::size_t>(vx_ * vl_)) throw std::invalid_argument("rr: coefficient length mismatch");
    // Coefficients as a vx x vl matrix (column index j * vl + k).
    const Eigen::Map<const RowMatrix> coef(eta.data(), vx_, vl_);
    return dx_ * coef * lag_.transpose();
  }

 private:
  int vx_, vl_;
  Eigen::MatrixXd dx_;
  Eigen::MatrixXd lag_;
};

struct RRSurface {
  std::vector<double> exposure_grid;
  std::vector<int> lag_grid;
  Eigen::MatrixXd rr;       // posterior mean, exposure x lag
  Eigen::MatrixXd rr_low;   // 2.5%
  Eigen::MatrixXd rr_high;  // 97.5%
  Eigen::MatrixXd rr_plugin;  // exp(log RR at the posterior-mean eta)
  double reference_value = 0.0;
  int cluster = 0;          // 0-based
};

/// Per-draw RR values: element [s](g, l).
inline std::vector<Eigen::MatrixXd> rr_draws(const std::vector<ParameterState>& draws, const CrossBasisSpec& spec,
                                             int cluster, double reference, std::span<const double> exposure_grid,
                                             std::span<const int> lag_grid) {
  if (draws.empty()) throw std::invalid_argument("rr: no posterior draws");
  const RRKernel kernel(spec, reference, exposure_grid, lag_grid);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(draws.size());
  for (const auto& s : draws) {
    if (cluster < 0 || cluster >= s.clusters()) throw std::out_of_range("rr: cluster index out of range");
    out.push_back(kernel.log_rr(row_span(s.eta, cluster)).array().exp().matrix());
  }
  return out;
}

inline RRSurface rr_surface(const std::vector<ParameterState>& draws, const CrossBasisSpec& spec, int cluster,
                            double reference, std::span<const double> exposure_grid, std::span<const int> lag_grid) {
  const auto per_draw = rr_draws(draws, spec, cluster, reference, exposure_grid, lag_grid);
  const auto ng = static_cast<Eigen::Index>(exposure_grid.size());
  const auto nl = static_cast<Eigen::Index>(lag_grid.size());
  RRSurface out;
  out.exposure_grid.assign(exposure_grid.begin(), exposure_grid.end());
  out.lag_grid.assign(lag_grid.begin(), lag_grid.end());
  out.reference_value = reference;
  out.cluster = cluster;
  out.rr.resize(ng, nl);
  out.rr_low.resize(ng, nl);
  out.rr_high.resize(ng, nl);
  std::vector<double> values(per_draw.size());
  for (Eigen::Index g = 0; g < ng; ++g)
    for (Eigen::Index l = 0; l < nl; ++l) {
      for (std::size_t s = 0; s < per_draw.size(); ++s) values[s] = per_draw[s](g, l);
      const Interval iv = summarize(values);
      out.rr(g, l) = iv.mean;
      out.rr_low(g, l) = iv.lo;
      out.rr_high(g, l) = iv.hi;
    }
  Eigen::RowVectorXd mean_eta = Eigen::RowVectorXd::Zero(draws.front().eta.cols());
  for (const auto& s : draws) mean_eta += s.eta.row(cluster);
  mean_eta /= static_cast<double>(draws.size());
  const RRKernel kernel(spec, reference, exposure_grid, lag_grid);
  out.rr_plugin = kernel.log_rr({mean_eta.data(), static_cast<std::size_t>(mean_eta.size())}).array().exp().matrix();
  return out;
}

inline RRSurface rr_surface(const PosteriorDraws& post, const CrossBasisSpec& spec, int cluster, double reference,
                            std::span<const double> exposure_grid, std::span<const int> lag_grid) {
  return rr_surface(post.draws, spec, cluster, reference, exposure_grid, lag_grid);
}

struct CumulativeRR {
  std::vector<double> exposure_grid;
  Eigen::VectorXd mean, lo, hi;
  double reference_value = 0.0;
  int cluster = 0;
};

/// Per-draw cumulative RR over lags 0..L: the running product of the per-lag
/// RR values of the same draw. Element [s](g).
inline std::vector<Eigen::VectorXd> cumulative_rr_draws(const std::vector<ParameterState>& draws,
                                                        const CrossBasisSpec& spec, int cluster, double reference,
                                                        std::span<const double> exposure_grid) {
  const auto lags = full_lag_grid(spec.max_lag);
  const auto per_draw = rr_draws(draws, spec, cluster, reference, exposure_grid, lags);
  std::vector<Eigen::VectorXd> out;
  out.reserve(per_draw.size());
  for (const auto& m : per_draw) {
    Eigen::VectorXd prod = Eigen::VectorXd::Ones(m.rows());
    for (Eigen::Index l = 0; l < m.cols(); ++l) prod.array() *= m.col(l).array();
    out.push_back(std::move(prod));
  }
  return out;
}

inline CumulativeRR cumulative_rr(const std::vector<ParameterState>& draws, const CrossBasisSpec& spec, int cluster,
                                  double reference, std::span<const double> exposure_grid) {
  const auto per_draw = cumulative_rr_draws(draws, spec, cluster, reference, exposure_grid);
  const auto ng = static_cast<Eigen::Index>(exposure_grid.size());
  CumulativeRR out;
  out.exposure_grid.assign(exposure_grid.begin(), exposure_grid.end());
  out.reference_value = reference;
  out.cluster = cluster;
  out.mean.resize(ng);
  out.lo.resize(ng);
  out.hi.resize(ng);
  std::vector<double> values(per_draw.size());
  for (Eigen::Index g = 0; g < ng; ++g) {
    for (std::size_t s = 0; s < per_draw.size(); ++s) values[s] = per_draw[s][g];
    const Interval iv = summarize(values);
    out.mean[g] = iv.mean;
    out.lo[g] = iv.lo;
    out.hi[g] = iv.hi;
  }
  return out;
}

// ---- WAIC -------------------------------------------------------------------

struct WaicResult {
  double waic = 0.0;
  double lppd = 0.0;
  double p_waic2 = 0.0;
  double se = 0.0;               // standard error of waic
  Eigen::VectorXd pointwise;     // -2 (lppd_i - p_i)
};

/// WAIC with the variance-based penalty; loglik is draws x observations.
inline WaicResult waic(const Eigen::MatrixXd& loglik) {
  const auto s = loglik.rows();
  const auto n = loglik.cols();
  if (s < 2) throw std::invalid_argument("waic: at least two draws are required");
  WaicResult out;
  out.pointwise.resize(n);
  std::vector<double> col(static_cast<std::size_t>(s));
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < s; ++k) col[static_cast<std::size_t>(k)] = loglik(k, j);
    const double lppd_j = log_sum_exp(col) - std::log(static_cast<double>(s));
    const double mean = mean_of(col);
    double ss = 0.0;
    for (double x : col) ss += (x - mean) * (x - mean);
    const double p_j = ss / static_cast<double>(s - 1);
    out.lppd += lppd_j;
    out.p_waic2 += p_j;
    out.pointwise[j] = -2.0 * (lppd_j - p_j);
  }
  out.waic = -2.0 * (out.lppd - out.p_waic2);
  if (n > 1) {
    const double m = out.pointwise.mean();
    const double var = (out.pointwise.array() - m).square().sum() / static_cast<double>(n - 1);
    out.se = std::sqrt(static_cast<double>(n) * var);
  }
  return out;
}

struct WaicDifference {
  double difference = 0.0;  // a - b
  double se = 0.0;
};

inline WaicDifference waic_difference(const WaicResult& a, const WaicResult& b) {
  if (a.pointwise.size() != b.pointwise.size()) throw std::invalid_argument("waic difference: size mismatch");
  WaicDifference out;
  out.difference = a.waic - b.waic;
  const Eigen::ArrayXd d = (a.pointwise - b.pointwise).array();
  const auto n = d.size();
  if (n > 1) out.se = std::sqrt(static_cast<double>(n) * (d - d.mean()).square().sum() / static_cast<double>(n - 1));
  return out;
}

// ---- membership ----------------------------------------------------------------

/// Shannon entropy in bits, with 0 log 0 = 0.
inline double entropy(std::span<const double> row) {
  double total = 0.0;
  for (double p : row) {
    if (!(p >= -1e-9) || !std::isfinite(p)) throw std::invalid_argument("entropy: row has a negative entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("entropy: row does not sum to one");
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log2(p);
  return h;
}

struct ClusterSummary {
  RowMatrix membership_probs;     // n x C
  std::vector<int> map_assignment;  // 0-based
  std::vector<double> entropy;
};

inline ClusterSummary cluster_summary(const std::vector<ParameterState>& draws, int clusters) {
  if (draws.empty()) throw std::invalid_argument("cluster summary: no posterior draws");
  const auto n = static_cast<Eigen::Index>(draws.front().z.size());
  ClusterSummary out;
  out.membership_probs = RowMatrix::Zero(n, clusters);
  for (const auto& s : draws)
    for (Eigen::Index i = 0; i < n; ++i) out.membership_probs(i, s.z[static_cast<std::size_t>(i)]) += 1.0;
  out.membership_probs /= static_cast<double>(draws.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < clusters; ++c)
      if (out.membership_probs(i, c) > out.membership_probs(i, best)) best = c;
    out.map_assignment.push_back(best);
    out.entropy.push_back(entropy(row_span(out.membership_probs, i)));
  }
  return out;
}

inline ClusterSummary cluster_summary(const PosteriorDraws& post) { return cluster_summary(post.draws, post.clusters); }

// ---- random effects -----------------------------------------------------------

struct EffectSummaries {
  std::vector<Interval> spatial;   // u_i + v_i per area
  std::vector<Interval> temporal;  // gamma_t
};

inline EffectSummaries effect_summaries(const std::vector<ParameterState>& draws) {
  if (draws.empty()) throw std::invalid_argument("effect summaries: no posterior draws");
  EffectSummaries out;
  const auto n = draws.front().u.size();
  const auto t_len = draws.front().gamma.size();
  std::vector<double> values(draws.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < draws.size(); ++s) values[s] = draws[s].u[i] + draws[s].v[i];
    out.spatial.push_back(summarize(values));
  }
  for (Eigen::Index t = 0; t < t_len; ++t) {
    for (std::size_t s = 0; s < draws.size(); ++s) values[s] = draws[s].gamma[t];
    out.temporal.push_back(summarize(values));
  }
  return out;
}

// ---- effective sample size --------------------------------------------------------

/// Effective sample size from Geyer's initial monotone positive sequence.
inline double effective_sample_size(std::span<const double> x) {
  const auto n = static_cast<long long>(x.size());
  if (n < 4) return static_cast<double>(n);
  const double mean = mean_of(x);
  auto autocov = [&](long long lag) {
    double acc = 0.0;
    for (long long t = 0; t + lag < n; ++t)
      acc += (x[static_cast<std::size_t>(t)] - mean) * (x[static_cast<std::size_t>(t + lag)] - mean);
    return acc / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0)) return static_cast<double>(n);
  double tau = -1.0;  // -1 + 2 sum rho = sum of pair sums minus 1
  double prev_pair = std::numeric_limits<double>::infinity();
  for (long long k = 0; 2 * k + 1 < n; ++k) {
    double pair = (autocov(2 * k) + autocov(2 * k + 1)) / c0;
    if (pair <= 0.0) break;
    pair = std::min(pair, prev_pair);
    prev_pair = pair;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / std::log10(static_cast<double>(n)));
  return static_cast<double>(n) / tau;
}

/// Named scalar traces used by the diagnostics table.
inline std::vector<std::pair<std::string, std::vector<double>>> scalar_traces(const std::vector<ParameterState>& draws) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  auto add = [&](const std::string& name, auto get) {
    std::vector<double> xs;
    xs.reserve(draws.size());
    for (const auto& s : draws) xs.push_back(get(s));
    out.emplace_back(name, std::move(xs));
  };
  if (draws.empty()) return out;
  add("alpha", [](const ParameterState& s) { return s.alpha; });
  add("log_r", [](const ParameterState& s) { return s.log_r; });
  add("sigma_u", [](const ParameterState& s) { return s.sigma_u; });
  add("sigma_v", [](const ParameterState& s) { return s.sigma_v; });
  add("sigma_gamma", [](const ParameterState& s) { return s.sigma_gamma; });
  const auto& first = draws.front();
  for (Eigen::Index c = 0; c < first.eta.rows(); ++c)
    for (Eigen::Index k = 0; k < first.eta.cols(); ++k)
      add("eta_" + std::to_string(c + 1) + "_" + std::to_string(k + 1),
          [c, k](const ParameterState& s) { return s.eta(c, k); });
  return out;
}

}  // namespace dlnmclust
