#pragma once

// Parameters, priors, the negative binomial likelihood and the linear predictor
// for the standard DLNM and its two mixture extensions.
//
// Conventions used throughout the engine:
//   * areas, times and clusters are 0-based in memory (files are 1-based);
//   * time t contributes to the likelihood only when t >= L (the first L
//     times of each area feed the lags but are not modelled);
//   * the NB dispersion is stored as log r so that the prior, whose mass sits
//     largely below the double range, stays representable;
//   * u, v and gamma satisfy sum-to-zero constraints, so their priors are the
//     rank-deficient Gaussians on the constrained subspace;
//   * in the spatially smoothed mixture the last cluster is the reference
//     category: its assignment fields are pinned at 0.

#include "dlnmclust/numeric.hpp"
#include "dlnmclust/spatial_graph.hpp"
#include "dlnmclust/spline_basis.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlnmclust {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

struct PanelDataset {
  std::vector<std::string> area_ids;
  CountMatrix counts;         // n x T
  Eigen::MatrixXd exposure;   // n x T
  Eigen::VectorXd offsets;    // N_i > 0
  AdjacencyGraph graph;

  int n_areas() const { return static_cast<int>(counts.rows()); }
  int n_times() const { return static_cast<int>(counts.cols()); }

  void validate() const {
    const auto n = counts.rows();
    if (exposure.rows() != n || exposure.cols() != counts.cols() || offsets.size() != n)
      throw std::invalid_argument("panel: inconsistent dimensions");
    if (graph.size() != n) throw std::invalid_argument("panel: adjacency graph size differs from the area count");
    if (!area_ids.empty() && static_cast<Eigen::Index>(area_ids.size()) != n)
      throw std::invalid_argument("panel: area id count differs from the area count");
    if ((counts.array() < 0).any()) throw std::invalid_argument("panel: negative count");
    if (!(offsets.array() > 0.0).all() || !offsets.allFinite())
      throw std::invalid_argument("panel: offsets must be positive and finite");
    if (!exposure.allFinite()) throw std::invalid_argument("panel: non-finite exposure");
  }
};

struct PriorSpec {
  double r_shape = 0.001;
  double r_rate = 0.001;
  double alpha_sd = 10.0;  // Normal(0, 100) read as variance 100
  double eta_sd = 100.0;
  double sigma_u_upper = 10.0;
  double sigma_v_upper = 10.0;
  double sigma_gamma_upper = 10.0;
  double assignment_sd_scale = 1.0;  // HalfNormal(0, scale) on the assignment-field sds

  void validate() const {
    for (double value : {r_shape, r_rate, alpha_sd, eta_sd, sigma_u_upper, sigma_v_upper, sigma_gamma_upper,
                         assignment_sd_scale})
      if (!(value > 0.0) || !std::isfinite(value)) throw std::invalid_argument("prior: hyperparameters must be positive");
  }
};

enum class ModelVariant { standard, mixture_flat, mixture_spatial };

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::standard: return "standard";
    case ModelVariant::mixture_flat: return "mixture_flat";
    case ModelVariant::mixture_spatial: return "mixture_spatial";
  }
  return "unknown";
}

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "standard") return ModelVariant::standard;
  if (s == "mixture_flat") return ModelVariant::mixture_flat;
  if (s == "mixture_spatial") return ModelVariant::mixture_spatial;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

struct ModelSpec {
  ModelVariant variant = ModelVariant::standard;
  int clusters = 1;
  CrossBasisSpec crossbasis;
  PriorSpec priors;

  bool is_mixture() const { return variant != ModelVariant::standard; }

  /// The library accepts a single-component mixture (it must reproduce the
  /// standard model exactly); the command line insists on C >= 2.
  void validate() const {
    if (variant == ModelVariant::standard && clusters != 1)
      throw std::invalid_argument("model: the standard variant has exactly one cluster");
    if (clusters < 1) throw std::invalid_argument("model: at least one cluster is required");
    crossbasis.validate();
    priors.validate();
  }
};

struct ParameterState {
  double alpha = 0.0;
  double log_r = 0.0;
  RowMatrix eta;              // C x p
  Eigen::VectorXd u;          // n, structured spatial effect
  Eigen::VectorXd v;          // n, unstructured spatial effect
  Eigen::VectorXd gamma;      // T, temporal effect
  double sigma_u = 1.0;
  double sigma_v = 1.0;
  double sigma_gamma = 1.0;
  std::vector<int> z;         // cluster per area
  RowMatrix q;                // n x C membership probabilities
  RowMatrix assignment_u;     // C x n (spatial mixture only)
  RowMatrix assignment_v;     // C x n (spatial mixture only)
  Eigen::VectorXd sigma_uc;   // C (spatial mixture only)
  Eigen::VectorXd sigma_vc;   // C (spatial mixture only)

  double r() const { return std::exp(log_r); }
  int clusters() const { return static_cast<int>(eta.rows()); }

  static ParameterState zeros(int n_areas, int n_times, int columns, int clusters, ModelVariant variant) {
    ParameterState s;
    s.eta = RowMatrix::Zero(clusters, columns);
    s.u = Eigen::VectorXd::Zero(n_areas);
    s.v = Eigen::VectorXd::Zero(n_areas);
    s.gamma = Eigen::VectorXd::Zero(n_times);
    s.z.assign(static_cast<std::size_t>(n_areas), 0);
    s.q = RowMatrix::Constant(n_areas, clusters, 1.0 / clusters);
    if (variant == ModelVariant::mixture_spatial) {
      s.assignment_u = RowMatrix::Zero(clusters, n_areas);
      s.assignment_v = RowMatrix::Zero(clusters, n_areas);
      s.sigma_uc = Eigen::VectorXd::Constant(clusters, 0.5);
      s.sigma_vc = Eigen::VectorXd::Constant(clusters, 0.5);
    }
    return s;
  }
};

// ---- likelihood -------------------------------------------------------------

/// NB log pmf with mean lambda and dispersion r (success probability r/(r+lambda)).
inline double nb_log_pmf(std::int64_t y, double lambda, double r) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("nb_log_pmf: lambda must be positive");
  if (!(r > 0.0) || !std::isfinite(r)) throw std::invalid_argument("nb_log_pmf: r must be positive");
  if (y < 0) throw std::invalid_argument("nb_log_pmf: negative count");
  const double ratio = lambda / r;
  const double log1p_ratio = std::log1p(ratio);
  const auto yd = static_cast<double>(y);
  // r log(r/(r+l)) + y log(l/(r+l)), written to stay accurate as r grows.
  double value = log_rising_factorial(r, y) - log_gamma(yd + 1.0) - r * log1p_ratio;
  if (y > 0) value += yd * (std::log(ratio) - log1p_ratio);
  return value;
}

/// The lambda-dependent part of the NB log pmf in terms of the log mean:
/// y * eta - (y + r) * log(r + exp(eta)).
inline double nb_kernel(double y, double log_lambda, double r, double log_r) {
  return y * log_lambda - (y + r) * log_add_exp(log_r, log_lambda);
}

/// log N_i + alpha + b_it' eta_c + u_i + v_i + gamma_t for 0-based t >= L.
inline double linear_predictor(const ParameterState& state, const PanelDataset& data, const CrossBasis& cb, int i,
                               int t, int c) {
  const Eigen::Index row = cb.row_index(i, t);
  const double smooth = cb.rows.row(row).dot(state.eta.row(c));
  return std::log(data.offsets[i]) + state.alpha + smooth + state.u[i] + state.v[i] + state.gamma[t];
}

/// Sum over modelled times of log NB(Y_it | lambda_it(c), r).
inline double area_cluster_loglik(const ParameterState& state, const PanelDataset& data, const CrossBasis& cb, int i,
                                  int c) {
  const double r = state.r();
  double acc = 0.0;
  for (int t = cb.max_lag; t < cb.n_times; ++t)
    acc += nb_log_pmf(data.counts(i, t), std::exp(linear_predictor(state, data, cb, i, t, c)), r);
  return acc;
}

/// Likelihood of the standard model, evaluated without reference to z.
inline double standard_log_likelihood(const ParameterState& state, const PanelDataset& data, const CrossBasis& cb) {
  const double r = state.r();
  double total = 0.0;
  for (int i = 0; i < data.n_areas(); ++i) {
    const double log_offset = std::log(data.offsets[i]);
    double area_total = 0.0;
    for (int t = cb.max_lag; t < cb.n_times; ++t) {
      const double pred = log_offset + state.alpha + cb.rows.row(cb.row_index(i, t)).dot(state.eta.row(0)) +
                          state.u[i] + state.v[i] + state.gamma[t];
      area_total += nb_log_pmf(data.counts(i, t), std::exp(pred), r);
    }
    total += area_total;
  }
  return total;
}

/// Likelihood of a mixture conditional on the allocations z.
inline double mixture_log_likelihood(const ParameterState& state, const PanelDataset& data, const CrossBasis& cb) {
  double total = 0.0;
  for (int i = 0; i < data.n_areas(); ++i) total += area_cluster_loglik(state, data, cb, i, state.z[static_cast<std::size_t>(i)]);
  return total;
}

// ---- priors -----------------------------------------------------------------

inline double rw2_quad_form(std::span<const double> gamma) {
  double acc = 0.0;
  for (std::size_t t = 2; t < gamma.size(); ++t) {
    const double d = gamma[t] - 2.0 * gamma[t - 1] + gamma[t - 2];
    acc += d * d;
  }
  return acc;
}

/// Change of the RW2 quadratic form when gamma_t moves by delta.
inline double rw2_delta(std::span<const double> gamma, int t, double delta) {
  const auto len = static_cast<int>(gamma.size());
  double acc = 0.0;
  // Second difference at s involves (gamma_s, gamma_{s-1}, gamma_{s-2}) with weights (1, -2, 1).
  for (int s = std::max(2, t); s <= std::min(len - 1, t + 2); ++s) {
    const double d = gamma[s] - 2.0 * gamma[s - 1] + gamma[s - 2];
    const double w = (s == t) ? 1.0 : (s == t + 1 ? -2.0 : 1.0);
    acc += 2.0 * w * delta * d + w * w * delta * delta;
  }
  return acc;
}

inline int rw2_rank(int n_times) { return std::max(0, n_times - 2); }

inline double uniform_sd_log_density(double sigma, double upper) {
  return (sigma > 0.0 && sigma < upper) ? -std::log(upper) : kNegInf;
}

/// Categorical prior of the allocations given q: sum_i log q_{i, z_i}.
inline double allocation_log_prior(const ParameterState& state) {
  double acc = 0.0;
  for (std::size_t i = 0; i < state.z.size(); ++i) acc += std::log(state.q(static_cast<Eigen::Index>(i), state.z[i]));
  return acc;
}

/// Dir(1, ..., 1) updated by one categorical observation z (0-based).
inline std::vector<double> flat_membership_concentration(int z, int clusters) {
  std::vector<double> conc(static_cast<std::size_t>(clusters), 1.0);
  conc[static_cast<std::size_t>(z)] += 1.0;
  return conc;
}

inline Eigen::VectorXd dirichlet_mean(std::span<const double> concentration) {
  double total = 0.0;
  for (double a : concentration) total += a;
  Eigen::VectorXd m(static_cast<Eigen::Index>(concentration.size()));
  for (std::size_t c = 0; c < concentration.size(); ++c) m[static_cast<Eigen::Index>(c)] = concentration[c] / total;
  return m;
}

/// Softmax over clusters of u_i^c + v_i^c.
inline Eigen::VectorXd assignment_probabilities(const RowMatrix& assignment_u, const RowMatrix& assignment_v, int i) {
  const auto clusters = assignment_u.rows();
  std::vector<double> logits(static_cast<std::size_t>(clusters));
  for (Eigen::Index c = 0; c < clusters; ++c) logits[static_cast<std::size_t>(c)] = assignment_u(c, i) + assignment_v(c, i);
  return softmax(logits);
}

/// Sum of: Gamma prior on r; Normal priors on alpha and every eta entry; the
/// constrained CAR, iid Normal and RW2 priors on u, v, gamma (normalized on
/// their constrained subspaces); uniform priors on sigma_u, sigma_v,
/// sigma_gamma; for mixtures the categorical prior of z (the flat Dirichlet
/// contributes a constant and is dropped); for the spatial mixture the CAR and
/// Normal priors of each non-reference assignment field and HalfNormal priors
/// on every sigma_uc, sigma_vc. Out-of-support standard deviations give -inf.
inline double log_prior(const ParameterState& s, const ModelSpec& spec, const AdjacencyGraph& graph) {
  const PriorSpec& p = spec.priors;
  double lp = 0.0;
  lp += gamma_log_density_logx(s.log_r, p.r_shape, p.r_rate);
  lp += normal_log_density(s.alpha, 0.0, p.alpha_sd);
  for (Eigen::Index k = 0; k < s.eta.size(); ++k) lp += normal_log_density(s.eta.data()[k], 0.0, p.eta_sd);

  const double su = uniform_sd_log_density(s.sigma_u, p.sigma_u_upper);
  const double sv = uniform_sd_log_density(s.sigma_v, p.sigma_v_upper);
  const double sg = uniform_sd_log_density(s.sigma_gamma, p.sigma_gamma_upper);
  if (su == kNegInf || sv == kNegInf || sg == kNegInf) return kNegInf;
  lp += su + sv + sg;

  lp += rank_deficient_normal_log_density(car_pairwise_sum(as_span(s.u), graph), graph.car_rank(),
                                          s.sigma_u * s.sigma_u);
  lp += rank_deficient_normal_log_density(s.v.squaredNorm(), std::max<double>(0.0, static_cast<double>(s.v.size()) - 1.0),
                                          s.sigma_v * s.sigma_v);
  lp += rank_deficient_normal_log_density(rw2_quad_form(as_span(s.gamma)), rw2_rank(static_cast<int>(s.gamma.size())),
                                          s.sigma_gamma * s.sigma_gamma);

  if (!spec.is_mixture()) return lp;
  lp += allocation_log_prior(s);
  if (spec.variant != ModelVariant::mixture_spatial) return lp;

  const int clusters = s.clusters();
  const double n = static_cast<double>(s.u.size());
  for (int c = 0; c < clusters; ++c) {
    lp += half_normal_log_density(s.sigma_uc[c], p.assignment_sd_scale);
    lp += half_normal_log_density(s.sigma_vc[c], p.assignment_sd_scale);
    if (c == clusters - 1) continue;  // reference category, pinned at zero
    const auto uc = row_span(s.assignment_u, c);
    const auto vc = row_span(s.assignment_v, c);
    lp += rank_deficient_normal_log_density(car_pairwise_sum(uc, graph), graph.car_rank(), s.sigma_uc[c] * s.sigma_uc[c]);
    double vv = 0.0;
    for (double x : vc) vv += x * x;
    lp += rank_deficient_normal_log_density(vv, n, s.sigma_vc[c] * s.sigma_vc[c]);
  }
  return lp;
}

inline double log_likelihood(const ParameterState& state, const ModelSpec& spec, const PanelDataset& data,
                             const CrossBasis& cb) {
  return spec.is_mixture() ? mixture_log_likelihood(state, data, cb) : standard_log_likelihood(state, data, cb);
}

inline double log_posterior(const ParameterState& state, const ModelSpec& spec, const PanelDataset& data,
                            const CrossBasis& cb) {
  const double lp = log_prior(state, spec, data.graph);
  if (lp == kNegInf) return kNegInf;
  return log_likelihood(state, spec, data, cb) + lp;
}

// ---- cross-basis configuration from data -------------------------------------

enum class KnotPlacement { value, percentile };

/// Exposure knots equally spaced on the value scale (or at equally spaced
/// percentiles) between the pooled minimum and maximum; lag knots equally
/// spaced on [0, L].
inline CrossBasisSpec make_crossbasis_spec(const Eigen::MatrixXd& exposure, int max_lag, int exposure_knots = 2,
                                           int lag_knots = 1, KnotPlacement placement = KnotPlacement::value,
                                           bool exposure_intercept = false, bool lag_intercept = true) {
  const double lo = exposure.minCoeff();
  const double hi = exposure.maxCoeff();
  if (!(hi > lo)) throw std::invalid_argument("cross-basis: exposure has no spread");
  SplineSpec xs;
  xs.boundary_knots = {lo, hi};
  xs.include_intercept = exposure_intercept;
  if (placement == KnotPlacement::value) {
    xs.interior_knots = equally_spaced_knots(lo, hi, exposure_knots);
  } else {
    std::vector<double> pooled(exposure.data(), exposure.data() + exposure.size());
    std::sort(pooled.begin(), pooled.end());
    for (int k = 1; k <= exposure_knots; ++k)
      xs.interior_knots.push_back(sorted_quantile(pooled, static_cast<double>(k) / (exposure_knots + 1)));
  }
  CrossBasisSpec spec;
  spec.max_lag = max_lag;
  spec.exposure_basis = xs;
  spec.lag_basis = default_lag_basis(max_lag, lag_knots, lag_intercept);
  return spec;
}

inline CrossBasis build_crossbasis(const PanelDataset& data, const CrossBasisSpec& spec) {
  return build_crossbasis(data.exposure, spec);
}

}  // namespace dlnmclust
