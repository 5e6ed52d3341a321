#pragma once

// Small numerical helpers shared by every module: stable log-space arithmetic,
// log densities, type-7 quantiles and the random draws used by the sampler and
// the simulator. All randomness flows through a single engine type; distribution
// objects are built per draw so that the engine is the only carrier of state.

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace dlnmclust {

using Rng = std::mt19937_64;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLog2Pi = 1.8378770664093454836;

inline std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

inline std::span<const double> row_span(const RowMatrix& m, Eigen::Index row) {
  return {m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())};
}

/// Thread-safe log-gamma (std::lgamma may write the global signgam).
inline double log_gamma(double x) { return boost::math::lgamma(x); }

inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return kNegInf;
  const double m = *std::max_element(xs.begin(), xs.end());
  if (m == kNegInf) return kNegInf;
  if (std::isinf(m)) return m;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - m);
  return m + std::log(acc);
}

/// Softmax with max-subtraction; the result always lies on the simplex.
inline Eigen::VectorXd softmax(std::span<const double> logits) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(logits.size()));
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[static_cast<Eigen::Index>(k)] = std::exp(logits[k] - m);
    total += out[static_cast<Eigen::Index>(k)];
  }
  out /= total;
  return out;
}

/// lgamma(y + r) - lgamma(r) for integer y >= 0. Small counts use the exact
/// product form, which avoids cancellation when r is huge.
inline double log_rising_factorial(double r, long long y) {
  if (y < 0) throw std::invalid_argument("log_rising_factorial: negative count");
  if (y < 64) {
    double acc = 0.0;
    for (long long k = 0; k < y; ++k) acc += std::log(r + static_cast<double>(k));
    return acc;
  }
  return log_gamma(static_cast<double>(y) + r) - log_gamma(r);
}

inline double normal_log_density(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * kLog2Pi - std::log(sd) - 0.5 * z * z;
}

/// Gamma(shape, rate) log density written in terms of log(x), so that values of
/// x below the double range still have a finite density.
inline double gamma_log_density_logx(double log_x, double shape, double rate) {
  return shape * std::log(rate) - log_gamma(shape) + (shape - 1.0) * log_x - rate * std::exp(log_x);
}

inline double half_normal_log_density(double x, double scale) {
  if (x < 0.0) return kNegInf;
  const double z = x / scale;
  return 0.5 * std::log(2.0 / std::numbers::pi) - std::log(scale) - 0.5 * z * z;
}

/// Gaussian log density of a field whose precision has the given rank and
/// quadratic form; used for intrinsic CAR, RW2 and constrained iid effects.
inline double rank_deficient_normal_log_density(double quad_form, double rank, double sigma2) {
  return -0.5 * rank * (kLog2Pi + std::log(sigma2)) - 0.5 * quad_form / sigma2;
}

/// Type-7 (linear interpolation) quantile of already sorted values.
inline double sorted_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return sorted_quantile(values, p);
}

inline double mean_of(std::span<const double> xs) {
  double acc = 0.0;
  for (double x : xs) acc += x;
  return acc / static_cast<double>(xs.size());
}

// ---- random draws -----------------------------------------------------------

inline double draw_uniform(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Uniform integer on [lo, hi].
inline int draw_uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline double draw_normal(Rng& rng, double mean = 0.0, double sd = 1.0) {
  return std::normal_distribution<double>(mean, sd)(rng);
}

inline double draw_gamma(Rng& rng, double shape, double scale) {
  return std::gamma_distribution<double>(shape, scale)(rng);
}

inline Eigen::VectorXd draw_dirichlet(Rng& rng, std::span<const double> concentration) {
  Eigen::VectorXd g(static_cast<Eigen::Index>(concentration.size()));
  for (std::size_t k = 0; k < concentration.size(); ++k)
    g[static_cast<Eigen::Index>(k)] = draw_gamma(rng, concentration[k], 1.0);
  return g / g.sum();
}

/// Categorical draw from unnormalized log weights (0-based index).
inline int draw_categorical_log(Rng& rng, std::span<const double> log_weights) {
  const double total = log_sum_exp(log_weights);
  if (!std::isfinite(total)) throw std::runtime_error("categorical draw with no finite weight");
  double u = draw_uniform(rng);
  for (std::size_t k = 0; k < log_weights.size(); ++k) {
    const double p = std::exp(log_weights[k] - total);
    if (u < p) return static_cast<int>(k);
    u -= p;
  }
  // Rounding residue: return the last category with positive weight.
  for (std::size_t k = log_weights.size(); k-- > 0;)
    if (log_weights[k] > kNegInf) return static_cast<int>(k);
  return 0;
}

/// NB(mean lambda, dispersion r) as a Gamma-Poisson mixture.
inline long long draw_negative_binomial(Rng& rng, double lambda, double r) {
  const double rate = draw_gamma(rng, r, lambda / r);
  if (rate <= 0.0) return 0;
  return std::poisson_distribution<long long>(rate)(rng);
}

}  // namespace dlnmclust
