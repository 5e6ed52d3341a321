#pragma once

// Natural cubic spline bases and the exposure-lag cross-basis.
//
// The natural spline basis is the cardinal (interpolating) basis on the full
// knot sequence: basis function j equals 1 at knot j and 0 at every other knot,
// has zero second derivative at both boundary knots and continues linearly
// beyond them. Without an intercept the function attached to the left boundary
// knot is dropped, leaving the natural splines that vanish there. Coefficients
// are therefore read directly as function values at the knots.

#include "dlnmclust/numeric.hpp"

#include <Eigen/Cholesky>

#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dlnmclust {

enum class BasisKind {
  natural_cubic,  ///< natural cubic spline (default)
  linear,         ///< the identity x, plus a constant column with intercept
  constant,       ///< a single column equal to 1
};

struct SplineSpec {
  std::vector<double> interior_knots;
  std::pair<double, double> boundary_knots{0.0, 1.0};
  bool include_intercept = false;
  BasisKind kind = BasisKind::natural_cubic;

  int dimension() const {
    switch (kind) {
      case BasisKind::constant: return 1;
      case BasisKind::linear: return include_intercept ? 2 : 1;
      case BasisKind::natural_cubic: break;
    }
    return static_cast<int>(interior_knots.size()) + 1 + (include_intercept ? 1 : 0);
  }

  void validate() const {
    if (kind != BasisKind::natural_cubic) return;
    const auto [lo, hi] = boundary_knots;
    if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
      throw std::invalid_argument("spline: boundary knots must be finite with lower < upper");
    for (std::size_t k = 0; k < interior_knots.size(); ++k) {
      const double knot = interior_knots[k];
      if (!(knot > lo && knot < hi))
        throw std::invalid_argument("spline: interior knot outside the boundary knots");
      if (k > 0 && !(knot > interior_knots[k - 1]))
        throw std::invalid_argument("spline: interior knots must be strictly increasing");
    }
  }
};

/// Precomputed evaluator for one SplineSpec.
class SplineBasis {
 public:
  SplineBasis() = default;

  explicit SplineBasis(SplineSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind != BasisKind::natural_cubic) return;

    knots_.push_back(spec_.boundary_knots.first);
    knots_.insert(knots_.end(), spec_.interior_knots.begin(), spec_.interior_knots.end());
    knots_.push_back(spec_.boundary_knots.second);
    const auto k = static_cast<Eigen::Index>(knots_.size());

    // Second derivatives at the knots of each cardinal function: solve the
    // tridiagonal continuity system with zero end moments.
    second_deriv_ = Eigen::MatrixXd::Zero(k, k);
    if (k > 2) {
      const Eigen::Index inner = k - 2;
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(inner, inner);
      Eigen::MatrixXd b = Eigen::MatrixXd::Zero(inner, k);
      for (Eigen::Index i = 0; i < inner; ++i) {
        const double h0 = knots_[i + 1] - knots_[i];
        const double h1 = knots_[i + 2] - knots_[i + 1];
        a(i, i) = (h0 + h1) / 3.0;
        if (i + 1 < inner) {
          a(i, i + 1) = h1 / 6.0;
          a(i + 1, i) = h1 / 6.0;
        }
        b(i, i) = 1.0 / h0;
        b(i, i + 1) = -1.0 / h0 - 1.0 / h1;
        b(i, i + 2) = 1.0 / h1;
      }
      second_deriv_.middleRows(1, inner) = a.llt().solve(b);
    }
  }

  const SplineSpec& spec() const { return spec_; }
  int dimension() const { return spec_.dimension(); }

  /// Writes dimension() basis values at x into out.
  void evaluate(double x, std::span<double> out) const {
    if (!std::isfinite(x)) throw std::invalid_argument("spline: non-finite argument");
    if (out.size() != static_cast<std::size_t>(dimension()))
      throw std::invalid_argument("spline: output size mismatch");
    switch (spec_.kind) {
      case BasisKind::constant:
        out[0] = 1.0;
        return;
      case BasisKind::linear:
        if (spec_.include_intercept) {
          out[0] = 1.0;
          out[1] = x;
        } else {
          out[0] = x;
        }
        return;
      case BasisKind::natural_cubic:
        break;
    }
    const std::size_t first = spec_.include_intercept ? 0 : 1;
    const std::size_t last = knots_.size() - 1;
    for (std::size_t j = first; j < knots_.size(); ++j) out[j - first] = cardinal(j, x, last);
  }

  Eigen::VectorXd operator()(double x) const {
    Eigen::VectorXd out(dimension());
    evaluate(x, {out.data(), static_cast<std::size_t>(out.size())});
    return out;
  }

 private:
  double cardinal(std::size_t j, double x, std::size_t last) const {
    const auto jj = static_cast<Eigen::Index>(j);
    auto value_at = [&](std::size_t knot) { return knot == j ? 1.0 : 0.0; };
    if (x <= knots_[0]) {
      const double h = knots_[1] - knots_[0];
      const double slope = (value_at(1) - value_at(0)) / h - h * second_deriv_(1, jj) / 6.0;
      return value_at(0) + slope * (x - knots_[0]);
    }
    if (x >= knots_[last]) {
      const double h = knots_[last] - knots_[last - 1];
      const double slope =
          (value_at(last) - value_at(last - 1)) / h + h * second_deriv_(static_cast<Eigen::Index>(last - 1), jj) / 6.0;
      return value_at(last) + slope * (x - knots_[last]);
    }
    const auto seg = static_cast<std::size_t>(
        std::upper_bound(knots_.begin(), knots_.end(), x) - knots_.begin() - 1);
    const double x0 = knots_[seg];
    const double x1 = knots_[seg + 1];
    const double h = x1 - x0;
    const double a = x1 - x;
    const double b = x - x0;
    const double m0 = second_deriv_(static_cast<Eigen::Index>(seg), jj);
    const double m1 = second_deriv_(static_cast<Eigen::Index>(seg + 1), jj);
    return value_at(seg) * a / h + value_at(seg + 1) * b / h + m0 * (a * a * a / h - h * a) / 6.0 +
           m1 * (b * b * b / h - h * b) / 6.0;
  }

  SplineSpec spec_;
  std::vector<double> knots_;
  Eigen::MatrixXd second_deriv_;  // knot x cardinal function
};

inline Eigen::VectorXd natural_spline_basis(double x, const SplineSpec& spec) { return SplineBasis(spec)(x); }

/// `count` interior knots equally spaced strictly between lo and hi.
inline std::vector<double> equally_spaced_knots(double lo, double hi, int count) {
  std::vector<double> knots;
  for (int k = 1; k <= count; ++k) knots.push_back(lo + (hi - lo) * k / (count + 1));
  return knots;
}

/// Rows t = L..T-1 (0-based) holding (x_t, x_{t-1}, ..., x_{t-L}).
inline Eigen::MatrixXd build_lag_matrix(std::span<const double> series, int max_lag) {
  const auto t_len = static_cast<int>(series.size());
  if (max_lag < 0) throw std::invalid_argument("lag matrix: negative maximum lag");
  if (t_len <= max_lag) throw std::invalid_argument("lag matrix: series length must exceed the maximum lag");
  Eigen::MatrixXd out(t_len - max_lag, max_lag + 1);
  for (int t = max_lag; t < t_len; ++t)
    for (int l = 0; l <= max_lag; ++l) out(t - max_lag, l) = series[static_cast<std::size_t>(t - l)];
  return out;
}

struct CrossBasisSpec {
  int max_lag = 0;
  SplineSpec exposure_basis;
  SplineSpec lag_basis{{}, {0.0, 1.0}, false, BasisKind::constant};

  int exposure_dim() const { return exposure_basis.dimension(); }
  int lag_dim() const { return lag_basis.dimension(); }
  int columns() const { return exposure_dim() * lag_dim(); }

  void validate() const {
    if (max_lag < 0) throw std::invalid_argument("cross-basis: negative maximum lag");
    exposure_basis.validate();
    lag_basis.validate();
    for (double knot : lag_basis.interior_knots)
      if (knot > max_lag) throw std::invalid_argument("cross-basis: lag knot beyond the maximum lag");
  }
};

/// Lag basis with `interior_count` equally spaced knots on [0, L] and an
/// intercept; collapses to a constant basis when L = 0.
inline SplineSpec default_lag_basis(int max_lag, int interior_count = 1, bool intercept = true) {
  if (max_lag == 0) return {{}, {0.0, 1.0}, false, BasisKind::constant};
  return {equally_spaced_knots(0.0, max_lag, interior_count), {0.0, static_cast<double>(max_lag)}, intercept,
          BasisKind::natural_cubic};
}

/// Cross-basis rows for an n x T exposure panel. Row (i, t) sits at
/// i * (T - L) + (t - L) for 0-based t >= L; earlier times are dropped.
struct CrossBasis {
  RowMatrix rows;
  int n_areas = 0;
  int n_times = 0;
  int max_lag = 0;

  int times_per_area() const { return n_times - max_lag; }
  int columns() const { return static_cast<int>(rows.cols()); }
  /// 1-based inclusive range of times that carry a row.
  std::pair<int, int> valid_time_range() const { return {max_lag + 1, n_times}; }
  Eigen::Index row_index(int area, int time0) const {
    if (time0 < max_lag || time0 >= n_times) throw std::out_of_range("cross-basis: time outside the valid range");
    return static_cast<Eigen::Index>(area) * times_per_area() + (time0 - max_lag);
  }
};

inline CrossBasis build_crossbasis(const Eigen::MatrixXd& exposure, const CrossBasisSpec& spec) {
  spec.validate();
  const auto n = static_cast<int>(exposure.rows());
  const auto t_len = static_cast<int>(exposure.cols());
  const int lag = spec.max_lag;
  if (t_len <= lag) throw std::invalid_argument("cross-basis: series length must exceed the maximum lag");
  if (!exposure.allFinite()) throw std::invalid_argument("cross-basis: non-finite exposure");

  const SplineBasis xb(spec.exposure_basis);
  const SplineBasis lb(spec.lag_basis);
  const int vx = xb.dimension();
  const int vl = lb.dimension();

  Eigen::MatrixXd lag_values(lag + 1, vl);
  for (int l = 0; l <= lag; ++l) lag_values.row(l) = lb(static_cast<double>(l)).transpose();

  CrossBasis cb;
  cb.n_areas = n;
  cb.n_times = t_len;
  cb.max_lag = lag;
  cb.rows = RowMatrix::Zero(static_cast<Eigen::Index>(n) * (t_len - lag), vx * vl);

  Eigen::MatrixXd xvals(t_len, vx);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < t_len; ++t) xvals.row(t) = xb(exposure(i, t)).transpose();
    for (int t = lag; t < t_len; ++t) {
      auto row = cb.rows.row(cb.row_index(i, t));
      for (int l = 0; l <= lag; ++l)
        for (int j = 0; j < vx; ++j) {
          const double bx = xvals(t - l, j);
          for (int k = 0; k < vl; ++k) row[j * vl + k] += bx * lag_values(l, k);
        }
    }
  }
  return cb;
}

}  // namespace dlnmclust
