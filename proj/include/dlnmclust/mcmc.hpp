#pragma once

// Metropolis building blocks: the accept step, a Robbins-Monro tuner for
// random-walk scales, and an adaptive (empirical covariance) block proposal.

#include "dlnmclust/numeric.hpp"

#include <Eigen/Cholesky>

#include <cmath>

namespace dlnmclust {

inline double acceptance_probability(double log_ratio) {
  if (std::isnan(log_ratio)) return 0.0;
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

/// Consumes one uniform only when the ratio is below one.
inline bool metropolis_accept(double log_ratio, Rng& rng) {
  if (std::isnan(log_ratio) || log_ratio == kNegInf) return false;
  if (log_ratio >= 0.0) return true;
  return std::log(draw_uniform(rng)) < log_ratio;
}

/// Random-walk scale tuned on the log scale toward a target acceptance rate,
/// with gain 1 / ceil(sweep / window). Only called during burn-in.
class StepSizeTuner {
 public:
  StepSizeTuner() = default;
  StepSizeTuner(double initial_scale, double target) : log_scale_(std::log(initial_scale)), target_(target) {}

  double scale() const { return std::exp(log_scale_); }
  double log_scale() const { return log_scale_; }
  void set_log_scale(double value) { log_scale_ = value; }
  double target() const { return target_; }

  void update(double accept_prob, int sweep, int window) {
    const double k = std::ceil(static_cast<double>(std::max(sweep, 1)) / static_cast<double>(std::max(window, 1)));
    log_scale_ += (accept_prob - target_) / k;
    log_scale_ = std::clamp(log_scale_, kMinLogScale, kMaxLogScale);
  }

 private:
  static constexpr double kMinLogScale = -18.0;
  static constexpr double kMaxLogScale = 14.0;
  double log_scale_ = 0.0;
  double target_ = 0.44;
};

/// Gaussian random-walk block proposal whose shape is learned from the chain
/// (running covariance) and whose overall size is Robbins-Monro tuned.
class AdaptiveBlockProposal {
 public:
  AdaptiveBlockProposal() = default;
  AdaptiveBlockProposal(Eigen::MatrixXd initial_covariance, double target)
      : dim_(static_cast<int>(initial_covariance.rows())),
        tuner_(1.0, target),
        mean_(Eigen::VectorXd::Zero(dim_)),
        m2_(Eigen::MatrixXd::Zero(dim_, dim_)) {
    set_covariance(initial_covariance);
  }

  int dim() const { return dim_; }
  StepSizeTuner& tuner() { return tuner_; }
  const StepSizeTuner& tuner() const { return tuner_; }
  const Eigen::MatrixXd& covariance() const { return cov_; }
  long long samples_recorded() const { return count_; }
  const Eigen::VectorXd& running_mean() const { return mean_; }
  const Eigen::MatrixXd& running_m2() const { return m2_; }

  void set_covariance(const Eigen::MatrixXd& cov) {
    cov_ = 0.5 * (cov + cov.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(cov_);
    if (llt.info() != Eigen::Success) {
      // Regularize toward the diagonal until positive definite.
      Eigen::MatrixXd jitter = cov_;
      double eps = 1e-12 * std::max(1.0, cov_.diagonal().cwiseAbs().maxCoeff());
      do {
        jitter.diagonal().array() += eps;
        llt.compute(jitter);
        eps *= 10.0;
      } while (llt.info() != Eigen::Success);
      cov_ = jitter;
    }
    chol_ = llt.matrixL();
  }

  void restore_running(long long count, Eigen::VectorXd mean, Eigen::MatrixXd m2) {
    count_ = count;
    mean_ = std::move(mean);
    m2_ = std::move(m2);
  }

  Eigen::VectorXd propose(Rng& rng) const {
    Eigen::VectorXd e(dim_);
    for (int k = 0; k < dim_; ++k) e[k] = draw_normal(rng);
    return tuner_.scale() * (chol_ * e);
  }

  void record(const Eigen::VectorXd& x) {
    ++count_;
    const Eigen::VectorXd delta = x - mean_;
    mean_ += delta / static_cast<double>(count_);
    m2_ += delta * (x - mean_).transpose();
  }

  /// Replaces the proposal shape with 2.38^2 / d times the running covariance
  /// once enough samples have been seen.
  void refresh() {
    if (count_ < 2 * static_cast<long long>(dim_) + 10) return;
    Eigen::MatrixXd cov = m2_ / static_cast<double>(count_ - 1);
    const double floor = 1e-10 * std::max(1e-300, cov.diagonal().maxCoeff());
    cov.diagonal().array() += floor;
    set_covariance((2.38 * 2.38 / dim_) * cov);
  }

 private:
  int dim_ = 0;
  StepSizeTuner tuner_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd chol_;
  long long count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

}  // namespace dlnmclust
