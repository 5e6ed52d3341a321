#pragma once

// Adaptive Metropolis-within-Gibbs sampler for the standard DLNM and the flat
// and spatially smoothed mixtures.
//
// A sweep updates, in order: log r, alpha, each eta_c (block), the u sites,
// the v sites, the gamma sites, the three standard deviations, then z, then q
// (flat mixture) or the assignment fields (spatial mixture).
//
// A few extra moves sit next to the random walks because the single-site and
// diagonal proposals alone mix far too slowly on realistic panels:
//   * (eta_c, alpha) and the whole of u and of gamma also get an independence
//     style proposal from a one-step Newton (IWLS) Gaussian approximation of
//     the conditional posterior, corrected by Metropolis-Hastings;
//   * an intercept ridge move trades alpha against the cross-basis columns;
//   * z_i may jump together with a compensating shift of v_i.
// Each is an exact Metropolis-Hastings step, so the target is unchanged.
//
// Sum-to-zero constraints on u, v and gamma are kept exactly by the moves
// themselves: a site proposal x_k += d is paired with x -= d / m on the
// constrained set and alpha += d / m, so only the observations of site k see a
// change of the linear predictor. The shared shift is carried lazily in a
// pending offset and materialized at the end of each block. The structured
// assignment fields use the same device with the level carried by v^c.
//
// Proposal scales adapt only during burn-in and are frozen afterwards.

#include "dlnmclust/kmeans.hpp"
#include "dlnmclust/mcmc.hpp"
#include "dlnmclust/model.hpp"
#include "dlnmclust/relabel.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <exception>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace dlnmclust {

enum class PointwiseLikelihood {
  conditional,  ///< log NB(y_it | lambda_it(z_i), r) at the drawn allocation
  marginal,     ///< log sum_c q_ic NB(y_it | lambda_it(c), r)
};

struct SamplerConfig {
  int n_iterations = 80000;
  int burn_in = 40000;
  int thinning = 10;
  std::uint64_t seed = 1;
  int adaptation_window = 50;
  double target_accept_scalar = 0.44;
  double target_accept_block = 0.234;
  int n_chains = 1;
  /// Drop the data likelihood entirely (prior recovery checks).
  bool flat_likelihood = false;
  PointwiseLikelihood pointwise = PointwiseLikelihood::conditional;

  int retained_draws() const { return (n_iterations - burn_in) / thinning; }

  void validate() const {
    if (n_iterations < 1) throw std::invalid_argument("sampler: n_iterations must be positive");
    if (burn_in < 0 || burn_in >= n_iterations) throw std::invalid_argument("sampler: need 0 <= burn_in < n_iterations");
    if (thinning < 1) throw std::invalid_argument("sampler: thinning must be at least 1");
    if (adaptation_window < 1) throw std::invalid_argument("sampler: adaptation_window must be at least 1");
    if (n_chains < 1) throw std::invalid_argument("sampler: n_chains must be at least 1");
    for (double t : {target_accept_scalar, target_accept_block})
      if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("sampler: target acceptance must lie in (0, 1)");
  }
};

struct PosteriorDraws {
  ModelVariant variant = ModelVariant::standard;
  int clusters = 1;
  std::vector<ParameterState> draws;
  std::vector<int> sweeps;              // 1-based sweep index of each retained draw
  Eigen::MatrixXd loglik;               // draws x observations (area-major, t >= L)
  std::vector<std::pair<std::string, double>> acceptance_rates;
  RowMatrix reference_eta;              // relabeling reference
  SamplerConfig config;
  std::vector<std::string> warnings;

  std::size_t size() const { return draws.size(); }
};

/// Permutes cluster labels of every draw to best match the reference rows.
inline void relabel_draws(PosteriorDraws& post, const RowMatrix& reference) {
  post.reference_eta = reference;
  if (post.clusters < 2) return;
  for (auto& s : post.draws) {
    const std::vector<int> perm = match_to_reference(s.eta, reference);
    bool identity = true;
    for (std::size_t c = 0; c < perm.size(); ++c) identity = identity && perm[c] == static_cast<int>(c);
    if (identity) continue;
    ParameterState t = s;
    for (int c = 0; c < post.clusters; ++c) {
      const int to = perm[static_cast<std::size_t>(c)];
      t.eta.row(to) = s.eta.row(c);
      t.q.col(to) = s.q.col(c);
      if (s.assignment_u.rows() > 0) {
        t.assignment_u.row(to) = s.assignment_u.row(c);
        t.assignment_v.row(to) = s.assignment_v.row(c);
        t.sigma_uc[to] = s.sigma_uc[c];
        t.sigma_vc[to] = s.sigma_vc[c];
      }
    }
    for (auto& zi : t.z) zi = perm[static_cast<std::size_t>(zi)];
    s = std::move(t);
  }
}

// ---- plain-text archive used for checkpoints ---------------------------------

class TextArchiveWriter {
 public:
  explicit TextArchiveWriter(std::ostream& os) : os_(os) {}

  void doubles(const std::string& name, std::span<const double> xs) {
    os_ << name << ' ' << xs.size();
    char buf[40];
    for (double x : xs) {
      std::snprintf(buf, sizeof buf, "%.17g", x);
      os_ << ' ' << buf;
    }
    os_ << '\n';
  }
  void scalar(const std::string& name, double x) { doubles(name, std::span<const double>(&x, 1)); }
  void vector(const std::string& name, const Eigen::VectorXd& v) { doubles(name, as_span(v)); }
  void matrix(const std::string& name, const RowMatrix& m) {
    os_ << name << "_shape 2 " << m.rows() << ' ' << m.cols() << '\n';
    doubles(name, {m.data(), static_cast<std::size_t>(m.size())});
  }
  void matrix(const std::string& name, const Eigen::MatrixXd& m) { matrix(name, RowMatrix(m)); }
  void integers(const std::string& name, std::span<const long long> xs) {
    os_ << name << ' ' << xs.size();
    for (long long x : xs) os_ << ' ' << x;
    os_ << '\n';
  }
  void integer(const std::string& name, long long x) { integers(name, std::span<const long long>(&x, 1)); }
  void text(const std::string& name, const std::string& body) {
    os_ << name << ' ' << body.size() << '\n' << body << '\n';
  }

 private:
  std::ostream& os_;
};

class TextArchiveReader {
 public:
  explicit TextArchiveReader(std::istream& is) : is_(is) {}

  std::vector<double> doubles(const std::string& name) {
    const std::size_t n = header(name);
    std::vector<double> out(n);
    std::string token;
    for (auto& x : out) {
      is_ >> token;
      x = std::strtod(token.c_str(), nullptr);
    }
    return out;
  }
  double scalar(const std::string& name) { return doubles(name).at(0); }
  Eigen::VectorXd vector(const std::string& name) {
    const auto xs = doubles(name);
    return Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size()));
  }
  RowMatrix matrix(const std::string& name) {
    const auto shape = integers(name + "_shape");
    const auto xs = doubles(name);
    return Eigen::Map<const RowMatrix>(xs.data(), static_cast<Eigen::Index>(shape.at(0)),
                                       static_cast<Eigen::Index>(shape.at(1)));
  }
  std::vector<long long> integers(const std::string& name) {
    const std::size_t n = header(name);
    std::vector<long long> out(n);
    for (auto& x : out) is_ >> x;
    return out;
  }
  long long integer(const std::string& name) { return integers(name).at(0); }
  std::string text(const std::string& name) {
    const std::size_t n = header(name);
    is_.get();  // newline
    std::string body(n, '\0');
    is_.read(body.data(), static_cast<std::streamsize>(n));
    return body;
  }

 private:
  std::size_t header(const std::string& name) {
    std::string got;
    std::size_t n = 0;
    if (!(is_ >> got >> n)) throw std::runtime_error("checkpoint: truncated while reading '" + name + "'");
    if (got != name) throw std::runtime_error("checkpoint: expected '" + name + "' but found '" + got + "'");
    return n;
  }
  std::istream& is_;
};

inline void write_state(TextArchiveWriter& ar, const ParameterState& s) {
  ar.scalar("alpha", s.alpha);
  ar.scalar("log_r", s.log_r);
  ar.matrix("eta", s.eta);
  ar.vector("u", s.u);
  ar.vector("v", s.v);
  ar.vector("gamma", s.gamma);
  ar.scalar("sigma_u", s.sigma_u);
  ar.scalar("sigma_v", s.sigma_v);
  ar.scalar("sigma_gamma", s.sigma_gamma);
  std::vector<long long> z(s.z.begin(), s.z.end());
  ar.integers("z", z);
  ar.matrix("q", s.q);
  ar.matrix("assignment_u", s.assignment_u);
  ar.matrix("assignment_v", s.assignment_v);
  ar.vector("sigma_uc", s.sigma_uc);
  ar.vector("sigma_vc", s.sigma_vc);
}

inline ParameterState read_state(TextArchiveReader& ar) {
  ParameterState s;
  s.alpha = ar.scalar("alpha");
  s.log_r = ar.scalar("log_r");
  s.eta = ar.matrix("eta");
  s.u = ar.vector("u");
  s.v = ar.vector("v");
  s.gamma = ar.vector("gamma");
  s.sigma_u = ar.scalar("sigma_u");
  s.sigma_v = ar.scalar("sigma_v");
  s.sigma_gamma = ar.scalar("sigma_gamma");
  const auto z = ar.integers("z");
  s.z.assign(z.begin(), z.end());
  s.q = ar.matrix("q");
  s.assignment_u = ar.matrix("assignment_u");
  s.assignment_v = ar.matrix("assignment_v");
  s.sigma_uc = ar.vector("sigma_uc");
  s.sigma_vc = ar.vector("sigma_vc");
  return s;
}

/// Per-area lag-correlation profiles of crude log incidence, used to seed z.
inline RowMatrix crude_lag_profiles(const PanelDataset& data, int max_lag) {
  const int n = data.n_areas();
  const int t_len = data.n_times();
  const int m = t_len - max_lag;
  Eigen::MatrixXd rate(n, m);
  for (int i = 0; i < n; ++i)
    for (int t = max_lag; t < t_len; ++t)
      rate(i, t - max_lag) = std::log((static_cast<double>(data.counts(i, t)) + 0.5) / data.offsets[i]);
  // Remove common time effects and area levels.
  const Eigen::RowVectorXd time_mean = rate.colwise().mean();
  rate.rowwise() -= time_mean;
  const Eigen::VectorXd area_mean = rate.rowwise().mean();
  rate.colwise() -= area_mean;

  RowMatrix profiles(n, max_lag + 1);
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd yi = rate.row(i).transpose();
    for (int l = 0; l <= max_lag; ++l) {
      Eigen::VectorXd xl = data.exposure.row(i).segment(max_lag - l, m).transpose();
      xl.array() -= xl.mean();
      const double denom = std::sqrt(xl.squaredNorm() * yi.squaredNorm());
      profiles(i, l) = denom > 0.0 ? xl.dot(yi) / denom : 0.0;
    }
  }
  return profiles;
}

class DlnmSampler {
 public:
  DlnmSampler(const PanelDataset& data, const CrossBasis& cb, ModelSpec spec, SamplerConfig config)
      : data_(data), cb_(cb), spec_(std::move(spec)), cfg_(config), rng_(config.seed) {
    spec_.validate();
    cfg_.validate();
    data_.validate();
    if (cb_.n_areas != data_.n_areas() || cb_.n_times != data_.n_times())
      throw std::invalid_argument("sampler: cross-basis does not match the panel");
    if (cb_.columns() != spec_.crossbasis.columns() || cb_.max_lag != spec_.crossbasis.max_lag)
      throw std::invalid_argument("sampler: cross-basis does not match the model specification");
    n_ = data_.n_areas();
    t_len_ = data_.n_times();
    lag_ = cb_.max_lag;
    m_ = t_len_ - lag_;
    nobs_ = n_ * m_;
    p_ = cb_.columns();
    clusters_ = spec_.clusters;
    use_likelihood_ = !cfg_.flat_likelihood;

    y_.resize(static_cast<std::size_t>(nobs_));
    std::map<std::int64_t, int> level_of;
    for (int i = 0; i < n_; ++i)
      for (int t = lag_; t < t_len_; ++t) {
        const std::int64_t y = data_.counts(i, t);
        y_[static_cast<std::size_t>(obs(i, t))] = static_cast<double>(y);
        level_of.emplace(y, 0);
      }
    int next = 0;
    for (auto& [y, idx] : level_of) {
      idx = next++;
      levels_.push_back(y);
    }
    level_count_.assign(levels_.size(), 0);
    obs_level_.resize(static_cast<std::size_t>(nobs_));
    lgamma_y1_.resize(static_cast<std::size_t>(nobs_));
    for (int k = 0; k < nobs_; ++k) {
      const auto y = static_cast<std::int64_t>(y_[static_cast<std::size_t>(k)]);
      obs_level_[static_cast<std::size_t>(k)] = level_of[y];
      ++level_count_[static_cast<std::size_t>(level_of[y])];
      lgamma_y1_[static_cast<std::size_t>(k)] = log_gamma(static_cast<double>(y) + 1.0);
    }
    log_offset_ = data_.offsets.array().log();
    buffer_.resize(static_cast<std::size_t>(nobs_));
    // Coefficients g with B g closest to a constant: the uncentred cross-basis
    // nearly reproduces the intercept along this direction.
    ridge_direction_ = cb_.rows.colPivHouseholderQr().solve(Eigen::VectorXd::Ones(nobs_));
    ridge_fitted_ = cb_.rows * ridge_direction_;
  }

  // ---- initialization ----

  /// Data-driven starting point: crude intercept, zero effects, k-means
  /// allocations on lag profiles (uniform random fallback).
  void initialize() {
    ParameterState s = ParameterState::zeros(n_, t_len_, p_, clusters_, spec_.variant);
    double total_y = 0.0, total_n = 0.0;
    for (int i = 0; i < n_; ++i) {
      for (int t = lag_; t < t_len_; ++t) total_y += static_cast<double>(data_.counts(i, t));
      total_n += data_.offsets[i] * m_;
    }
    s.alpha = std::log(std::max(total_y, 0.5) / total_n);
    s.log_r = std::log(2.0);
    const PriorSpec& pr = spec_.priors;
    s.sigma_u = std::min(0.5, 0.5 * pr.sigma_u_upper);
    s.sigma_v = std::min(0.5, 0.5 * pr.sigma_v_upper);
    s.sigma_gamma = std::min(0.1, 0.5 * pr.sigma_gamma_upper);
    if (clusters_ > 1) {
      auto labels = kmeans(crude_lag_profiles(data_, lag_), clusters_, rng_);
      if (labels) {
        s.z = *labels;
      } else {
        for (auto& zi : s.z) zi = std::min(clusters_ - 1, static_cast<int>(draw_uniform(rng_) * clusters_));
      }
    }
    initialize(std::move(s));
  }

  /// Starts from an explicit state; proposal scales come from the local
  /// Fisher information of the likelihood plus the prior precision.
  void initialize(ParameterState s) {
    if (s.clusters() != clusters_ || s.eta.cols() != p_ || s.u.size() != n_ || s.gamma.size() != t_len_)
      throw std::invalid_argument("sampler: initial state has the wrong shape");
    state_ = std::move(s);
    if (spec_.variant == ModelVariant::mixture_spatial) refresh_spatial_q();
    rebuild_caches();
    const double lp = log_posterior(state_, spec_, data_, cb_);
    if (!std::isfinite(lp) && use_likelihood_) {
      std::ostringstream msg;
      msg << "sampler: non-finite log posterior at initialization (alpha=" << state_.alpha << ", r=" << state_.r()
          << ", sigma_u=" << state_.sigma_u << ", sigma_v=" << state_.sigma_v
          << ", sigma_gamma=" << state_.sigma_gamma << ", log_posterior=" << lp << ")";
      throw std::runtime_error(msg.str());
    }
    init_proposals();
    sweep_ = 0;
    initialized_ = true;
  }

  // ---- running ----

  int completed_sweeps() const { return sweep_; }
  bool finished() const { return sweep_ >= cfg_.n_iterations; }
  const ParameterState& state() const { return state_; }
  const SamplerConfig& config() const { return cfg_; }
  const ModelSpec& model() const { return spec_; }

  /// Runs until `sweep_limit` sweeps have completed (or to the end).
  void run(int sweep_limit = -1) {
    if (!initialized_) initialize();
    const int stop = sweep_limit < 0 ? cfg_.n_iterations : std::min(sweep_limit, cfg_.n_iterations);
    while (sweep_ < stop) sweep();
  }

  void sweep() {
    const int k = sweep_ + 1;
    adapting_ = k <= cfg_.burn_in;
    current_sweep_ = k;
    rebuild_caches();
    update_r();
    update_alpha();
    for (int c = 0; c < clusters_; ++c) {
      update_eta(c);
      update_eta_block(c);
    }
    update_intercept_ridge();
    update_u();
    update_u_block();
    update_v();
    update_gamma();
    update_gamma_block();
    update_sigmas();
    if (spec_.is_mixture()) {
      update_z();
      update_z_shift();
      if (spec_.variant == ModelVariant::mixture_flat) update_q_flat();
      else update_assignment_fields();
    }
    end_of_sweep(k);
    sweep_ = k;
    if (k > cfg_.burn_in && (k - cfg_.burn_in) % cfg_.thinning == 0) record_draw(k);
  }

  /// Collects the retained draws, applies the relabeling and diagnostics.
  PosteriorDraws finish() const {
    PosteriorDraws post;
    post.variant = spec_.variant;
    post.clusters = clusters_;
    post.draws = draws_;
    post.sweeps = draw_sweeps_;
    post.config = cfg_;
    post.loglik.resize(static_cast<Eigen::Index>(loglik_rows_.size()), nobs_);
    for (std::size_t s = 0; s < loglik_rows_.size(); ++s)
      post.loglik.row(static_cast<Eigen::Index>(s)) =
          Eigen::Map<const Eigen::RowVectorXd>(loglik_rows_[s].data(), nobs_);
    post.acceptance_rates = acceptance_rates();

    RowMatrix reference;
    if (ref_count_ > 0) {
      reference = ref_sum_ / static_cast<double>(ref_count_);
    } else {
      reference = RowMatrix::Zero(clusters_, p_);
      for (const auto& s : draws_) reference += s.eta;
      if (!draws_.empty()) reference /= static_cast<double>(draws_.size());
    }
    relabel_draws(post, reference);

    if (clusters_ > 1 && !post.draws.empty()) {
      for (int c = 0; c < clusters_; ++c) {
        std::size_t empty = 0;
        for (const auto& s : post.draws)
          if (std::find(s.z.begin(), s.z.end(), c) == s.z.end()) ++empty;
        if (2 * empty > post.draws.size())
          post.warnings.push_back("cluster " + std::to_string(c + 1) + " is empty in " + std::to_string(empty) +
                                  " of " + std::to_string(post.draws.size()) + " retained draws");
      }
    }
    return post;
  }

  std::vector<std::pair<std::string, double>> acceptance_rates() const {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [name, ctr] : counters_) {
      const auto& use = ctr.post_proposed > 0 ? std::make_pair(ctr.post_accepted, ctr.post_proposed)
                                               : std::make_pair(ctr.burn_accepted, ctr.burn_proposed);
      out.emplace_back(name, use.second > 0 ? static_cast<double>(use.first) / use.second : 0.0);
    }
    return out;
  }

  /// Every adaptive log scale, in a fixed order (for freeze checks).
  std::vector<double> proposal_log_scales() const {
    std::vector<double> out{r_tuner_.log_scale(), alpha_tuner_.log_scale(), ridge_tuner_.log_scale(),
                            sigma_u_tuner_.log_scale(),
                            sigma_v_tuner_.log_scale(), sigma_gamma_tuner_.log_scale()};
    for (const auto* group : {&u_tuners_, &v_tuners_, &gamma_tuners_, &asg_sigma_u_tuners_, &asg_sigma_v_tuners_})
      for (const auto& t : *group) out.push_back(t.log_scale());
    for (const auto& b : eta_blocks_) {
      out.push_back(b.tuner().log_scale());
      for (Eigen::Index k = 0; k < b.covariance().size(); ++k) out.push_back(b.covariance().data()[k]);
    }
    for (const auto* group : {&asg_u_tuners_, &asg_v_tuners_})
      for (const auto& row : *group)
        for (const auto& t : row) out.push_back(t.log_scale());
    return out;
  }

  // ---- individual Gibbs/Metropolis steps (public for targeted tests) ----

  void update_r() {
    const double cur = state_.log_r;
    const double prop = cur + draw_normal(rng_, 0.0, r_tuner_.scale());
    const PriorSpec& pr = spec_.priors;
    double log_ratio = (gamma_log_density_logx(prop, pr.r_shape, pr.r_rate) + prop) -
                       (gamma_log_density_logx(cur, pr.r_shape, pr.r_rate) + cur);
    if (use_likelihood_ && std::isfinite(log_ratio)) {
      const double r_new = std::exp(prop);
      if (!(r_new > 0.0) || !std::isfinite(r_new)) {
        log_ratio = kNegInf;
      } else {
        double new_total = 0.0;
        for (int i = 0; i < n_; ++i) {
          const int c = zc(i);
          for (int t = lag_; t < t_len_; ++t) {
            const int o = obs(i, t);
            const double val = nb_kernel(y_[static_cast<std::size_t>(o)], predictor(i, t, o, c), r_new, prop);
            buffer_[static_cast<std::size_t>(o)] = val;
            new_total += val;
          }
        }
        double cur_total = 0.0;
        for (double x : ll_) cur_total += x;
        log_ratio += (new_total + r_constant(r_new, prop)) - (cur_total + r_constant(state_.r(), cur));
      }
    }
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) {
      state_.log_r = prop;
      r_cache_ = std::exp(prop);
      if (use_likelihood_) std::swap(ll_, buffer_);
    }
    note("r", ok, log_ratio, r_tuner_);
  }

  void update_alpha() {
    const double delta = draw_normal(rng_, 0.0, alpha_tuner_.scale());
    const double sd = spec_.priors.alpha_sd;
    double log_ratio = normal_log_density(state_.alpha + delta, 0.0, sd) - normal_log_density(state_.alpha, 0.0, sd);
    if (use_likelihood_) {
      double dll = 0.0;
      for (int i = 0; i < n_; ++i) {
        const int c = zc(i);
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const double val = kernel(o, predictor(i, t, o, c) + delta);
          buffer_[static_cast<std::size_t>(o)] = val;
          dll += val - ll_[static_cast<std::size_t>(o)];
        }
      }
      log_ratio += dll;
    }
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) {
      state_.alpha += delta;
      if (use_likelihood_) std::swap(ll_, buffer_);
    }
    note("alpha", ok, log_ratio, alpha_tuner_);
  }

  /// Block move of (eta_c, alpha). The intercept rides along because the
  /// cross-basis columns are not centred, which makes alpha and eta_c strongly
  /// correlated a posteriori.
  void update_eta(int c) {
    AdaptiveBlockProposal& block = eta_blocks_[static_cast<std::size_t>(c)];
    const Eigen::VectorXd step = block.propose(rng_);
    const auto delta = step.head(p_);
    const double d_alpha = step[p_];
    const Eigen::RowVectorXd current = state_.eta.row(c);
    const Eigen::RowVectorXd proposal = current + delta.transpose();
    const double sd = spec_.priors.eta_sd;
    double log_ratio = normal_log_density(state_.alpha + d_alpha, 0.0, spec_.priors.alpha_sd) -
                       normal_log_density(state_.alpha, 0.0, spec_.priors.alpha_sd);
    for (int k = 0; k < p_; ++k)
      log_ratio += normal_log_density(proposal[k], 0.0, sd) - normal_log_density(current[k], 0.0, sd);

    // Shift of b_it' eta_c for every observation.
    shift_.noalias() = cb_.rows * delta;
    if (use_likelihood_) {
      double dll = 0.0;
      for (int i = 0; i < n_; ++i) {
        const int ci = zc(i);
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const double val = kernel(o, predictor(i, t, o, ci) + d_alpha + (ci == c ? shift_[o] : 0.0));
          buffer_[static_cast<std::size_t>(o)] = val;
          dll += val - ll_[static_cast<std::size_t>(o)];
        }
      }
      log_ratio += dll;
    }
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) {
      state_.eta.row(c) = proposal;
      state_.alpha += d_alpha;
      s_.row(c) += shift_.transpose();
      if (use_likelihood_) std::swap(ll_, buffer_);
    }
    note("eta_" + std::to_string(c + 1), ok, log_ratio, block.tuner());
  }

  /// Joint move of (eta_c, alpha) from the Gaussian approximation of the
  /// conditional posterior at the current point.
  void update_eta_block(int c) {
    if (!use_likelihood_) return;
    const int dim = p_ + 1;
    Eigen::MatrixXd prior = Eigen::MatrixXd::Zero(dim, dim);
    prior.diagonal().head(p_).setConstant(1.0 / (spec_.priors.eta_sd * spec_.priors.eta_sd));
    prior(p_, p_) = 1.0 / (spec_.priors.alpha_sd * spec_.priors.alpha_sd);
    Eigen::VectorXd x(dim);
    x.head(p_) = state_.eta.row(c).transpose();
    x[p_] = state_.alpha;
    Eigen::VectorXd row(dim);
    row[p_] = 1.0;
    auto eval = [&](const Eigen::VectorXd& cand, BlockFit& fit) {
      fit.reset(dim);
      const Eigen::VectorXd delta = cand - x;
      const double d_alpha = delta[p_];
      for (int i = 0; i < n_; ++i) {
        const int ci = zc(i);
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const auto uo = static_cast<std::size_t>(o);
          row.head(p_) = cb_.rows.row(o).transpose();
          const double pred = predictor(i, t, o, ci) + d_alpha + (ci == c ? row.head(p_).dot(delta.head(p_)) : 0.0);
          const double val = kernel(o, pred);
          buffer_[uo] = val;
          fit.loglik += val;
          const double lambda = std::exp(pred);
          const double denom = r_cache_ + lambda;
          if (!std::isfinite(lambda) || denom <= 0.0) continue;
          const double w = lambda * r_cache_ / denom;
          const double g = r_cache_ * (y_[uo] - lambda) / denom;
          if (ci == c) {
            fit.info.selfadjointView<Eigen::Lower>().rankUpdate(row, w);
            fit.g += g * row;
          } else {
            fit.info(p_, p_) += w;
            fit.g[p_] += g;
          }
        }
      }
      fit.info = fit.info.selfadjointView<Eigen::Lower>();
    };
    if (gaussian_block_step(prior, x, eval, "eta_block_" + std::to_string(c + 1), false)) {
      state_.eta.row(c) = x.head(p_).transpose();
      state_.alpha = x[p_];
      s_.row(c).noalias() = (cb_.rows * x.head(p_)).transpose();
    }
  }

  /// Moves alpha by d and every eta_c by -d g, which shifts the linear
  /// predictor only by d (1 - b_it' g).
  void update_intercept_ridge() {
    const double d = draw_normal(rng_, 0.0, ridge_tuner_.scale());
    const double sd = spec_.priors.eta_sd;
    double log_ratio = normal_log_density(state_.alpha + d, 0.0, spec_.priors.alpha_sd) -
                       normal_log_density(state_.alpha, 0.0, spec_.priors.alpha_sd);
    for (int c = 0; c < clusters_; ++c)
      for (int k = 0; k < p_; ++k)
        log_ratio += normal_log_density(state_.eta(c, k) - d * ridge_direction_[k], 0.0, sd) -
                     normal_log_density(state_.eta(c, k), 0.0, sd);
    if (use_likelihood_) {
      double dll = 0.0;
      for (int i = 0; i < n_; ++i) {
        const int c = zc(i);
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const double val = kernel(o, predictor(i, t, o, c) + d - d * ridge_fitted_[o]);
          buffer_[static_cast<std::size_t>(o)] = val;
          dll += val - ll_[static_cast<std::size_t>(o)];
        }
      }
      log_ratio += dll;
    }
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) {
      state_.alpha += d;
      for (int c = 0; c < clusters_; ++c) {
        state_.eta.row(c) -= d * ridge_direction_.transpose();
        s_.row(c) -= d * ridge_fitted_.transpose();
      }
      if (use_likelihood_) std::swap(ll_, buffer_);
    }
    note("intercept_ridge", ok, log_ratio, ridge_tuner_);
  }

  void update_u() {
    const auto& conn = data_.graph.connected_areas();
    const auto& iso = data_.graph.isolated_areas();
    if (conn.empty()) return;
    const double m = static_cast<double>(conn.size());
    const double inv2s2 = 0.5 / (state_.sigma_u * state_.sigma_u);
    const double sd = spec_.priors.alpha_sd;
    double pending = 0.0;
    for (int i : conn) {
      StepSizeTuner& tuner = u_tuners_[static_cast<std::size_t>(i)];
      const double delta = draw_normal(rng_, 0.0, tuner.scale());
      double log_ratio = -inv2s2 * car_pairwise_delta(as_span(state_.u), data_.graph, i, delta) +
                         normal_log_density(state_.alpha + pending + delta / m, 0.0, sd) -
                         normal_log_density(state_.alpha + pending, 0.0, sd);
      if (use_likelihood_) {
        log_ratio += area_shift_delta(i, delta);
        for (int j : iso) log_ratio += area_shift_delta(j, delta / m);
      }
      const bool ok = metropolis_accept(log_ratio, rng_);
      if (ok) {
        state_.u[i] += delta;
        area_term_[i] += delta;
        commit_area(i);
        pending += delta / m;
        for (int j : iso) {
          area_term_[j] += delta / m;
          commit_area(j);
        }
      }
      note("u", ok, log_ratio, tuner);
    }
    for (int i : conn) state_.u[i] -= pending;
    state_.alpha += pending;
    refresh_area_terms();
  }

  void update_v() {
    if (n_ < 2) return;
    const double nd = static_cast<double>(n_);
    const double inv2s2 = 0.5 / (state_.sigma_v * state_.sigma_v);
    const double sd = spec_.priors.alpha_sd;
    const double sum_v = state_.v.sum();
    double pending = 0.0;
    for (int i = 0; i < n_; ++i) {
      StepSizeTuner& tuner = v_tuners_[static_cast<std::size_t>(i)];
      const double delta = draw_normal(rng_, 0.0, tuner.scale());
      // Change of sum v^2 under v += delta * (e_i - 1/n).
      const double vi = state_.v[i] - pending;
      const double dq = 2.0 * delta * vi + delta * delta - 2.0 * delta / nd * (sum_v + delta) + delta * delta / nd;
      double log_ratio = -inv2s2 * dq + normal_log_density(state_.alpha + pending + delta / nd, 0.0, sd) -
                         normal_log_density(state_.alpha + pending, 0.0, sd);
      if (use_likelihood_) log_ratio += area_shift_delta(i, delta);
      const bool ok = metropolis_accept(log_ratio, rng_);
      if (ok) {
        state_.v[i] += delta;
        area_term_[i] += delta;
        commit_area(i);
        pending += delta / nd;
      }
      note("v", ok, log_ratio, tuner);
    }
    state_.v.array() -= pending;
    state_.alpha += pending;
    refresh_area_terms();
  }

  void update_gamma() {
    if (t_len_ < 2) return;
    const double td = static_cast<double>(t_len_);
    const double inv2s2 = 0.5 / (state_.sigma_gamma * state_.sigma_gamma);
    const double sd = spec_.priors.alpha_sd;
    double pending = 0.0;
    for (int t = 0; t < t_len_; ++t) {
      StepSizeTuner& tuner = gamma_tuners_[static_cast<std::size_t>(t)];
      const double delta = draw_normal(rng_, 0.0, tuner.scale());
      double log_ratio = -inv2s2 * rw2_delta(as_span(state_.gamma), t, delta) +
                         normal_log_density(state_.alpha + pending + delta / td, 0.0, sd) -
                         normal_log_density(state_.alpha + pending, 0.0, sd);
      if (use_likelihood_ && t >= lag_) {
        for (int i = 0; i < n_; ++i) {
          const int o = obs(i, t);
          const double val = kernel(o, predictor(i, t, o, zc(i)) + delta);
          buffer_[static_cast<std::size_t>(o)] = val;
          log_ratio += val - ll_[static_cast<std::size_t>(o)];
        }
      }
      const bool ok = metropolis_accept(log_ratio, rng_);
      if (ok) {
        state_.gamma[t] += delta;
        pending += delta / td;
        if (use_likelihood_ && t >= lag_)
          for (int i = 0; i < n_; ++i) {
            const int o = obs(i, t);
            ll_[static_cast<std::size_t>(o)] = buffer_[static_cast<std::size_t>(o)];
          }
      }
      note("gamma", ok, log_ratio, tuner);
    }
    state_.gamma.array() -= pending;
    state_.alpha += pending;
  }

  /// Joint move of the structured field over the connected areas, proposed
  /// from the Gaussian approximation at the current point.
  void update_u_block() {
    const auto& conn = data_.graph.connected_areas();
    if (!use_likelihood_ || conn.size() < 2) return;
    const auto m = static_cast<int>(conn.size());
    std::vector<int> pos(static_cast<std::size_t>(n_), -1);
    for (int j = 0; j < m; ++j) pos[static_cast<std::size_t>(conn[static_cast<std::size_t>(j)])] = j;
    Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(m, m);
    for (int j = 0; j < m; ++j) {
      const int i = conn[static_cast<std::size_t>(j)];
      prec(j, j) = data_.graph.degree(i);
      for (int k : data_.graph.neighbors(i)) prec(j, pos[static_cast<std::size_t>(k)]) = -1.0;
    }
    prec /= state_.sigma_u * state_.sigma_u;
    Eigen::VectorXd x(m);
    for (int j = 0; j < m; ++j) x[j] = state_.u[conn[static_cast<std::size_t>(j)]];
    auto eval = [&](const Eigen::VectorXd& cand, BlockFit& fit) {
      fit.reset(m);
      std::copy(ll_.begin(), ll_.end(), buffer_.begin());
      for (int j = 0; j < m; ++j) {
        const int i = conn[static_cast<std::size_t>(j)];
        const double shift = cand[j] - state_.u[i];
        const int c = zc(i);
        for (int t = lag_; t < t_len_; ++t) accumulate_obs(obs(i, t), predictor(i, t, obs(i, t), c) + shift, j, fit);
      }
    };
    if (gaussian_block_step(prec, x, eval, "u_block")) {
      for (int j = 0; j < m; ++j) state_.u[conn[static_cast<std::size_t>(j)]] = x[j];
      refresh_area_terms();
    }
  }

  /// Joint move of the temporal effect from its Gaussian approximation.
  void update_gamma_block() {
    if (!use_likelihood_ || t_len_ < 3 || m_ < 2) return;
    Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(t_len_, t_len_);
    for (int t = 2; t < t_len_; ++t) {
      const int idx[3] = {t - 2, t - 1, t};
      const double wgt[3] = {1.0, -2.0, 1.0};
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) prec(idx[a], idx[b]) += wgt[a] * wgt[b];
    }
    prec /= state_.sigma_gamma * state_.sigma_gamma;
    Eigen::VectorXd x = state_.gamma;
    auto eval = [&](const Eigen::VectorXd& cand, BlockFit& fit) {
      fit.reset(t_len_);
      for (int i = 0; i < n_; ++i) {
        const int c = zc(i);
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          accumulate_obs(o, predictor(i, t, o, c) - state_.gamma[t] + cand[t], t, fit);
        }
      }
    };
    if (gaussian_block_step(prec, x, eval, "gamma_block")) state_.gamma = x;
  }

  void update_sigmas() {
    const PriorSpec& pr = spec_.priors;
    update_sd(state_.sigma_u, car_pairwise_sum(as_span(state_.u), data_.graph), data_.graph.car_rank(),
              [&](double s) { return uniform_sd_log_density(s, pr.sigma_u_upper); }, sigma_u_tuner_, "sigma_u");
    update_sd(state_.sigma_v, state_.v.squaredNorm(), std::max(0, n_ - 1),
              [&](double s) { return uniform_sd_log_density(s, pr.sigma_v_upper); }, sigma_v_tuner_, "sigma_v");
    update_sd(state_.sigma_gamma, rw2_quad_form(as_span(state_.gamma)), rw2_rank(t_len_),
              [&](double s) { return uniform_sd_log_density(s, pr.sigma_gamma_upper); }, sigma_gamma_tuner_,
              "sigma_gamma");
  }

  /// Draws each z_i from P(z_i = c | .) proportional to q_ic exp(loglik_ic).
  void update_z() {
    if (clusters_ < 2) return;
    std::vector<double> logw(static_cast<std::size_t>(clusters_));
    std::vector<double> area_ll(static_cast<std::size_t>(clusters_) * m_);
    bool moved = false;
    for (int i = 0; i < n_; ++i) {
      const int cur = zc(i);
      for (int c = 0; c < clusters_; ++c) {
        double total = 0.0;
        if (use_likelihood_) {
          for (int t = lag_; t < t_len_; ++t) {
            const int o = obs(i, t);
            const double val = c == cur ? ll_[static_cast<std::size_t>(o)] : kernel(o, predictor(i, t, o, c));
            area_ll[static_cast<std::size_t>(c * m_ + (t - lag_))] = val;
            total += val;
          }
        }
        logw[static_cast<std::size_t>(c)] = std::log(state_.q(i, c)) + total;
      }
      bool any = false;
      for (double w : logw) any = any || std::isfinite(w);
      if (!any)
        throw std::runtime_error("sampler: every allocation weight is -inf for area " + std::to_string(i + 1));
      const int next = draw_categorical_log(rng_, logw);
      if (next != cur) {
        state_.z[static_cast<std::size_t>(i)] = next;
        moved = true;
        if (use_likelihood_)
          for (int t = lag_; t < t_len_; ++t)
            ll_[static_cast<std::size_t>(obs(i, t))] = area_ll[static_cast<std::size_t>(next * m_ + (t - lag_))];
      }
    }
    if (moved) rebuild_members();
  }

  /// Moves area i to another cluster and shifts v_i by the mean change of the
  /// cross-basis term, so the area keeps its average level. The shift
  /// reverses exactly, so the proposal is symmetric.
  void update_z_shift() {
    if (clusters_ < 2 || !use_likelihood_ || n_ < 2) return;
    const double nd = static_cast<double>(n_);
    const double inv2s2 = 0.5 / (state_.sigma_v * state_.sigma_v);
    const double sd = spec_.priors.alpha_sd;
    const double sum_v = state_.v.sum();
    std::vector<double> area_ll(static_cast<std::size_t>(m_));
    double pending = 0.0;
    bool moved = false;
    for (int i = 0; i < n_; ++i) {
      const int cur = zc(i);
      const int k = draw_uniform_int(rng_, 0, clusters_ - 2);
      const int next = k >= cur ? k + 1 : k;
      double delta = 0.0;
      for (int t = lag_; t < t_len_; ++t) delta += s_(cur, obs(i, t)) - s_(next, obs(i, t));
      delta /= static_cast<double>(m_);
      const double vi = state_.v[i] - pending;
      const double dq = 2.0 * delta * vi + delta * delta - 2.0 * delta / nd * (sum_v + delta) + delta * delta / nd;
      double log_ratio = -inv2s2 * dq + normal_log_density(state_.alpha + pending + delta / nd, 0.0, sd) -
                         normal_log_density(state_.alpha + pending, 0.0, sd) + std::log(state_.q(i, next)) -
                         std::log(state_.q(i, cur));
      for (int t = lag_; t < t_len_; ++t) {
        const int o = obs(i, t);
        const double val = kernel(o, predictor(i, t, o, next) + delta);
        area_ll[static_cast<std::size_t>(t - lag_)] = val;
        log_ratio += val - ll_[static_cast<std::size_t>(o)];
      }
      const bool ok = metropolis_accept(log_ratio, rng_);
      if (ok) {
        state_.z[static_cast<std::size_t>(i)] = next;
        state_.v[i] += delta;
        area_term_[i] += delta;
        for (int t = lag_; t < t_len_; ++t)
          ll_[static_cast<std::size_t>(obs(i, t))] = area_ll[static_cast<std::size_t>(t - lag_)];
        pending += delta / nd;
        moved = true;
      }
      Counter& c = counters_["z_shift"];
      (adapting_ ? c.burn_proposed : c.post_proposed) += 1;
      (adapting_ ? c.burn_accepted : c.post_accepted) += ok ? 1 : 0;
    }
    state_.v.array() -= pending;
    state_.alpha += pending;
    refresh_area_terms();
    if (moved) rebuild_members();
  }

  /// Conjugate update q_i ~ Dir(1 + 1{z_i = 1}, ..., 1 + 1{z_i = C}).
  void update_q_flat() {
    if (clusters_ < 2) return;
    for (int i = 0; i < n_; ++i) state_.q.row(i) = draw_dirichlet(rng_, flat_membership_concentration(zc(i), clusters_)).transpose();
  }


  /// Log acceptance ratio of moving u_i^c by delta (with the level carried by
  /// v^c over the connected areas), at the current state.
  double assignment_u_log_ratio(int c, int i, double delta) const { return asg_u_log_ratio(c, i, delta, 0.0, sum_conn(c)); }

  void update_assignment_fields() {
    if (clusters_ < 2) {
      refresh_spatial_q();
      return;
    }
    const auto& conn = data_.graph.connected_areas();
    const double scale = spec_.priors.assignment_sd_scale;
    for (int c = 0; c + 1 < clusters_; ++c) {
      // Structured field: constrained moves with compensation in v^c.
      if (!conn.empty()) {
        const double m = static_cast<double>(conn.size());
        const double sum_v_conn = sum_conn(c);
        double pending = 0.0;
        for (int i : conn) {
          StepSizeTuner& tuner = asg_u_tuners_[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
          const double delta = draw_normal(rng_, 0.0, tuner.scale());
          const double log_ratio = asg_u_log_ratio(c, i, delta, pending, sum_v_conn);
          const bool ok = metropolis_accept(log_ratio, rng_);
          if (ok) {
            state_.assignment_u(c, i) += delta;
            pending += delta / m;
          }
          note("assignment_u", ok, log_ratio, tuner);
        }
        for (int i : conn) {
          state_.assignment_u(c, i) -= pending;
          state_.assignment_v(c, i) += pending;
        }
      }
      // Unstructured field.
      const double sd_v = state_.sigma_vc[c];
      for (int i = 0; i < n_; ++i) {
        StepSizeTuner& tuner = asg_v_tuners_[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
        const double delta = draw_normal(rng_, 0.0, tuner.scale());
        const double cur = state_.assignment_v(c, i);
        const double log_ratio = normal_log_density(cur + delta, 0.0, sd_v) - normal_log_density(cur, 0.0, sd_v) +
                                 allocation_delta(c, i, delta);
        const bool ok = metropolis_accept(log_ratio, rng_);
        if (ok) state_.assignment_v(c, i) += delta;
        note("assignment_v", ok, log_ratio, tuner);
      }
      // Standard deviations against HalfNormal priors.
      double vv = 0.0;
      for (int i = 0; i < n_; ++i) vv += state_.assignment_v(c, i) * state_.assignment_v(c, i);
      update_sd(state_.sigma_uc[c], car_pairwise_sum(row_span(state_.assignment_u, c), data_.graph),
                data_.graph.car_rank(), [&](double s) { return half_normal_log_density(s, scale); },
                asg_sigma_u_tuners_[static_cast<std::size_t>(c)], "assignment_sigma");
      update_sd(state_.sigma_vc[c], vv, n_, [&](double s) { return half_normal_log_density(s, scale); },
                asg_sigma_v_tuners_[static_cast<std::size_t>(c)], "assignment_sigma");
    }
    // The reference cluster's fields are pinned; its sds follow the prior.
    state_.sigma_uc[clusters_ - 1] = std::abs(draw_normal(rng_, 0.0, scale));
    state_.sigma_vc[clusters_ - 1] = std::abs(draw_normal(rng_, 0.0, scale));
    refresh_spatial_q();
  }

  // ---- checkpoints ----

  void save_checkpoint(std::ostream& os) const {
    TextArchiveWriter ar(os);
    ar.text("format", "dlnmclust-checkpoint-1");
    ar.integer("sweep", sweep_);
    ar.integer("seed", static_cast<long long>(cfg_.seed));
    std::ostringstream rng_text;
    rng_text << rng_;
    ar.text("rng", rng_text.str());
    write_state(ar, state_);
    ar.doubles("log_scales", tuner_log_scales());
    for (std::size_t c = 0; c < eta_blocks_.size(); ++c) {
      const auto& b = eta_blocks_[c];
      ar.matrix("eta_cov", b.covariance());
      ar.integer("eta_count", b.samples_recorded());
      ar.vector("eta_mean", b.running_mean());
      ar.matrix("eta_m2", b.running_m2());
    }
    ar.matrix("ref_sum", ref_sum_);
    ar.integer("ref_count", ref_count_);
    std::vector<long long> ctr;
    std::string names;
    for (const auto& [name, c] : counters_) {
      names += name + ";";
      ctr.insert(ctr.end(), {c.burn_accepted, c.burn_proposed, c.post_accepted, c.post_proposed});
    }
    ar.text("counter_names", names);
    ar.integers("counters", ctr);
    ar.integer("draws", static_cast<long long>(draws_.size()));
    for (std::size_t s = 0; s < draws_.size(); ++s) {
      ar.integer("draw_sweep", draw_sweeps_[s]);
      write_state(ar, draws_[s]);
      ar.doubles("draw_loglik", loglik_rows_[s]);
    }
  }

  /// Restores a checkpoint written by a sampler built on the same data, model
  /// and configuration.
  void restore_checkpoint(std::istream& is) {
    TextArchiveReader ar(is);
    if (ar.text("format") != "dlnmclust-checkpoint-1") throw std::runtime_error("checkpoint: unknown format");
    const int sweep = static_cast<int>(ar.integer("sweep"));
    if (static_cast<std::uint64_t>(ar.integer("seed")) != cfg_.seed)
      throw std::runtime_error("checkpoint: seed differs from the configuration");
    std::istringstream rng_text(ar.text("rng"));
    ParameterState s;
    Rng rng;
    rng_text >> rng;
    s = read_state(ar);
    initialize(std::move(s));
    rng_ = rng;
    sweep_ = sweep;
    set_tuner_log_scales(ar.doubles("log_scales"));
    for (auto& b : eta_blocks_) {
      b.set_covariance(ar.matrix("eta_cov"));
      const long long count = ar.integer("eta_count");
      Eigen::VectorXd mean = ar.vector("eta_mean");
      Eigen::MatrixXd m2 = ar.matrix("eta_m2");
      b.restore_running(count, std::move(mean), std::move(m2));
    }
    ref_sum_ = ar.matrix("ref_sum");
    ref_count_ = ar.integer("ref_count");
    const std::string names = ar.text("counter_names");
    const auto ctr = ar.integers("counters");
    counters_.clear();
    std::size_t pos = 0, k = 0;
    while (pos < names.size()) {
      const auto end = names.find(';', pos);
      auto& c = counters_[names.substr(pos, end - pos)];
      c = {ctr.at(k), ctr.at(k + 1), ctr.at(k + 2), ctr.at(k + 3)};
      k += 4;
      pos = end + 1;
    }
    const long long n_draws = ar.integer("draws");
    draws_.clear();
    draw_sweeps_.clear();
    loglik_rows_.clear();
    for (long long d = 0; d < n_draws; ++d) {
      draw_sweeps_.push_back(static_cast<int>(ar.integer("draw_sweep")));
      draws_.push_back(read_state(ar));
      loglik_rows_.push_back(ar.doubles("draw_loglik"));
    }
  }

 private:
  struct BlockFit {
    double loglik = 0.0;
    Eigen::MatrixXd info;  // expected information
    Eigen::VectorXd g;     // score
    void reset(Eigen::Index dim) {
      loglik = 0.0;
      info.setZero(dim, dim);
      g.setZero(dim);
    }
  };

  /// Kernel at one observation (stored in buffer_) plus its score and
  /// expected information with respect to the linear predictor.
  void accumulate_obs(int o, double pred, int coord, BlockFit& fit) {
    const auto uo = static_cast<std::size_t>(o);
    const double val = kernel(o, pred);
    buffer_[uo] = val;
    fit.loglik += val;
    const double lambda = std::exp(pred);
    const double r = r_cache_;
    const double denom = r + lambda;
    if (std::isfinite(lambda) && denom > 0.0) {
      fit.info(coord, coord) += lambda * r / denom;
      fit.g[coord] += r * (y_[uo] - lambda) / denom;
    }
  }

  struct GaussianApprox {
    Eigen::LLT<Eigen::MatrixXd> llt;
    Eigen::VectorXd mean;
    double log_det = 0.0;
  };

  /// One Newton step from x: precision prior + I, mean solving
  /// (prior + I) m = g + I x.
  static GaussianApprox approximate(const Eigen::MatrixXd& prior, const Eigen::VectorXd& x, const BlockFit& fit) {
    GaussianApprox a;
    a.llt.compute(prior + fit.info);
    if (a.llt.info() != Eigen::Success) return a;
    a.mean = a.llt.solve(fit.g + fit.info * x);
    a.log_det = 2.0 * a.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return a;
  }

  /// Log density of x under N(mean, Q^-1), conditioned on sum(x) = 0 when
  /// `constrained`.
  static double proposal_log_density(const GaussianApprox& a, const Eigen::VectorXd& x, bool constrained) {
    const auto d = static_cast<double>(x.size());
    const Eigen::VectorXd diff = x - a.mean;
    const double full = 0.5 * a.log_det - 0.5 * d * kLog2Pi - 0.5 * diff.dot(a.llt.matrixL() * (a.llt.matrixU() * diff));
    if (!constrained) return full;
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(x.size());
    const double s = ones.dot(a.llt.solve(ones));
    const double am = a.mean.sum();
    return full + 0.5 * (kLog2Pi + std::log(s)) + 0.5 * am * am / s;
  }

  /// Metropolis-Hastings with a Gaussian-approximation proposal for a block x
  /// with zero-mean Gaussian prior precision `prior`. eval(x, fit) fills the
  /// log likelihood, score and information and writes every kernel value
  /// into buffer_.
  template <class Eval>
  bool gaussian_block_step(const Eigen::MatrixXd& prior, Eigen::VectorXd& x, Eval eval, const std::string& name,
                           bool constrained = true) {
    const auto dim = x.size();
    BlockFit f0;
    eval(x, f0);
    const GaussianApprox a0 = approximate(prior, x, f0);
    if (a0.llt.info() != Eigen::Success) return false;
    Eigen::VectorXd z(dim);
    for (Eigen::Index k = 0; k < dim; ++k) z[k] = draw_normal(rng_);
    Eigen::VectorXd cand = a0.mean + a0.llt.matrixU().solve(z);
    if (constrained) {
      const Eigen::VectorXd ones = Eigen::VectorXd::Ones(dim);
      const Eigen::VectorXd qinv_ones = a0.llt.solve(ones);
      cand -= qinv_ones * (cand.sum() / ones.dot(qinv_ones));
    }

    BlockFit f1;
    eval(cand, f1);
    const GaussianApprox a1 = approximate(prior, cand, f1);
    double log_ratio = kNegInf;
    if (a1.llt.info() == Eigen::Success && std::isfinite(f1.loglik))
      log_ratio = f1.loglik - f0.loglik - 0.5 * cand.dot(prior * cand) + 0.5 * x.dot(prior * x) +
                  proposal_log_density(a1, x, constrained) - proposal_log_density(a0, cand, constrained);
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) {
      x = cand;
      std::swap(ll_, buffer_);
    }
    Counter& c = counters_[name];
    (adapting_ ? c.burn_proposed : c.post_proposed) += 1;
    (adapting_ ? c.burn_accepted : c.post_accepted) += ok ? 1 : 0;
    return ok;
  }

  struct Counter {
    long long burn_accepted = 0, burn_proposed = 0, post_accepted = 0, post_proposed = 0;
  };

  int obs(int i, int t) const { return i * m_ + (t - lag_); }
  int zc(int i) const { return state_.z[static_cast<std::size_t>(i)]; }

  double predictor(int i, int t, int o, int c) const {
    return area_term_[i] + state_.alpha + state_.gamma[t] + s_(c, o);
  }

  double kernel(int o, double pred) const {
    return nb_kernel(y_[static_cast<std::size_t>(o)], pred, r_cache_, state_.log_r);
  }

  /// Terms of the total log likelihood that depend on r but not on lambda.
  double r_constant(double r, double log_r) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < levels_.size(); ++k)
      acc += static_cast<double>(level_count_[k]) * log_rising_factorial(r, levels_[k]);
    return acc + static_cast<double>(nobs_) * r * log_r;
  }

  /// Log-likelihood change when every observation of area i moves by delta;
  /// proposed values are left in buffer_ for commit_area.
  double area_shift_delta(int i, double delta) {
    const int c = zc(i);
    double dll = 0.0;
    for (int t = lag_; t < t_len_; ++t) {
      const int o = obs(i, t);
      const double val = kernel(o, predictor(i, t, o, c) + delta);
      buffer_[static_cast<std::size_t>(o)] = val;
      dll += val - ll_[static_cast<std::size_t>(o)];
    }
    return dll;
  }

  void commit_area(int i) {
    if (!use_likelihood_) return;
    const int c = zc(i);
    for (int t = lag_; t < t_len_; ++t) {
      const int o = obs(i, t);
      ll_[static_cast<std::size_t>(o)] = kernel(o, predictor(i, t, o, c));
    }
  }

  void refresh_area_terms() { area_term_ = log_offset_ + state_.u + state_.v; }

  void rebuild_members() {
    members_.assign(static_cast<std::size_t>(clusters_), {});
    for (int i = 0; i < n_; ++i) members_[static_cast<std::size_t>(zc(i))].push_back(i);
  }

  void rebuild_caches() {
    r_cache_ = state_.r();
    refresh_area_terms();
    s_.noalias() = state_.eta * cb_.rows.transpose();
    rebuild_members();
    ll_.assign(static_cast<std::size_t>(nobs_), 0.0);
    if (!use_likelihood_) return;
    for (int i = 0; i < n_; ++i) {
      const int c = zc(i);
      for (int t = lag_; t < t_len_; ++t) {
        const int o = obs(i, t);
        ll_[static_cast<std::size_t>(o)] = kernel(o, predictor(i, t, o, c));
      }
    }
  }

  void refresh_spatial_q() {
    for (int i = 0; i < n_; ++i)
      state_.q.row(i) = assignment_probabilities(state_.assignment_u, state_.assignment_v, i).transpose();
  }

  double sum_conn(int c) const {
    double acc = 0.0;
    for (int j : data_.graph.connected_areas()) acc += state_.assignment_v(c, j);
    return acc;
  }

  /// Change of log q_{i, z_i} when the logit of cluster c at area i moves by delta.
  double allocation_delta(int c, int i, double delta) const {
    std::vector<double> logits(static_cast<std::size_t>(clusters_));
    for (int k = 0; k < clusters_; ++k)
      logits[static_cast<std::size_t>(k)] = state_.assignment_u(k, i) + state_.assignment_v(k, i);
    const int zi = zc(i);
    const double before = logits[static_cast<std::size_t>(zi)] - log_sum_exp(logits);
    logits[static_cast<std::size_t>(c)] += delta;
    const double after = logits[static_cast<std::size_t>(zi)] - log_sum_exp(logits);
    return after - before;
  }

  double asg_u_log_ratio(int c, int i, double delta, double pending, double sum_v_conn) const {
    const double m = static_cast<double>(data_.graph.connected_areas().size());
    const double su2 = state_.sigma_uc[c] * state_.sigma_uc[c];
    const double sv2 = state_.sigma_vc[c] * state_.sigma_vc[c];
    const double mean_v = sum_v_conn / m + pending;
    const double dq_v = 2.0 * delta * mean_v + delta * delta / m;
    return -0.5 * car_pairwise_delta(row_span(state_.assignment_u, c), data_.graph, i, delta) / su2 -
           0.5 * dq_v / sv2 + allocation_delta(c, i, delta);
  }

  template <class Prior>
  void update_sd(double& sigma, double quad, int rank, Prior prior, StepSizeTuner& tuner, const std::string& name) {
    const double cur = std::log(sigma);
    const double prop = cur + draw_normal(rng_, 0.0, tuner.scale());
    auto target = [&](double log_sd) {
      const double sd = std::exp(log_sd);
      const double lp = prior(sd);
      if (lp == kNegInf || !(sd > 0.0)) return kNegInf;
      return lp + log_sd + rank_deficient_normal_log_density(quad, rank, sd * sd);
    };
    const double log_ratio = target(prop) - target(cur);
    const bool ok = metropolis_accept(log_ratio, rng_);
    if (ok) sigma = std::exp(prop);
    note(name, ok, log_ratio, tuner);
  }

  void note(const std::string& name, bool accepted, double log_ratio, StepSizeTuner& tuner) {
    Counter& c = counters_[name];
    if (adapting_) {
      ++c.burn_proposed;
      c.burn_accepted += accepted ? 1 : 0;
      tuner.update(acceptance_probability(log_ratio), current_sweep_, cfg_.adaptation_window);
    } else {
      ++c.post_proposed;
      c.post_accepted += accepted ? 1 : 0;
    }
  }

  void init_proposals() {
    const double target = cfg_.target_accept_scalar;
    std::vector<double> w(static_cast<std::size_t>(nobs_), 0.0);
    if (use_likelihood_) {
      const double r = state_.r();
      for (int i = 0; i < n_; ++i)
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const double lambda = std::exp(predictor(i, t, o, zc(i)));
          const double y = y_[static_cast<std::size_t>(o)];
          const double denom = (r + lambda) * (r + lambda);
          w[static_cast<std::size_t>(o)] = std::isfinite(denom) && denom > 0.0 ? (y + r) * r * lambda / denom : 0.0;
        }
    }
    auto scale_for = [](double info) { return 2.4 / std::sqrt(std::max(info, 1e-12)); };
    double total_w = 0.0;
    for (double x : w) total_w += x;
    const PriorSpec& pr = spec_.priors;
    alpha_tuner_ = StepSizeTuner(scale_for(total_w + 1.0 / (pr.alpha_sd * pr.alpha_sd)), target);
    r_tuner_ = StepSizeTuner(0.3, target);
    ridge_tuner_ = StepSizeTuner(alpha_tuner_.scale(), target);
    sigma_u_tuner_ = StepSizeTuner(0.3, target);
    sigma_v_tuner_ = StepSizeTuner(0.3, target);
    sigma_gamma_tuner_ = StepSizeTuner(0.3, target);

    u_tuners_.clear();
    v_tuners_.clear();
    gamma_tuners_.clear();
    for (int i = 0; i < n_; ++i) {
      double wi = 0.0;
      for (int t = lag_; t < t_len_; ++t) wi += w[static_cast<std::size_t>(obs(i, t))];
      const double deg = std::max(1, data_.graph.degree(i));
      u_tuners_.emplace_back(scale_for(wi + deg / (state_.sigma_u * state_.sigma_u)), target);
      v_tuners_.emplace_back(scale_for(wi + 1.0 / (state_.sigma_v * state_.sigma_v)), target);
    }
    for (int t = 0; t < t_len_; ++t) {
      double wt = 0.0;
      if (t >= lag_)
        for (int i = 0; i < n_; ++i) wt += w[static_cast<std::size_t>(obs(i, t))];
      gamma_tuners_.emplace_back(scale_for(wt + 6.0 / (state_.sigma_gamma * state_.sigma_gamma)), target);
    }

    eta_blocks_.clear();
    for (int c = 0; c < clusters_; ++c) {
      // Coordinates (eta_c, alpha); alpha touches every observation.
      const int d = p_ + 1;
      Eigen::MatrixXd info = Eigen::MatrixXd::Identity(d, d) / (pr.eta_sd * pr.eta_sd);
      info(p_, p_) = total_w + 1.0 / (pr.alpha_sd * pr.alpha_sd);
      Eigen::VectorXd b1(d);
      for (int i : members_[static_cast<std::size_t>(c)])
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          b1.head(p_) = cb_.rows.row(o).transpose();
          b1[p_] = 0.0;
          const double wo = w[static_cast<std::size_t>(o)];
          info.topLeftCorner(p_, p_).noalias() += wo * b1.head(p_) * b1.head(p_).transpose();
          info.col(p_).head(p_) += wo * b1.head(p_);
          info.row(p_).head(p_) += wo * b1.head(p_).transpose();
        }
      const Eigen::MatrixXd cov = info.llt().solve(Eigen::MatrixXd::Identity(d, d));
      eta_blocks_.emplace_back((2.38 * 2.38 / d) * cov, cfg_.target_accept_block);
    }

    asg_u_tuners_.assign(static_cast<std::size_t>(std::max(0, clusters_ - 1)),
                         std::vector<StepSizeTuner>(static_cast<std::size_t>(n_), StepSizeTuner(1.0, target)));
    asg_v_tuners_ = asg_u_tuners_;
    asg_sigma_u_tuners_.assign(static_cast<std::size_t>(std::max(0, clusters_ - 1)), StepSizeTuner(0.3, target));
    asg_sigma_v_tuners_ = asg_sigma_u_tuners_;
    if (spec_.variant != ModelVariant::mixture_spatial) {
      asg_u_tuners_.clear();
      asg_v_tuners_.clear();
      asg_sigma_u_tuners_.clear();
      asg_sigma_v_tuners_.clear();
    }

    shift_.resize(nobs_);
    ref_sum_ = RowMatrix::Zero(clusters_, p_);
    ref_count_ = 0;
    counters_.clear();
    draws_.clear();
    draw_sweeps_.clear();
    loglik_rows_.clear();
  }

  std::vector<StepSizeTuner*> all_tuners() {
    std::vector<StepSizeTuner*> out{&r_tuner_,       &alpha_tuner_,       &ridge_tuner_,
                                    &sigma_u_tuner_, &sigma_v_tuner_, &sigma_gamma_tuner_};
    for (auto* group : {&u_tuners_, &v_tuners_, &gamma_tuners_, &asg_sigma_u_tuners_, &asg_sigma_v_tuners_})
      for (auto& t : *group) out.push_back(&t);
    for (auto& b : eta_blocks_) out.push_back(&b.tuner());
    for (auto* group : {&asg_u_tuners_, &asg_v_tuners_})
      for (auto& row : *group)
        for (auto& t : row) out.push_back(&t);
    return out;
  }

  std::vector<double> tuner_log_scales() const {
    std::vector<double> out;
    for (StepSizeTuner* t : const_cast<DlnmSampler*>(this)->all_tuners()) out.push_back(t->log_scale());
    return out;
  }

  void set_tuner_log_scales(const std::vector<double>& xs) {
    auto tuners = all_tuners();
    if (tuners.size() != xs.size()) throw std::runtime_error("checkpoint: proposal scale count mismatch");
    for (std::size_t k = 0; k < xs.size(); ++k) tuners[k]->set_log_scale(xs[k]);
  }

  void end_of_sweep(int k) {
    const int burn = cfg_.burn_in;
    if (k <= burn) {
      if (k > burn / 4) {
        for (int c = 0; c < clusters_; ++c) {
          Eigen::VectorXd x(p_ + 1);
          x << state_.eta.row(c).transpose(), state_.alpha;
          eta_blocks_[static_cast<std::size_t>(c)].record(x);
        }
        if (k % cfg_.adaptation_window == 0)
          for (auto& b : eta_blocks_) b.refresh();
      }
      if (k > burn - burn / 4) {
        ref_sum_ += state_.eta;
        ++ref_count_;
      }
    }
  }

  void record_draw(int k) {
    draws_.push_back(state_);
    draw_sweeps_.push_back(k);
    std::vector<double> row(static_cast<std::size_t>(nobs_), 0.0);
    if (use_likelihood_) {
      refresh_area_terms();
      const double r = state_.r();
      const double log_r = state_.log_r;
      std::vector<double> rising(levels_.size());
      for (std::size_t l = 0; l < levels_.size(); ++l) rising[l] = log_rising_factorial(r, levels_[l]);
      const double rlogr = r * log_r;
      std::vector<double> per_cluster(static_cast<std::size_t>(clusters_));
      for (int i = 0; i < n_; ++i)
        for (int t = lag_; t < t_len_; ++t) {
          const int o = obs(i, t);
          const auto uo = static_cast<std::size_t>(o);
          const double constant = rising[static_cast<std::size_t>(obs_level_[uo])] - lgamma_y1_[uo] + rlogr;
          if (cfg_.pointwise == PointwiseLikelihood::conditional || clusters_ == 1) {
            row[uo] = constant + nb_kernel(y_[uo], predictor(i, t, o, zc(i)), r, log_r);
          } else {
            for (int c = 0; c < clusters_; ++c)
              per_cluster[static_cast<std::size_t>(c)] =
                  std::log(state_.q(i, c)) + constant + nb_kernel(y_[uo], predictor(i, t, o, c), r, log_r);
            row[uo] = log_sum_exp(per_cluster);
          }
        }
    }
    loglik_rows_.push_back(std::move(row));
  }

  const PanelDataset& data_;
  const CrossBasis& cb_;
  ModelSpec spec_;
  SamplerConfig cfg_;
  Rng rng_;

  int n_ = 0, t_len_ = 0, lag_ = 0, m_ = 0, nobs_ = 0, p_ = 0, clusters_ = 1;
  bool use_likelihood_ = true;
  bool initialized_ = false;
  bool adapting_ = false;
  int current_sweep_ = 0;
  int sweep_ = 0;

  std::vector<double> y_;
  std::vector<std::int64_t> levels_;
  std::vector<long long> level_count_;
  std::vector<int> obs_level_;
  std::vector<double> lgamma_y1_;
  Eigen::VectorXd log_offset_;

  ParameterState state_;
  double r_cache_ = 1.0;
  Eigen::VectorXd area_term_;
  RowMatrix s_;
  std::vector<double> ll_;
  std::vector<double> buffer_;
  Eigen::VectorXd shift_;
  std::vector<std::vector<int>> members_;

  Eigen::VectorXd ridge_direction_;
  Eigen::VectorXd ridge_fitted_;
  StepSizeTuner r_tuner_, alpha_tuner_, ridge_tuner_, sigma_u_tuner_, sigma_v_tuner_, sigma_gamma_tuner_;
  std::vector<StepSizeTuner> u_tuners_, v_tuners_, gamma_tuners_;
  std::vector<AdaptiveBlockProposal> eta_blocks_;
  std::vector<std::vector<StepSizeTuner>> asg_u_tuners_, asg_v_tuners_;
  std::vector<StepSizeTuner> asg_sigma_u_tuners_, asg_sigma_v_tuners_;

  RowMatrix ref_sum_;
  long long ref_count_ = 0;
  std::map<std::string, Counter> counters_;

  std::vector<ParameterState> draws_;
  std::vector<int> draw_sweeps_;
  std::vector<std::vector<double>> loglik_rows_;
};

inline PosteriorDraws run_chain(const PanelDataset& data, const CrossBasis& cb, const ModelSpec& spec,
                                const SamplerConfig& config) {
  DlnmSampler sampler(data, cb, spec, config);
  sampler.initialize();
  sampler.run();
  return sampler.finish();
}

/// Seed of chain k: the configured seed for chain 0, a seed_seq mix otherwise.
inline std::uint64_t chain_seed(std::uint64_t seed, int chain) {
  if (chain == 0) return seed;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chain)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Independent chains on separate threads.
inline std::vector<PosteriorDraws> run_chains(const PanelDataset& data, const CrossBasis& cb, const ModelSpec& spec,
                                              const SamplerConfig& config) {
  std::vector<PosteriorDraws> out(static_cast<std::size_t>(config.n_chains));
  std::vector<std::exception_ptr> errors(out.size());
  std::vector<std::thread> workers;
  for (int k = 0; k < config.n_chains; ++k)
    workers.emplace_back([&, k] {
      try {
        SamplerConfig cfg = config;
        cfg.seed = chain_seed(config.seed, k);
        out[static_cast<std::size_t>(k)] = run_chain(data, cb, spec, cfg);
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    });
  for (auto& w : workers) w.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// Concatenates chains, relabeling every chain against the first one.
inline PosteriorDraws pool_chains(std::vector<PosteriorDraws> chains) {
  if (chains.empty()) throw std::invalid_argument("pool_chains: no chains");
  PosteriorDraws pooled = std::move(chains.front());
  for (std::size_t k = 1; k < chains.size(); ++k) {
    PosteriorDraws& other = chains[k];
    relabel_draws(other, pooled.reference_eta);
    const auto base = pooled.loglik.rows();
    Eigen::MatrixXd ll(base + other.loglik.rows(), pooled.loglik.cols());
    ll << pooled.loglik, other.loglik;
    pooled.loglik = std::move(ll);
    pooled.draws.insert(pooled.draws.end(), other.draws.begin(), other.draws.end());
    pooled.sweeps.insert(pooled.sweeps.end(), other.sweeps.begin(), other.sweeps.end());
    for (auto& w : other.warnings) pooled.warnings.push_back("chain " + std::to_string(k + 1) + ": " + w);
  }
  return pooled;
}

}  // namespace dlnmclust
