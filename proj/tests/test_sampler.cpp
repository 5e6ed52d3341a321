#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace dlnmclust;

namespace {

SamplerConfig short_config(int n, int burn, int thin, std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.n_iterations = n;
  cfg.burn_in = burn;
  cfg.thinning = thin;
  cfg.seed = seed;
  return cfg;
}

double area_loglik_oracle(const ParameterState& s, const fixture::Small& f, int i, int c) {
  const auto& d = f.sim.data;
  double acc = 0.0;
  for (int t = f.cb.max_lag; t < d.n_times(); ++t) {
    double eta = 0.0;
    for (int k = 0; k < f.cb.columns(); ++k) eta += f.cb.rows(f.cb.row_index(i, t), k) * s.eta(c, k);
    const double lp = std::log(d.offsets[i]) + s.alpha + eta + s.u[i] + s.v[i] + s.gamma[t];
    acc += oracle::nb_log_pmf(d.counts(i, t), std::exp(lp), s.r());
  }
  return acc;
}

void expect_same_draws(const PosteriorDraws& a, const PosteriorDraws& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    EXPECT_EQ(a.draws[s].alpha, b.draws[s].alpha);
    EXPECT_EQ(a.draws[s].log_r, b.draws[s].log_r);
    EXPECT_TRUE(a.draws[s].eta == b.draws[s].eta);
    EXPECT_TRUE(a.draws[s].u == b.draws[s].u);
    EXPECT_TRUE(a.draws[s].gamma == b.draws[s].gamma);
    EXPECT_EQ(a.draws[s].z, b.draws[s].z);
  }
  EXPECT_TRUE(a.loglik == b.loglik);
  EXPECT_EQ(a.sweeps, b.sweeps);
}

}  // namespace

// ---- Metropolis building blocks ----

TEST(Metropolis, TwoStateChainHitsStationaryDistribution) {
  // Unnormalized density (1, 3) on {0, 1}; flip proposals.
  Rng rng(2);
  const double w[2] = {1.0, 3.0};
  int x = 0;
  long long in_one = 0;
  const int steps = 1000000;
  for (int k = 0; k < steps; ++k) {
    const int y = 1 - x;
    if (metropolis_accept(std::log(w[y] / w[x]), rng)) x = y;
    in_one += x;
  }
  EXPECT_NEAR(static_cast<double>(in_one) / steps, 0.75, 0.02 * 0.75);
}

TEST(Metropolis, AcceptanceProbabilityEdgeCases) {
  EXPECT_EQ(acceptance_probability(0.0), 1.0);
  EXPECT_EQ(acceptance_probability(5.0), 1.0);
  EXPECT_EQ(acceptance_probability(kNegInf), 0.0);
  EXPECT_EQ(acceptance_probability(std::nan("")), 0.0);
  Rng rng(1);
  EXPECT_FALSE(metropolis_accept(kNegInf, rng));
  EXPECT_TRUE(metropolis_accept(0.0, rng));
}

TEST(Metropolis, TunerReachesTargetOnStandardNormal) {
  Rng rng(9);
  StepSizeTuner tuner(50.0, 0.44);
  double x = 0.0;
  for (int k = 1; k <= 20000; ++k) {
    const double y = x + draw_normal(rng, 0.0, tuner.scale());
    const double lr = -0.5 * (y * y - x * x);
    if (metropolis_accept(lr, rng)) x = y;
    tuner.update(acceptance_probability(lr), k, 50);
  }
  long long acc = 0;
  for (int k = 0; k < 20000; ++k) {
    const double y = x + draw_normal(rng, 0.0, tuner.scale());
    if (metropolis_accept(-0.5 * (y * y - x * x), rng)) {
      x = y;
      ++acc;
    }
  }
  EXPECT_NEAR(acc / 20000.0, 0.44, 0.03);
}

TEST(Metropolis, BlockProposalRecoversConjugateGaussianPosterior) {
  // y ~ N(X eta, 1), eta ~ N(0, 4 I): analytic posterior mean and covariance.
  // Ten independent chains, pooled.
  Rng data_rng(4);
  const int n = 30, d = 3;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = draw_normal(data_rng);
    y[i] = 0.5 - x(i, 1) + 0.3 * x(i, 2) + draw_normal(data_rng);
  }
  const Eigen::MatrixXd prec = x.transpose() * x + 0.25 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::VectorXd mean = prec.ldlt().solve(x.transpose() * y);
  const Eigen::MatrixXd cov = prec.inverse();
  auto target = [&](const Eigen::VectorXd& e) { return -0.5 * (y - x * e).squaredNorm() - 0.125 * e.squaredNorm(); };

  const int chains = 10, burn = 20000, keep = 100000;
  Eigen::VectorXd pooled = Eigen::VectorXd::Zero(d), pooled_var = Eigen::VectorXd::Zero(d);
  for (int ch = 0; ch < chains; ++ch) {
    Rng rng(100 + ch);
    AdaptiveBlockProposal block(0.01 * Eigen::MatrixXd::Identity(d, d), 0.234);
    Eigen::VectorXd cur = Eigen::VectorXd::Zero(d);
    double lp = target(cur);
    std::vector<std::vector<double>> trace(d);
    for (int k = 1; k <= burn + keep; ++k) {
      const Eigen::VectorXd prop = cur + block.propose(rng);
      const double lq = target(prop);
      const double ratio = lq - lp;
      if (metropolis_accept(ratio, rng)) {
        cur = prop;
        lp = lq;
      }
      if (k <= burn) {
        block.tuner().update(acceptance_probability(ratio), k, 50);
        block.record(cur);
        if (k % 500 == 0) block.refresh();
      } else {
        for (int j = 0; j < d; ++j) trace[static_cast<std::size_t>(j)].push_back(cur[j]);
      }
    }
    for (int j = 0; j < d; ++j) {
      const auto& t = trace[static_cast<std::size_t>(j)];
      pooled[j] += mean_of(t) / chains;
      pooled_var[j] += cov(j, j) / effective_sample_size(t) / (chains * chains);
    }
  }
  for (int j = 0; j < d; ++j) EXPECT_NEAR(pooled[j], mean[j], 3.0 * std::sqrt(pooled_var[j])) << "j=" << j;
}

// ---- allocations ----

TEST(AllocationUpdate, MatchesEnumeratedConditional) {
  const auto f = fixture::small(ModelVariant::mixture_flat, 2, 31);
  std::mt19937_64 gen(5);
  ParameterState st = fixture::random_state(f, gen);
  const int n = f.sim.data.n_areas();
  // Shift cluster 2 along one direction so that area differences are moderate.
  Eigen::RowVectorXd dir = Eigen::RowVectorXd::Random(f.cb.columns());
  st.eta.row(1) = st.eta.row(0) + 0.01 * dir;
  const double d01 = area_loglik_oracle(st, f, 0, 0) - area_loglik_oracle(st, f, 0, 1);
  st.eta.row(1) = st.eta.row(0) + 0.01 * dir / std::max(std::abs(d01), 1e-3);
  for (int i = 0; i < n; ++i) st.q.row(i) << 0.5, 0.5;

  std::vector<double> expected(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double delta = area_loglik_oracle(st, f, i, 0) - area_loglik_oracle(st, f, i, 1);
    expected[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-delta));
  }
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(10, 5, 1, 77));
  smp.initialize(st);
  const int reps = 40000;
  std::vector<int> hits(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < reps; ++k) {
    smp.update_z();
    for (int i = 0; i < n; ++i) hits[static_cast<std::size_t>(i)] += smp.state().z[static_cast<std::size_t>(i)] == 0;
  }
  for (int i = 0; i < n; ++i) {
    const double p = expected[static_cast<std::size_t>(i)];
    const double se = std::sqrt(p * (1 - p) / reps);
    EXPECT_NEAR(hits[static_cast<std::size_t>(i)] / static_cast<double>(reps), p, 4.5 * se + 1e-12) << "area " << i;
  }
}

TEST(AllocationUpdate, EqualCoefficientsReturnThePrior) {
  const auto f = fixture::small(ModelVariant::mixture_flat, 3, 32);
  std::mt19937_64 gen(6);
  ParameterState st = fixture::random_state(f, gen);
  st.eta.row(1) = st.eta.row(0);
  st.eta.row(2) = st.eta.row(0);
  st.q.row(0) << 1.0, 0.0, 0.0;
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(10, 5, 1, 78));
  smp.initialize(st);
  const int reps = 30000;
  std::vector<int> count(3, 0);
  for (int k = 0; k < reps; ++k) {
    smp.update_z();
    EXPECT_EQ(smp.state().z[0], 0);
    ++count[static_cast<std::size_t>(smp.state().z[1])];
  }
  for (int c = 0; c < 3; ++c) {
    const double p = st.q(1, c);
    EXPECT_NEAR(count[static_cast<std::size_t>(c)] / static_cast<double>(reps), p, 4.5 * std::sqrt(p * (1 - p) / reps));
  }
}

TEST(MembershipUpdate, DirichletMeansMatchConjugacy) {
  const auto f = fixture::small(ModelVariant::mixture_flat, 5, 33);
  std::mt19937_64 gen(7);
  ParameterState st = fixture::random_state(f, gen);
  const int n = f.sim.data.n_areas();
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(10, 5, 1, 79));
  smp.initialize(st);
  const int reps = 100000;
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(n, 5), sq = Eigen::MatrixXd::Zero(n, 5);
  for (int k = 0; k < reps; ++k) {
    smp.update_q_flat();
    const auto& q = smp.state().q;
    for (int i = 0; i < n; ++i) EXPECT_NEAR(q.row(i).sum(), 1.0, 1e-12);
    sum += q;
    sq += q.cwiseProduct(q);
  }
  for (int i = 0; i < n; ++i) {
    const auto ref = oracle::dirichlet_conjugate_mean(std::vector<double>(5, 1.0), st.z[static_cast<std::size_t>(i)]);
    EXPECT_NEAR(ref[static_cast<std::size_t>(st.z[static_cast<std::size_t>(i)])], 2.0 / 6.0, 1e-15);
    for (int c = 0; c < 5; ++c) {
      const double m = sum(i, c) / reps;
      const double se = std::sqrt((sq(i, c) / reps - m * m) / reps);
      EXPECT_NEAR(m, ref[static_cast<std::size_t>(c)], 3.0 * se);
    }
  }
}

TEST(AssignmentFields, LogRatioEqualsWholeStatePriorDifference) {
  const auto f = fixture::small(ModelVariant::mixture_spatial, 3, 34);
  std::mt19937_64 gen(8);
  const ParameterState st = fixture::random_state(f, gen);
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(10, 5, 1, 80));
  smp.initialize(st);
  const auto& conn = f.sim.data.graph.connected_areas();
  const double m = static_cast<double>(conn.size());
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < f.sim.data.n_areas(); ++i) {
      EXPECT_EQ(smp.assignment_u_log_ratio(c, i, 0.0), 0.0);
      for (double d : {-0.7, 0.05, 1.3}) {
        ParameterState moved = smp.state();
        moved.assignment_u(c, i) += d;
        for (int j : conn) {
          moved.assignment_u(c, j) -= d / m;
          moved.assignment_v(c, j) += d / m;
        }
        for (int j = 0; j < f.sim.data.n_areas(); ++j)
          moved.q.row(j) = assignment_probabilities(moved.assignment_u, moved.assignment_v, j).transpose();
        const double direct =
            log_prior(moved, f.spec, f.sim.data.graph) - log_prior(smp.state(), f.spec, f.sim.data.graph);
        EXPECT_NEAR(smp.assignment_u_log_ratio(c, i, d), direct, 1e-9) << "c=" << c << " i=" << i << " d=" << d;
      }
    }
}

TEST(AssignmentFields, TwoAreaToyFavoursRaisingTheOccupiedCluster) {
  const auto f = fixture::small(ModelVariant::mixture_spatial, 2, 35, 1, 2);
  ParameterState st = ParameterState::zeros(2, f.sim.data.n_times(), f.cb.columns(), 2, ModelVariant::mixture_spatial);
  st.alpha = -4.0;
  st.sigma_u = st.sigma_v = st.sigma_gamma = 1.0;
  st.sigma_uc.setOnes();
  st.sigma_vc.setOnes();
  st.z = {0, 0};
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(10, 5, 1, 81));
  smp.initialize(st);
  for (double d : {0.1, 0.5, 2.0}) {
    // Prior terms are even in d at the zero field; the allocation term
    // contributes log sigmoid(d) - log sigmoid(-d) = d.
    EXPECT_GT(smp.assignment_u_log_ratio(0, 0, d), smp.assignment_u_log_ratio(0, 0, -d));
    EXPECT_NEAR(smp.assignment_u_log_ratio(0, 0, d) - smp.assignment_u_log_ratio(0, 0, -d), d, 1e-12);
  }
}

// ---- whole-chain properties ----

TEST(Chain, SameSeedSameDraws) {
  const auto f = fixture::small(ModelVariant::mixture_spatial, 2, 36);
  const auto cfg = short_config(120, 60, 3, 5);
  expect_same_draws(run_chain(f.sim.data, f.cb, f.spec, cfg), run_chain(f.sim.data, f.cb, f.spec, cfg));
  const auto other = run_chain(f.sim.data, f.cb, f.spec, short_config(120, 60, 3, 6));
  EXPECT_NE(other.draws.back().alpha, run_chain(f.sim.data, f.cb, f.spec, cfg).draws.back().alpha);
}

TEST(Chain, CheckpointResumeIsBitExact) {
  for (auto variant : {ModelVariant::standard, ModelVariant::mixture_flat, ModelVariant::mixture_spatial}) {
    const auto f = fixture::small(variant, variant == ModelVariant::standard ? 1 : 2, 37);
    const auto cfg = short_config(150, 70, 4, 11);
    const PosteriorDraws whole = run_chain(f.sim.data, f.cb, f.spec, cfg);
    for (int stop : {40, 70, 95}) {
      DlnmSampler first(f.sim.data, f.cb, f.spec, cfg);
      first.initialize();
      first.run(stop);
      std::stringstream ss;
      first.save_checkpoint(ss);
      DlnmSampler second(f.sim.data, f.cb, f.spec, cfg);
      second.restore_checkpoint(ss);
      EXPECT_EQ(second.completed_sweeps(), stop);
      second.run();
      const PosteriorDraws resumed = second.finish();
      expect_same_draws(whole, resumed);
      EXPECT_EQ(whole.acceptance_rates, resumed.acceptance_rates);
    }
  }
}

TEST(Chain, CheckpointRejectsOtherSeed) {
  const auto f = fixture::small(ModelVariant::standard, 1, 38);
  DlnmSampler a(f.sim.data, f.cb, f.spec, short_config(20, 10, 1, 1));
  a.initialize();
  a.run(5);
  std::stringstream ss;
  a.save_checkpoint(ss);
  DlnmSampler b(f.sim.data, f.cb, f.spec, short_config(20, 10, 1, 2));
  EXPECT_THROW(b.restore_checkpoint(ss), std::runtime_error);
}

TEST(Chain, SingleClusterFlatMixtureRunsLikeStandard) {
  auto f = fixture::small(ModelVariant::standard, 1, 39);
  ModelSpec flat = f.spec;
  flat.variant = ModelVariant::mixture_flat;
  const auto cfg = short_config(100, 50, 2, 21);
  expect_same_draws(run_chain(f.sim.data, f.cb, f.spec, cfg), run_chain(f.sim.data, f.cb, flat, cfg));
}

TEST(Chain, ConstraintsHoldAfterEverySweep) {
  for (auto variant : {ModelVariant::standard, ModelVariant::mixture_flat, ModelVariant::mixture_spatial}) {
    const auto f = fixture::small(variant, variant == ModelVariant::standard ? 1 : 3, 40);
    DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(200, 100, 1, 3));
    smp.initialize();
    for (int k = 0; k < 200; ++k) {
      smp.sweep();
      const auto& s = smp.state();
      EXPECT_NEAR(s.u.sum(), 0.0, 1e-9);
      EXPECT_NEAR(s.v.sum(), 0.0, 1e-9);
      EXPECT_NEAR(s.gamma.sum(), 0.0, 1e-9);
      for (Eigen::Index i = 0; i < s.q.rows(); ++i) {
        EXPECT_NEAR(s.q.row(i).sum(), 1.0, 1e-12);
        EXPECT_GE(s.q.row(i).minCoeff(), 0.0);
      }
      EXPECT_TRUE(std::isfinite(log_posterior(s, f.spec, f.sim.data, f.cb)));
    }
  }
}

TEST(Chain, AdaptationFreezesAfterBurnIn) {
  const auto f = fixture::small(ModelVariant::mixture_spatial, 2, 41);
  DlnmSampler smp(f.sim.data, f.cb, f.spec, short_config(300, 120, 1, 4));
  smp.initialize();
  const auto initial = smp.proposal_log_scales();
  smp.run(120);
  const auto frozen = smp.proposal_log_scales();
  EXPECT_NE(initial, frozen);
  smp.run();
  EXPECT_EQ(frozen, smp.proposal_log_scales());
}

TEST(Chain, BurnInJustShortOfTheEndKeepsOneDraw) {
  const auto f = fixture::small(ModelVariant::standard, 1, 42);
  const auto post = run_chain(f.sim.data, f.cb, f.spec, short_config(50, 45, 5, 8));
  ASSERT_EQ(post.size(), 1u);
  EXPECT_EQ(post.sweeps.front(), 50);
  EXPECT_EQ(post.loglik.rows(), 1);
  EXPECT_EQ(post.loglik.cols(), f.sim.data.n_areas() * (f.sim.data.n_times() - f.cb.max_lag));
  EXPECT_THROW(short_config(50, 50, 1, 1).validate(), std::invalid_argument);
  EXPECT_THROW(short_config(50, 10, 0, 1).validate(), std::invalid_argument);
}

TEST(Chain, StoredLoglikMatchesRecomputation) {
  const auto f = fixture::small(ModelVariant::mixture_flat, 2, 43);
  const auto post = run_chain(f.sim.data, f.cb, f.spec, short_config(60, 30, 10, 9));
  const int lag = f.cb.max_lag, m = f.sim.data.n_times() - lag;
  for (std::size_t s = 0; s < post.size(); ++s) {
    const auto& st = post.draws[s];
    for (int i = 0; i < f.sim.data.n_areas(); ++i) {
      double area = 0.0;
      for (int t = lag; t < f.sim.data.n_times(); ++t) area += post.loglik(static_cast<Eigen::Index>(s), i * m + (t - lag));
      EXPECT_NEAR(area, area_loglik_oracle(st, f, i, st.z[static_cast<std::size_t>(i)]), 1e-8);
    }
  }
}

TEST(Chain, FlatLikelihoodRecoversUniformSdPrior) {
  const auto f = fixture::small(ModelVariant::standard, 1, 44);
  SamplerConfig cfg = short_config(40000, 2000, 2, 12);
  cfg.flat_likelihood = true;
  const auto post = run_chain(f.sim.data, f.cb, f.spec, cfg);
  std::vector<double> su, alpha;
  for (const auto& s : post.draws) {
    su.push_back(s.sigma_u);
    alpha.push_back(s.alpha);
    ASSERT_LT(s.sigma_u, f.spec.priors.sigma_u_upper);
    ASSERT_GT(s.sigma_u, 0.0);
  }
  const double upper = f.spec.priors.sigma_u_upper;
  const double ess = effective_sample_size(su);
  EXPECT_NEAR(mean_of(su), upper / 2.0, 4.0 * upper / std::sqrt(12.0 * ess)) << "ess=" << ess;
  EXPECT_NEAR(mean_of(alpha), 0.0, 4.0 * f.spec.priors.alpha_sd / std::sqrt(effective_sample_size(alpha)));
}
