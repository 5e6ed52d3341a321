#include "dlnmclust/inference.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace dlnmclust;

namespace {

ParameterState draw_with(int clusters, int p, std::vector<int> z) {
  ParameterState s = ParameterState::zeros(static_cast<int>(z.size()), 3, p, clusters, ModelVariant::mixture_flat);
  s.z = std::move(z);
  return s;
}

CrossBasisSpec linear_spec(int max_lag, BasisKind lag_kind, bool lag_intercept) {
  CrossBasisSpec spec;
  spec.max_lag = max_lag;
  spec.exposure_basis = {{}, {0.0, 1.0}, false, BasisKind::linear};
  spec.lag_basis = {{}, {0.0, static_cast<double>(std::max(max_lag, 1))}, lag_intercept, lag_kind};
  return spec;
}

}  // namespace

// ---- WAIC ----

TEST(Waic, HandExample) {
  Eigen::MatrixXd ll(2, 1);
  ll << std::log(0.2), std::log(0.4);
  const WaicResult w = waic(ll);
  const double p = std::log(2.0) * std::log(2.0) / 2.0;
  EXPECT_NEAR(w.lppd, std::log(0.3), 1e-15);
  EXPECT_NEAR(w.p_waic2, p, 1e-15);
  EXPECT_NEAR(w.waic, -2.0 * (std::log(0.3) - p), 1e-14);
}

TEST(Waic, MatchesLongDoubleOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> size(2, 60);
  for (int rep = 0; rep < 100; ++rep) {
    const int s = size(rng), n = size(rng);
    Eigen::MatrixXd ll(s, n);
    for (Eigen::Index k = 0; k < ll.size(); ++k) ll.data()[k] = -3.0 + 1.5 * nd(rng);
    const WaicResult w = waic(ll);
    const oracle::Waic o = oracle::waic(ll);
    EXPECT_NEAR(w.waic, o.waic, 1e-10);
    EXPECT_NEAR(w.lppd, o.lppd, 1e-10);
    EXPECT_NEAR(w.p_waic2, o.p_waic2, 1e-10);
    EXPECT_NEAR(w.pointwise.sum(), w.waic, 1e-9);
  }
}

TEST(Waic, InvariantToDrawOrderAndConstantColumnsHaveNoPenalty) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd ll(40, 7);
  for (Eigen::Index k = 0; k < ll.size(); ++k) ll.data()[k] = nd(rng) - 2.0;
  ll.col(3).setConstant(-1.25);
  const WaicResult a = waic(ll);
  EXPECT_NEAR(a.pointwise[3], 2.5, 1e-14);
  Eigen::MatrixXd rev = ll.colwise().reverse();
  const WaicResult b = waic(rev);
  EXPECT_NEAR(a.waic, b.waic, 1e-11);
  const WaicDifference d = waic_difference(a, a);
  EXPECT_EQ(d.difference, 0.0);
  EXPECT_EQ(d.se, 0.0);
  EXPECT_THROW(waic(Eigen::MatrixXd::Zero(1, 3)), std::invalid_argument);
}

// ---- entropy and cluster summaries ----

TEST(Entropy, KnownValuesAndOracle) {
  const std::vector<double> uniform5(5, 0.2);
  EXPECT_NEAR(entropy(uniform5), 2.321928, 1e-6);
  const std::vector<double> one_hot{0.0, 1.0, 0.0};
  EXPECT_EQ(entropy(one_hot), 0.0);
  const std::vector<double> half{0.5, 0.5};
  EXPECT_DOUBLE_EQ(entropy(half), 1.0);
  const std::vector<double> bad{0.5, 0.6};
  EXPECT_THROW(entropy(bad), std::invalid_argument);
  const std::vector<double> negative{1.2, -0.2};
  EXPECT_THROW(entropy(negative), std::invalid_argument);

  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(0.7);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> p(static_cast<std::size_t>(2 + rep % 6));
    double total = 0.0;
    for (double& x : p) total += (x = g(rng));
    for (double& x : p) x /= total;
    EXPECT_NEAR(entropy(p), oracle::entropy_bits(p), 1e-10);
  }
}

TEST(ClusterSummary, CountsMapAndTies) {
  std::vector<ParameterState> draws{draw_with(3, 1, {0, 1, 2, 0}), draw_with(3, 1, {0, 2, 2, 1}),
                                    draw_with(3, 1, {0, 1, 2, 1}), draw_with(3, 1, {0, 2, 1, 0})};
  const ClusterSummary cs = cluster_summary(draws, 3);
  EXPECT_EQ(cs.membership_probs(0, 0), 1.0);
  EXPECT_EQ(cs.membership_probs(2, 2), 0.75);
  EXPECT_EQ(cs.membership_probs(2, 1), 0.25);
  // Area 2 and area 4 are tied between two clusters: the lower index wins.
  EXPECT_EQ(cs.map_assignment, (std::vector<int>{0, 1, 2, 0}));
  EXPECT_EQ(cs.entropy[0], 0.0);
  EXPECT_DOUBLE_EQ(cs.entropy[1], 1.0);
  EXPECT_NEAR(cs.entropy[2], oracle::entropy_bits({0.0, 0.25, 0.75}), 1e-15);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(cs.membership_probs.row(i).sum(), 1.0, 1e-15);
  EXPECT_THROW(cluster_summary(std::vector<ParameterState>{}, 3), std::invalid_argument);
}

// ---- intervals and effects ----

TEST(Summaries, QuantilesAgreeWithSortOracle) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> xs(static_cast<std::size_t>(3 + rep * 7));
    for (double& x : xs) x = nd(rng);
    const Interval iv = summarize(xs);
    EXPECT_NEAR(iv.lo, oracle::quantile7(xs, 0.025), 1e-14);
    EXPECT_NEAR(iv.hi, oracle::quantile7(xs, 0.975), 1e-14);
    EXPECT_LE(iv.lo, iv.mean);
    EXPECT_LE(iv.mean, iv.hi);
  }
}

TEST(Summaries, EffectsCombineStructuredAndUnstructuredParts) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::vector<ParameterState> draws;
  for (int s = 0; s < 200; ++s) {
    ParameterState st = ParameterState::zeros(4, 6, 2, 1, ModelVariant::standard);
    for (int i = 0; i < 4; ++i) {
      st.u[i] = nd(rng);
      st.v[i] = nd(rng);
    }
    for (int t = 0; t < 6; ++t) st.gamma[t] = nd(rng);
    draws.push_back(st);
  }
  const EffectSummaries e = effect_summaries(draws);
  ASSERT_EQ(e.spatial.size(), 4u);
  ASSERT_EQ(e.temporal.size(), 6u);
  for (int i = 0; i < 4; ++i) {
    std::vector<double> xs;
    for (const auto& s : draws) xs.push_back(s.u[i] + s.v[i]);
    EXPECT_NEAR(e.spatial[static_cast<std::size_t>(i)].lo, oracle::quantile7(xs, 0.025), 1e-14);
    EXPECT_NEAR(e.spatial[static_cast<std::size_t>(i)].hi, oracle::quantile7(xs, 0.975), 1e-14);
  }
  std::vector<double> g3;
  for (const auto& s : draws) g3.push_back(s.gamma[3]);
  EXPECT_NEAR(e.temporal[3].mean, mean_of(g3), 1e-15);
}

TEST(Ess, IidAndAutoregressive) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  const int n = 40000;
  std::vector<double> iid(n), ar(n);
  double x = 0.0;
  for (int k = 0; k < n; ++k) {
    iid[static_cast<std::size_t>(k)] = nd(rng);
    x = 0.8 * x + nd(rng);
    ar[static_cast<std::size_t>(k)] = x;
  }
  EXPECT_NEAR(effective_sample_size(iid) / n, 1.0, 0.1);
  EXPECT_NEAR(effective_sample_size(ar) / n, 0.2 / 1.8, 0.02);
}

// ---- relative risks ----

TEST(RelativeRisk, ReferenceExposureGivesOneWithZeroWidth) {
  CrossBasisSpec spec;
  spec.max_lag = 4;
  spec.exposure_basis = {{8.0, 12.0}, {4.0, 16.0}, false, BasisKind::natural_cubic};
  spec.lag_basis = default_lag_basis(4);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  std::vector<ParameterState> draws;
  for (int s = 0; s < 50; ++s) {
    ParameterState st = ParameterState::zeros(2, 10, spec.columns(), 2, ModelVariant::mixture_flat);
    for (Eigen::Index k = 0; k < st.eta.size(); ++k) st.eta.data()[k] = nd(rng);
    draws.push_back(st);
  }
  const double ref = 7.3;
  const std::vector<double> grid{4.0, 6.0, ref, 10.0, 15.5};
  const auto lags = full_lag_grid(4);
  for (int c = 0; c < 2; ++c) {
    const RRSurface rr = rr_surface(draws, spec, c, ref, grid, lags);
    for (int l = 0; l <= 4; ++l) {
      EXPECT_EQ(rr.rr(2, l), 1.0);
      EXPECT_EQ(rr.rr_low(2, l), 1.0);
      EXPECT_EQ(rr.rr_high(2, l), 1.0);
      EXPECT_EQ(rr.rr_plugin(2, l), 1.0);
    }
    const CumulativeRR cum = cumulative_rr(draws, spec, c, ref, grid);
    EXPECT_EQ(cum.mean[2], 1.0);
    EXPECT_EQ(cum.lo[2], cum.hi[2]);
  }
  EXPECT_THROW(rr_surface(draws, spec, 2, ref, grid, lags), std::out_of_range);
}

TEST(RelativeRisk, CumulativeIsThePerDrawProductOverLags) {
  CrossBasisSpec spec;
  spec.max_lag = 6;
  spec.exposure_basis = {{2.0}, {0.0, 5.0}, false, BasisKind::natural_cubic};
  spec.lag_basis = default_lag_basis(6);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  std::vector<ParameterState> draws;
  for (int s = 0; s < 30; ++s) {
    ParameterState st = ParameterState::zeros(1, 10, spec.columns(), 1, ModelVariant::standard);
    for (Eigen::Index k = 0; k < st.eta.size(); ++k) st.eta.data()[k] = 0.2 * nd(rng);
    draws.push_back(st);
  }
  const std::vector<double> grid{0.0, 1.0, 3.3, 4.9};
  const auto per_lag = rr_draws(draws, spec, 0, 1.0, grid, full_lag_grid(6));
  const auto cum = cumulative_rr_draws(draws, spec, 0, 1.0, grid);
  for (std::size_t s = 0; s < draws.size(); ++s)
    for (Eigen::Index g = 0; g < 4; ++g) {
      double prod = 1.0;
      for (int l = 0; l <= 6; ++l) prod *= per_lag[s](g, l);
      EXPECT_EQ(cum[s][g], prod);
    }
}

TEST(RelativeRisk, LinearBasisClosedForm) {
  const std::vector<double> grid{-2.0, 0.5, 3.0, 11.0};
  const double ref = 1.5;
  // Constant lag basis: log RR = beta (x - ref) at every lag.
  {
    const auto spec = linear_spec(3, BasisKind::constant, false);
    ASSERT_EQ(spec.columns(), 1);
    ParameterState st = ParameterState::zeros(1, 5, 1, 1, ModelVariant::standard);
    st.eta(0, 0) = 0.37;
    const auto rr = rr_draws({st}, spec, 0, ref, grid, full_lag_grid(3));
    for (std::size_t g = 0; g < grid.size(); ++g)
      for (int l = 0; l <= 3; ++l)
        EXPECT_NEAR(rr[0](static_cast<Eigen::Index>(g), l), std::exp(0.37 * (grid[g] - ref)), 1e-10);
  }
  // Linear lag basis (1, l): log RR = (a + b l) (x - ref).
  {
    const auto spec = linear_spec(4, BasisKind::linear, true);
    ASSERT_EQ(spec.columns(), 2);
    ParameterState st = ParameterState::zeros(1, 6, 2, 1, ModelVariant::standard);
    st.eta(0, 0) = 0.2;
    st.eta(0, 1) = -0.05;
    const auto rr = rr_draws({st}, spec, 0, ref, grid, full_lag_grid(4));
    for (std::size_t g = 0; g < grid.size(); ++g)
      for (int l = 0; l <= 4; ++l)
        EXPECT_NEAR(rr[0](static_cast<Eigen::Index>(g), l), std::exp((0.2 - 0.05 * l) * (grid[g] - ref)), 1e-10);
  }
}

TEST(RelativeRisk, DefaultGridContainsReference) {
  Eigen::MatrixXd x(3, 40);
  std::mt19937_64 rng(9);
  std::lognormal_distribution<double> ln(2.0, 0.4);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = ln(rng);
  const ExposureGrid g = default_exposure_grid(x);
  EXPECT_TRUE(std::is_sorted(g.values.begin(), g.values.end()));
  EXPECT_NE(std::find(g.values.begin(), g.values.end(), g.reference), g.values.end());
  EXPECT_GE(g.values.size(), 50u);
  EXPECT_EQ(g.values.front(), x.minCoeff());
}
