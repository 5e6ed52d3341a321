#pragma once

#include "dlnmclust/dlnmclust.hpp"

#include <random>

namespace fixture {

using namespace dlnmclust;

/// A small simulated panel (rows x cols grid) plus a model spec of the given
/// variant built on its cross-basis.
struct Small {
  SimulatedPanel sim;
  CrossBasis cb;
  ModelSpec spec;
};

inline Small small(ModelVariant variant, int clusters, std::uint64_t seed, int rows = 3, int cols = 3,
                   int t_len = 24, int lag = 3, int true_clusters = 2) {
  SimulationScenario sc;
  sc.grid_rows = rows;
  sc.grid_cols = cols;
  sc.n_times = t_len;
  sc.max_lag = lag;
  sc.true_clusters = true_clusters;
  sc.car_sweeps = 50;
  sc.offset_value = 2000.0;
  sc.alpha = -4.0;
  Small s{simulate_panel(sc, seed), {}, {}};
  s.cb = build_crossbasis(s.sim.data, s.sim.crossbasis);
  s.spec.variant = variant;
  s.spec.clusters = clusters;
  s.spec.crossbasis = s.sim.crossbasis;
  return s;
}

/// A random point in the support of the given model.
inline ParameterState random_state(const Small& s, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> unif(0.1, 3.0);
  const int n = s.sim.data.n_areas(), t_len = s.sim.data.n_times(), p = s.cb.columns(), c = s.spec.clusters;
  ParameterState st = ParameterState::zeros(n, t_len, p, c, s.spec.variant);
  st.alpha = -4.0 + 0.3 * nd(rng);
  st.log_r = std::log(unif(rng));
  for (Eigen::Index k = 0; k < st.eta.size(); ++k) st.eta.data()[k] = 0.1 * nd(rng);
  for (int i = 0; i < n; ++i) {
    st.u[i] = 0.3 * nd(rng);
    st.v[i] = 0.2 * nd(rng);
  }
  st.u.array() -= st.u.mean();
  st.v.array() -= st.v.mean();
  for (int t = 0; t < t_len; ++t) st.gamma[t] = 0.05 * nd(rng);
  st.gamma.array() -= st.gamma.mean();
  st.sigma_u = unif(rng);
  st.sigma_v = unif(rng);
  st.sigma_gamma = unif(rng);
  std::uniform_int_distribution<int> pick(0, c - 1);
  for (auto& z : st.z) z = pick(rng);
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (int k = 0; k < c; ++k) total += (st.q(i, k) = unif(rng));
    st.q.row(i) /= total;
  }
  if (s.spec.variant == ModelVariant::mixture_spatial) {
    for (int k = 0; k + 1 < c; ++k)
      for (int i = 0; i < n; ++i) {
        st.assignment_u(k, i) = 0.5 * nd(rng);
        st.assignment_v(k, i) = 0.5 * nd(rng);
      }
    for (int k = 0; k < c; ++k) {
      st.sigma_uc[k] = unif(rng);
      st.sigma_vc[k] = unif(rng);
    }
    for (int i = 0; i < n; ++i) st.q.row(i) = assignment_probabilities(st.assignment_u, st.assignment_v, i).transpose();
  }
  return st;
}

}  // namespace fixture
