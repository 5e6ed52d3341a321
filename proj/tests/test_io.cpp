#include "dlnmclust/io.hpp"
#include "dlnmclust/simulator.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace dlnmclust;

namespace {

PanelDataset parse(const std::string& text) {
  std::istringstream is(text);
  return parse_panel(is, "test");
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dlnmclust_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(PanelIo, ParsesAreasInOrderOfAppearance) {
  const PanelDataset d = parse(
      "area,time,y,x,offset\n"
      "B,2,5,1.5,100\n"
      "A,1,3,2.0,200\n"
      "B,1,4,1.0,100\n"
      "\n"
      "A,2,0,2.5,200\n");
  ASSERT_EQ(d.n_areas(), 2);
  ASSERT_EQ(d.n_times(), 2);
  EXPECT_EQ(d.area_ids, (std::vector<std::string>{"B", "A"}));
  EXPECT_EQ(d.counts(0, 0), 4);
  EXPECT_EQ(d.counts(0, 1), 5);
  EXPECT_EQ(d.exposure(1, 1), 2.5);
  EXPECT_EQ(d.offsets[1], 200.0);
  EXPECT_EQ(d.graph.size(), 2);
}

TEST(PanelIo, RejectsMalformedInput) {
  const std::string head = "area,time,y,x,offset\n";
  EXPECT_THROW(parse(""), std::runtime_error);
  EXPECT_THROW(parse("area,time,y\n"), std::runtime_error);
  EXPECT_THROW(parse(head), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2,3\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,-2,3,10\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,0,2,3,10\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2,3,0\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2,abc,10\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2.5,3,10\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2,3,10\nA,1,2,3,10\n"), std::runtime_error);
  EXPECT_THROW(parse(head + "A,1,2,3,10\nA,2,2,3,11\n"), std::runtime_error);
  // Missing (B, 2).
  try {
    parse(head + "A,1,2,3,10\nA,2,2,3,10\nB,1,1,1,5\n");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("(B, 2)"), std::string::npos);
  }
}

TEST(PanelIo, WriteThenReadRoundTrips) {
  SimulationScenario sc;
  sc.grid_rows = 3;
  sc.grid_cols = 3;
  sc.n_times = 20;
  sc.max_lag = 3;
  const SimulatedPanel s = simulate_panel(sc, 4);
  std::stringstream ss;
  write_panel(ss, s.data);
  const PanelDataset back = parse_panel(ss);
  EXPECT_EQ(back.area_ids, s.data.area_ids);
  EXPECT_TRUE(back.counts == s.data.counts);
  EXPECT_TRUE(back.exposure == s.data.exposure);
  EXPECT_TRUE(back.offsets == s.data.offsets);

  std::stringstream es;
  write_edge_list(es, s.data.graph);
  const AdjacencyGraph g = AdjacencyGraph::from_edges(parse_edge_list(es), 9);
  EXPECT_EQ(g.edge_count(), s.data.graph.edge_count());
  for (int i = 0; i < 9; ++i) EXPECT_EQ(g.neighbors(i), s.data.graph.neighbors(i));
}

TEST(EdgeListIo, CommentsAndErrors) {
  std::istringstream ok("# header\n1 2\n\n2 3  \n");
  EXPECT_EQ(parse_edge_list(ok), (std::vector<std::pair<int, int>>{{1, 2}, {2, 3}}));
  std::istringstream three("1 2 3\n");
  EXPECT_THROW(parse_edge_list(three), std::runtime_error);
  std::istringstream word("1 x\n");
  EXPECT_THROW(parse_edge_list(word), std::runtime_error);
}

TEST(ConfigIo, ParsesKeysAndResolvesPaths) {
  std::istringstream is(
      "# comment\n"
      "panel = data/panel.csv\n"
      "adjacency = /abs/adj.txt   # trailing comment\n"
      "variant = mixture_spatial\n"
      "clusters = 3\n"
      "max_lag = 6\n"
      "n_iterations = 100\n"
      "burn_in = 50\n"
      "thinning = 2\n"
      "seed = 99\n"
      "flat_likelihood = yes\n"
      "pointwise_loglik = marginal\n"
      "compare_clusters = 2,4\n"
      "prior_sigma_u_upper = 5\n"
      "sim_grid_rows = 4\n");
  const RunConfig cfg = parse_config(is, "/base");
  EXPECT_EQ(cfg.panel, fs::path("/base/data/panel.csv"));
  EXPECT_EQ(cfg.adjacency, fs::path("/abs/adj.txt"));
  EXPECT_EQ(cfg.variant, ModelVariant::mixture_spatial);
  EXPECT_EQ(cfg.clusters, 3);
  EXPECT_EQ(cfg.max_lag, 6);
  EXPECT_EQ(cfg.simulation.max_lag, 6);
  EXPECT_EQ(cfg.sampler.retained_draws(), 25);
  EXPECT_EQ(cfg.sampler.seed, 99u);
  EXPECT_TRUE(cfg.sampler.flat_likelihood);
  EXPECT_EQ(cfg.sampler.pointwise, PointwiseLikelihood::marginal);
  EXPECT_EQ(cfg.compare_clusters, (std::vector<int>{2, 4}));
  EXPECT_EQ(cfg.priors.sigma_u_upper, 5.0);
  EXPECT_EQ(cfg.simulation.grid_rows, 4);
  EXPECT_NO_THROW(cfg.validate_model());
}

TEST(ConfigIo, RejectsUnknownDuplicateAndInvalid) {
  auto parse_cfg = [](const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
  };
  EXPECT_THROW(parse_cfg("colour = red\n"), std::runtime_error);
  EXPECT_THROW(parse_cfg("seed = 1\nseed = 2\n"), std::runtime_error);
  EXPECT_THROW(parse_cfg("seed 1\n"), std::runtime_error);
  EXPECT_THROW(parse_cfg("clusters = two\n"), std::runtime_error);
  EXPECT_THROW(parse_cfg("flat_likelihood = maybe\n"), std::runtime_error);
  EXPECT_THROW(parse_cfg("variant = kmeans\n"), std::exception);
  EXPECT_THROW(parse_cfg("variant = mixture_flat\nclusters = 1\n").validate_model(), std::invalid_argument);
  EXPECT_THROW(parse_cfg("variant = standard\nclusters = 2\n").validate_model(), std::invalid_argument);
}

TEST(DrawsIo, WriteThenReadRecoversEveryParameter) {
  SimulationScenario sc;
  sc.grid_rows = 2;
  sc.grid_cols = 3;
  sc.n_times = 16;
  sc.max_lag = 2;
  sc.car_sweeps = 20;
  const SimulatedPanel s = simulate_panel(sc, 6);
  const CrossBasis cb = build_crossbasis(s.data, s.crossbasis);
  ModelSpec spec;
  spec.variant = ModelVariant::mixture_spatial;
  spec.clusters = 2;
  spec.crossbasis = s.crossbasis;
  SamplerConfig cfg;
  cfg.n_iterations = 40;
  cfg.burn_in = 20;
  cfg.thinning = 5;
  const PosteriorDraws post = run_chain(s.data, cb, spec, cfg);
  const fs::path dir = scratch("draws");
  write_draws(dir, post, s.data, sc.max_lag);
  const PosteriorDraws back = read_draws(dir);
  ASSERT_EQ(back.size(), post.size());
  EXPECT_EQ(back.sweeps, post.sweeps);
  EXPECT_TRUE(back.loglik == post.loglik);
  EXPECT_TRUE(back.reference_eta == post.reference_eta);
  for (std::size_t d = 0; d < post.size(); ++d) {
    const auto& a = post.draws[d];
    const auto& b = back.draws[d];
    EXPECT_EQ(a.alpha, b.alpha);
    EXPECT_EQ(a.log_r, b.log_r);
    EXPECT_EQ(a.sigma_gamma, b.sigma_gamma);
    EXPECT_TRUE(a.eta == b.eta);
    EXPECT_TRUE(a.u == b.u);
    EXPECT_TRUE(a.gamma == b.gamma);
    EXPECT_EQ(a.z, b.z);
    EXPECT_TRUE(a.q == b.q);
    EXPECT_TRUE(a.assignment_u == b.assignment_u);
    EXPECT_TRUE(a.sigma_vc == b.sigma_vc);
  }
  fs::remove_all(dir);
}
