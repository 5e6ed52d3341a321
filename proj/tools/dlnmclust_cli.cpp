// dlnmclust: simulate | fit | predict | diagnose | compare

#include "dlnmclust/dlnmclust.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <optional>

using namespace dlnmclust;
using nlohmann::ordered_json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string resume;
  int max_sweeps = -1;
};

RunConfig load(const Options& opt) {
  RunConfig cfg = load_config(opt.config);
  if (opt.seed) cfg.sampler.seed = *opt.seed;
  return cfg;
}

void status(const ordered_json& j) { std::cout << j.dump() << std::endl; }

// ---- simulate ----

int cmd_simulate(const Options& opt) {
  const RunConfig cfg = load(opt);
  if (cfg.panel.empty() || cfg.adjacency.empty())
    throw std::runtime_error("simulate: config must name 'panel' and 'adjacency' output paths");
  const SimulatedPanel sim = simulate_panel(cfg.simulation, cfg.sampler.seed);
  write_panel(cfg.panel, sim.data);
  write_edge_list(cfg.adjacency, sim.data.graph);

  const ParameterState& s = sim.truth;
  const fs::path dir = cfg.output_dir;
  {
    auto os = open_output(dir / "truth_scalars.csv");
    os << "alpha,r,sigma_u,sigma_v,sigma_gamma\n"
       << format_double(s.alpha) << ',' << format_double(s.r()) << ',' << format_double(s.sigma_u) << ','
       << format_double(s.sigma_v) << ',' << format_double(s.sigma_gamma) << '\n';
  }
  {
    auto os = open_output(dir / "truth_eta.csv");
    os << "cluster" << numbered("eta_", s.eta.cols()) << '\n';
    for (Eigen::Index c = 0; c < s.eta.rows(); ++c) write_row(os, std::to_string(c + 1), Eigen::RowVectorXd(s.eta.row(c)));
  }
  {
    auto os = open_output(dir / "truth_areas.csv");
    os << "area,cluster,u,v\n";
    for (int i = 0; i < sim.data.n_areas(); ++i)
      os << sim.data.area_ids[static_cast<std::size_t>(i)] << ',' << (s.z[static_cast<std::size_t>(i)] + 1) << ','
         << format_double(s.u[i]) << ',' << format_double(s.v[i]) << '\n';
  }
  {
    auto os = open_output(dir / "truth_gamma.csv");
    os << "time,gamma\n";
    for (Eigen::Index t = 0; t < s.gamma.size(); ++t) os << (t + 1) << ',' << format_double(s.gamma[t]) << '\n';
  }
  status({{"command", "simulate"},
          {"status", "ok"},
          {"areas", sim.data.n_areas()},
          {"times", sim.data.n_times()},
          {"panel", cfg.panel.string()}});
  return 0;
}

// ---- fit ----

void write_checkpoint(const DlnmSampler& sampler, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  {
    auto os = open_output(tmp);
    sampler.save_checkpoint(os);
  }
  fs::rename(tmp, path);
}

int cmd_fit(const Options& opt) {
  const RunConfig cfg = load(opt);
  cfg.validate_model();
  const PanelDataset data = load_dataset(cfg);
  const ModelSpec spec = cfg.model_spec(data);
  const CrossBasis cb = build_crossbasis(data, spec.crossbasis);
  const fs::path checkpoint = cfg.output_dir / "checkpoint.txt";

  PosteriorDraws post;
  if (cfg.sampler.n_chains > 1) {
    if (!opt.resume.empty() || opt.max_sweeps >= 0 || cfg.checkpoint_every > 0)
      throw std::runtime_error("fit: checkpoints are supported for single-chain runs only");
    post = pool_chains(run_chains(data, cb, spec, cfg.sampler));
  } else {
    DlnmSampler sampler(data, cb, spec, cfg.sampler);
    if (!opt.resume.empty()) {
      auto is = open_input(opt.resume);
      sampler.restore_checkpoint(is);
    } else {
      sampler.initialize();
    }
    const int stop = opt.max_sweeps >= 0 ? std::min(opt.max_sweeps, cfg.sampler.n_iterations) : cfg.sampler.n_iterations;
    while (sampler.completed_sweeps() < stop) {
      int next = stop;
      if (cfg.checkpoint_every > 0)
        next = std::min(stop, (sampler.completed_sweeps() / cfg.checkpoint_every + 1) * cfg.checkpoint_every);
      sampler.run(next);
      if (cfg.checkpoint_every > 0 && next < cfg.sampler.n_iterations) write_checkpoint(sampler, checkpoint);
    }
    if (!sampler.finished()) {
      write_checkpoint(sampler, checkpoint);
      status({{"command", "fit"},
              {"status", "paused"},
              {"sweeps", sampler.completed_sweeps()},
              {"checkpoint", checkpoint.string()}});
      return 0;
    }
    post = sampler.finish();
    std::error_code ec;
    fs::remove(checkpoint, ec);  // a finished run leaves no stale checkpoint
  }
  write_draws(cfg.output_dir, post, data, spec.crossbasis.max_lag);
  for (const auto& w : post.warnings) std::cerr << ordered_json{{"warning", w}}.dump() << std::endl;
  status({{"command", "fit"},
          {"status", "ok"},
          {"variant", to_string(spec.variant)},
          {"clusters", spec.clusters},
          {"draws", post.size()},
          {"output_dir", cfg.output_dir.string()}});
  return 0;
}

// ---- predict ----

int cmd_predict(const Options& opt) {
  const RunConfig cfg = load(opt);
  const PanelDataset data = load_dataset(cfg);
  const ModelSpec spec = cfg.model_spec(data);
  const PosteriorDraws post = read_draws(cfg.output_dir);
  if (post.draws.empty()) throw std::runtime_error("predict: no draws in " + cfg.output_dir.string());
  if (post.draws.front().eta.cols() != spec.crossbasis.columns())
    throw std::runtime_error("predict: stored draws do not match the configured cross-basis");
  const ExposureGrid grid = default_exposure_grid(data.exposure, cfg.grid_points, cfg.grid_upper_percentile / 100.0,
                                                  cfg.reference_percentile / 100.0);
  const auto lags = full_lag_grid(spec.crossbasis.max_lag);

  auto surf = open_output(cfg.output_dir / "rr_surface.csv");
  surf << "exposure,lag,rr,lo,hi,cluster\n";
  auto plug = open_output(cfg.output_dir / "rr_plugin.csv");
  plug << "exposure,lag,rr,cluster\n";
  auto cum = open_output(cfg.output_dir / "cum_rr.csv");
  cum << "exposure,cum_rr,lo,hi,cluster\n";
  for (int c = 0; c < post.clusters; ++c) {
    const RRSurface rr = rr_surface(post, spec.crossbasis, c, grid.reference, grid.values, lags);
    for (std::size_t g = 0; g < grid.values.size(); ++g)
      for (std::size_t l = 0; l < lags.size(); ++l) {
        const auto gi = static_cast<Eigen::Index>(g), li = static_cast<Eigen::Index>(l);
        surf << format_double(grid.values[g]) << ',' << lags[l] << ',' << format_double(rr.rr(gi, li)) << ','
             << format_double(rr.rr_low(gi, li)) << ',' << format_double(rr.rr_high(gi, li)) << ',' << (c + 1) << '\n';
        plug << format_double(grid.values[g]) << ',' << lags[l] << ',' << format_double(rr.rr_plugin(gi, li)) << ','
             << (c + 1) << '\n';
      }
    const CumulativeRR cr = cumulative_rr(post.draws, spec.crossbasis, c, grid.reference, grid.values);
    for (std::size_t g = 0; g < grid.values.size(); ++g) {
      const auto gi = static_cast<Eigen::Index>(g);
      cum << format_double(grid.values[g]) << ',' << format_double(cr.mean[gi]) << ',' << format_double(cr.lo[gi])
          << ',' << format_double(cr.hi[gi]) << ',' << (c + 1) << '\n';
    }
  }
  status({{"command", "predict"},
          {"status", "ok"},
          {"reference", grid.reference},
          {"grid_points", grid.values.size()},
          {"output_dir", cfg.output_dir.string()}});
  return 0;
}

// ---- diagnose ----

ordered_json waic_json(const WaicResult& w) {
  return {{"waic", w.waic}, {"lppd", w.lppd}, {"p_waic2", w.p_waic2}, {"se", w.se}};
}

void write_cluster_summary(const fs::path& path, const ClusterSummary& cs, const PanelDataset& data) {
  auto os = open_output(path);
  os << "area" << numbered("prob_", cs.membership_probs.cols()) << ",map,entropy\n";
  for (Eigen::Index i = 0; i < cs.membership_probs.rows(); ++i) {
    os << data.area_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < cs.membership_probs.cols(); ++c) os << ',' << format_double(cs.membership_probs(i, c));
    os << ',' << (cs.map_assignment[static_cast<std::size_t>(i)] + 1) << ','
       << format_double(cs.entropy[static_cast<std::size_t>(i)]) << '\n';
  }
}

int cmd_diagnose(const Options& opt) {
  const RunConfig cfg = load(opt);
  const PanelDataset data = load_dataset(cfg);
  const PosteriorDraws post = read_draws(cfg.output_dir);
  const WaicResult w = waic(post.loglik);
  ordered_json summary = waic_json(w);
  summary["draws"] = post.size();
  summary["observations"] = post.loglik.cols();
  summary["variant"] = to_string(post.variant);
  summary["clusters"] = post.clusters;
  {
    auto os = open_output(cfg.output_dir / "waic.json");
    os << summary.dump(2) << '\n';
  }
  if (post.variant != ModelVariant::standard)
    write_cluster_summary(cfg.output_dir / "cluster_summary.csv", cluster_summary(post), data);

  const EffectSummaries eff = effect_summaries(post.draws);
  {
    auto os = open_output(cfg.output_dir / "effects_spatial.csv");
    os << "area,mean,lo,hi\n";
    for (std::size_t i = 0; i < eff.spatial.size(); ++i)
      os << data.area_ids[i] << ',' << format_double(eff.spatial[i].mean) << ',' << format_double(eff.spatial[i].lo)
         << ',' << format_double(eff.spatial[i].hi) << '\n';
  }
  {
    auto os = open_output(cfg.output_dir / "effects_temporal.csv");
    os << "time,mean,lo,hi\n";
    for (std::size_t t = 0; t < eff.temporal.size(); ++t)
      os << (t + 1) << ',' << format_double(eff.temporal[t].mean) << ',' << format_double(eff.temporal[t].lo) << ','
         << format_double(eff.temporal[t].hi) << '\n';
  }
  {
    auto os = open_output(cfg.output_dir / "ess.csv");
    os << "parameter,ess\n";
    for (const auto& [name, trace] : scalar_traces(post.draws))
      os << name << ',' << format_double(effective_sample_size(trace)) << '\n';
  }
  summary["command"] = "diagnose";
  summary["status"] = "ok";
  status(summary);
  return 0;
}

// ---- compare ----

int cmd_compare(const Options& opt) {
  RunConfig cfg = load(opt);
  const PanelDataset data = load_dataset(cfg);
  const ModelVariant mixture =
      cfg.variant == ModelVariant::standard ? ModelVariant::mixture_spatial : cfg.variant;

  auto fit = [&](ModelVariant variant, int clusters) {
    RunConfig c = cfg;
    c.variant = variant;
    c.clusters = clusters;
    c.validate_model();
    const ModelSpec spec = c.model_spec(data);
    const CrossBasis cb = build_crossbasis(data, spec.crossbasis);
    return pool_chains(run_chains(data, cb, spec, c.sampler));
  };

  const PosteriorDraws standard = fit(ModelVariant::standard, 1);
  const WaicResult w_std = waic(standard.loglik);
  auto table = open_output(cfg.output_dir / "waic_vs_C.csv");
  table << "clusters,variant,waic,se,lppd,p_waic2,diff_vs_standard,se_diff\n";
  table << "1,standard," << format_double(w_std.waic) << ',' << format_double(w_std.se) << ','
        << format_double(w_std.lppd) << ',' << format_double(w_std.p_waic2) << ",0,0\n";
  auto ent = open_output(cfg.output_dir / "entropy_by_C.csv");
  ent << "clusters,area,entropy\n";
  ordered_json rows = ordered_json::array();
  rows.push_back({{"clusters", 1}, {"variant", "standard"}, {"waic", w_std.waic}});
  for (int C : cfg.compare_clusters) {
    const PosteriorDraws post = fit(mixture, C);
    const WaicResult w = waic(post.loglik);
    const WaicDifference d = waic_difference(w, w_std);
    table << C << ',' << to_string(mixture) << ',' << format_double(w.waic) << ',' << format_double(w.se) << ','
          << format_double(w.lppd) << ',' << format_double(w.p_waic2) << ',' << format_double(d.difference) << ','
          << format_double(d.se) << '\n';
    const ClusterSummary cs = cluster_summary(post);
    for (std::size_t i = 0; i < cs.entropy.size(); ++i)
      ent << C << ',' << data.area_ids[i] << ',' << format_double(cs.entropy[i]) << '\n';
    rows.push_back({{"clusters", C}, {"variant", to_string(mixture)}, {"waic", w.waic}});
  }
  status({{"command", "compare"}, {"status", "ok"}, {"fits", rows}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian distributed lag non-linear models with spatial clustering"};
  app.require_subcommand(1, 1);
  Options opt;
  std::string command;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "run configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", opt.seed, "override the configured seed");
    sub->callback([&command, name] { command = name; });
    return sub;
  };
  add("simulate", "simulate a panel and adjacency from the configured scenario");
  CLI::App* fit = add("fit", "run the sampler and write draws");
  fit->add_option("--resume", opt.resume, "resume from a checkpoint file")->check(CLI::ExistingFile);
  fit->add_option("--max-sweeps", opt.max_sweeps, "stop after this many sweeps and write a checkpoint");
  add("predict", "write relative risk surfaces and cumulative curves");
  add("diagnose", "write WAIC, cluster summaries, effect summaries and ESS");
  add("compare", "fit the standard model and mixtures over a list of C");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << ordered_json{{"status", "error"}, {"command", command}, {"message", e.what()}}.dump() << std::endl;
    return 2;
  }
  try {
    if (command == "simulate") return cmd_simulate(opt);
    if (command == "fit") return cmd_fit(opt);
    if (command == "predict") return cmd_predict(opt);
    if (command == "diagnose") return cmd_diagnose(opt);
    if (command == "compare") return cmd_compare(opt);
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"status", "error"}, {"command", command}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 1;
}
