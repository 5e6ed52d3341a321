#pragma once

// Text formats: the long-format panel CSV, the edge list, the key = value run
// configuration, and the per-group draw files written by `fit`.

#include "dlnmclust/simulator.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace dlnmclust {

namespace fs = std::filesystem;

/// Text that reads back to the same double.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(trim(cell));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw std::runtime_error(what + ": '" + s + "' is not a number");
  }
  if (used != s.size()) throw std::runtime_error(what + ": '" + s + "' is not a number");
  return v;
}

inline long long parse_integer(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw std::runtime_error(what + ": '" + s + "' is not an integer");
  }
  if (used != s.size()) throw std::runtime_error(what + ": '" + s + "' is not an integer");
  return v;
}

inline std::ifstream open_input(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  return is;
}

inline std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return os;
}

// ---- panel ------------------------------------------------------------------

/// Reads `area,time,y,x,offset`. Area ids map to 1..n by first appearance;
/// the graph is left edgeless (attach the adjacency separately).
inline PanelDataset parse_panel(std::istream& is, const std::string& source = "panel") {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(source + ": empty file");
  const auto header = split(line, ',');
  if (header != std::vector<std::string>{"area", "time", "y", "x", "offset"})
    throw std::runtime_error(source + ": header must be 'area,time,y,x,offset'");

  struct Cell {
    long long y;
    double x;
  };
  std::unordered_map<std::string, int> index;
  std::vector<std::string> ids;
  std::vector<double> offsets;
  std::map<std::pair<int, int>, Cell> cells;
  int max_time = 0;
  long long line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    const std::string where = source + " line " + std::to_string(line_no);
    if (f.size() != 5) throw std::runtime_error(where + ": expected 5 fields");
    if (f[0].empty()) throw std::runtime_error(where + ": empty area id");
    const long long time = parse_integer(f[1], where + " time");
    const long long y = parse_integer(f[2], where + " y");
    const double x = parse_double(f[3], where + " x");
    const double offset = parse_double(f[4], where + " offset");
    if (time < 1 || time > 1000000) throw std::runtime_error(where + ": time must be a positive integer");
    if (y < 0) throw std::runtime_error(where + ": negative count");
    if (!(offset > 0.0) || !std::isfinite(offset)) throw std::runtime_error(where + ": offset must be positive");
    if (!std::isfinite(x)) throw std::runtime_error(where + ": non-finite exposure");
    auto [it, fresh] = index.emplace(f[0], static_cast<int>(ids.size()));
    if (fresh) {
      ids.push_back(f[0]);
      offsets.push_back(offset);
    } else if (offsets[static_cast<std::size_t>(it->second)] != offset) {
      throw std::runtime_error(where + ": offset differs from earlier rows of area '" + f[0] + "'");
    }
    const int t = static_cast<int>(time);
    if (!cells.emplace(std::make_pair(it->second, t), Cell{y, x}).second)
      throw std::runtime_error(where + ": duplicated (area, time) = (" + f[0] + ", " + f[1] + ")");
    max_time = std::max(max_time, t);
  }
  const int n = static_cast<int>(ids.size());
  if (n == 0) throw std::runtime_error(source + ": no data rows");

  std::vector<std::string> missing;
  std::size_t missing_total = 0;
  for (int i = 0; i < n; ++i)
    for (int t = 1; t <= max_time; ++t)
      if (!cells.count({i, t})) {
        ++missing_total;
        if (missing.size() < 10) missing.push_back("(" + ids[static_cast<std::size_t>(i)] + ", " + std::to_string(t) + ")");
      }
  if (missing_total > 0) {
    std::string msg = source + ": " + std::to_string(missing_total) + " missing (area, time) cells; first: ";
    for (std::size_t k = 0; k < missing.size(); ++k) msg += (k ? " " : "") + missing[k];
    throw std::runtime_error(msg);
  }

  PanelDataset d;
  d.area_ids = ids;
  d.counts.resize(n, max_time);
  d.exposure.resize(n, max_time);
  d.offsets = Eigen::Map<const Eigen::VectorXd>(offsets.data(), n);
  for (const auto& [key, cell] : cells) {
    d.counts(key.first, key.second - 1) = cell.y;
    d.exposure(key.first, key.second - 1) = cell.x;
  }
  d.graph = AdjacencyGraph::from_edges({}, n);
  return d;
}

inline PanelDataset load_panel(const fs::path& path) {
  auto is = open_input(path);
  return parse_panel(is, path.string());
}

inline void write_panel(std::ostream& os, const PanelDataset& d) {
  os << "area,time,y,x,offset\n";
  for (int i = 0; i < d.n_areas(); ++i) {
    const std::string id = d.area_ids.empty() ? std::to_string(i + 1) : d.area_ids[static_cast<std::size_t>(i)];
    for (int t = 0; t < d.n_times(); ++t)
      os << id << ',' << (t + 1) << ',' << d.counts(i, t) << ',' << format_double(d.exposure(i, t)) << ','
         << format_double(d.offsets[i]) << '\n';
  }
}

inline void write_panel(const fs::path& path, const PanelDataset& d) {
  auto os = open_output(path);
  write_panel(os, d);
}

// ---- edge list --------------------------------------------------------------

inline std::vector<std::pair<int, int>> parse_edge_list(std::istream& is, const std::string& source = "edges") {
  std::vector<std::pair<int, int>> edges;
  std::string line;
  long long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream ls(t);
    std::string a, b, extra;
    if (!(ls >> a >> b) || (ls >> extra))
      throw std::runtime_error(source + " line " + std::to_string(line_no) + ": expected two area indices");
    const std::string where = source + " line " + std::to_string(line_no);
    edges.emplace_back(static_cast<int>(parse_integer(a, where)), static_cast<int>(parse_integer(b, where)));
  }
  return edges;
}

inline AdjacencyGraph load_edge_list(const fs::path& path, int n) {
  auto is = open_input(path);
  return AdjacencyGraph::from_edges(parse_edge_list(is, path.string()), n);
}

inline void write_edge_list(std::ostream& os, const AdjacencyGraph& g) {
  os << "# undirected edges, 1-based area indices\n";
  for (int i = 0; i < g.size(); ++i)
    for (int j : g.neighbors(i))
      if (i < j) os << (i + 1) << ' ' << (j + 1) << '\n';
}

inline void write_edge_list(const fs::path& path, const AdjacencyGraph& g) {
  auto os = open_output(path);
  write_edge_list(os, g);
}

// ---- run configuration -----------------------------------------------------------

struct RunConfig {
  fs::path panel;
  fs::path adjacency;
  fs::path output_dir = "output";
  ModelVariant variant = ModelVariant::standard;
  int clusters = 1;
  int max_lag = 8;
  int exposure_knots = 2;
  int lag_knots = 1;
  KnotPlacement knot_placement = KnotPlacement::value;
  PriorSpec priors;
  SamplerConfig sampler;
  double reference_percentile = 5.0;
  int grid_points = 50;
  double grid_upper_percentile = 99.0;
  std::vector<int> compare_clusters{2, 3};
  int checkpoint_every = 0;
  SimulationScenario simulation;

  ModelSpec model_spec(const PanelDataset& data) const {
    ModelSpec spec;
    spec.variant = variant;
    spec.clusters = clusters;
    spec.priors = priors;
    spec.crossbasis = make_crossbasis_spec(data.exposure, max_lag, exposure_knots, lag_knots, knot_placement);
    return spec;
  }

  /// Command-line rule: C >= 2 exactly for the mixture variants.
  void validate_model() const {
    const bool mixture = variant != ModelVariant::standard;
    if (mixture && clusters < 2) throw std::invalid_argument("config: mixture variants need clusters >= 2");
    if (!mixture && clusters != 1) throw std::invalid_argument("config: the standard variant needs clusters = 1");
  }
};

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::runtime_error("config: '" + key + "' must be true or false");
}

/// Parses `key = value` lines (`#` starts a comment). Relative paths resolve
/// against `base_dir`.
inline RunConfig parse_config(std::istream& is, const fs::path& base_dir = ".") {
  RunConfig cfg;
  std::set<std::string> seen;
  std::string line;
  long long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no);
    if (eq == std::string::npos) throw std::runtime_error(where + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (!seen.insert(key).second) throw std::runtime_error(where + ": duplicate key '" + key + "'");
    auto num = [&] { return parse_double(value, where + " (" + key + ")"); };
    auto integer = [&] { return static_cast<int>(parse_integer(value, where + " (" + key + ")")); };
    auto path = [&] { return fs::path(value).is_absolute() ? fs::path(value) : base_dir / value; };
    SimulationScenario& sim = cfg.simulation;

    if (key == "panel") cfg.panel = path();
    else if (key == "adjacency") cfg.adjacency = path();
    else if (key == "output_dir") cfg.output_dir = path();
    else if (key == "variant") cfg.variant = parse_variant(value);
    else if (key == "clusters") cfg.clusters = integer();
    else if (key == "max_lag") cfg.max_lag = integer();
    else if (key == "exposure_knots") cfg.exposure_knots = integer();
    else if (key == "lag_knots") cfg.lag_knots = integer();
    else if (key == "knot_placement") {
      if (value == "value") cfg.knot_placement = KnotPlacement::value;
      else if (value == "percentile") cfg.knot_placement = KnotPlacement::percentile;
      else throw std::runtime_error(where + ": knot_placement must be value or percentile");
    }
    else if (key == "prior_r_shape") cfg.priors.r_shape = num();
    else if (key == "prior_r_rate") cfg.priors.r_rate = num();
    else if (key == "prior_alpha_sd") cfg.priors.alpha_sd = num();
    else if (key == "prior_eta_sd") cfg.priors.eta_sd = num();
    else if (key == "prior_sigma_u_upper") cfg.priors.sigma_u_upper = num();
    else if (key == "prior_sigma_v_upper") cfg.priors.sigma_v_upper = num();
    else if (key == "prior_sigma_gamma_upper") cfg.priors.sigma_gamma_upper = num();
    else if (key == "prior_assignment_sd") cfg.priors.assignment_sd_scale = num();
    else if (key == "n_iterations") cfg.sampler.n_iterations = integer();
    else if (key == "burn_in") cfg.sampler.burn_in = integer();
    else if (key == "thinning") cfg.sampler.thinning = integer();
    else if (key == "seed") cfg.sampler.seed = static_cast<std::uint64_t>(parse_integer(value, where));
    else if (key == "adaptation_window") cfg.sampler.adaptation_window = integer();
    else if (key == "target_accept_scalar") cfg.sampler.target_accept_scalar = num();
    else if (key == "target_accept_block") cfg.sampler.target_accept_block = num();
    else if (key == "n_chains") cfg.sampler.n_chains = integer();
    else if (key == "flat_likelihood") cfg.sampler.flat_likelihood = parse_bool(value, key);
    else if (key == "pointwise_loglik") {
      if (value == "conditional") cfg.sampler.pointwise = PointwiseLikelihood::conditional;
      else if (value == "marginal") cfg.sampler.pointwise = PointwiseLikelihood::marginal;
      else throw std::runtime_error(where + ": pointwise_loglik must be conditional or marginal");
    }
    else if (key == "reference_percentile") cfg.reference_percentile = num();
    else if (key == "grid_points") cfg.grid_points = integer();
    else if (key == "grid_upper_percentile") cfg.grid_upper_percentile = num();
    else if (key == "compare_clusters") {
      cfg.compare_clusters.clear();
      for (const auto& tok : split(value, ',')) cfg.compare_clusters.push_back(static_cast<int>(parse_integer(tok, where)));
      if (cfg.compare_clusters.empty()) throw std::runtime_error(where + ": compare_clusters is empty");
    }
    else if (key == "checkpoint_every") cfg.checkpoint_every = integer();
    else if (key == "sim_graph") {
      if (value == "grid") sim.graph_kind = GraphKind::grid;
      else if (value == "path") sim.graph_kind = GraphKind::path;
      else if (value == "edge_list") sim.graph_kind = GraphKind::edge_list;
      else throw std::runtime_error(where + ": sim_graph must be grid, path or edge_list");
    }
    else if (key == "sim_grid_rows") sim.grid_rows = integer();
    else if (key == "sim_grid_cols") sim.grid_cols = integer();
    else if (key == "sim_areas") sim.n_areas = integer();
    else if (key == "sim_edges") {
      auto es = open_input(path());
      sim.edges = parse_edge_list(es, value);
    }
    else if (key == "sim_times") sim.n_times = integer();
    else if (key == "sim_true_clusters") sim.true_clusters = integer();
    else if (key == "sim_partition") {
      if (value == "contiguous_blocks") sim.partition = PartitionKind::contiguous_blocks;
      else if (value == "random") sim.partition = PartitionKind::random;
      else if (value == "softmax_field") sim.partition = PartitionKind::softmax_field;
      else throw std::runtime_error(where + ": sim_partition must be contiguous_blocks, random or softmax_field");
    }
    else if (key == "sim_alpha") sim.alpha = num();
    else if (key == "sim_sigma_u") sim.sigma_u = num();
    else if (key == "sim_sigma_v") sim.sigma_v = num();
    else if (key == "sim_sigma_gamma") sim.sigma_gamma = num();
    else if (key == "sim_r") sim.r_true = num();
    else if (key == "sim_exposure") {
      if (value == "ar1_positive") sim.exposure = ExposureProcess::ar1_positive;
      else if (value == "iid_lognormal") sim.exposure = ExposureProcess::iid_lognormal;
      else throw std::runtime_error(where + ": sim_exposure must be ar1_positive or iid_lognormal");
    }
    else if (key == "sim_exposure_mean") sim.exposure_mean = num();
    else if (key == "sim_exposure_sd") sim.exposure_sd = num();
    else if (key == "sim_exposure_ar") sim.exposure_ar = num();
    else if (key == "sim_offsets") {
      if (value == "constant") sim.offsets = OffsetKind::constant;
      else if (value == "lognormal") sim.offsets = OffsetKind::lognormal;
      else throw std::runtime_error(where + ": sim_offsets must be constant or lognormal");
    }
    else if (key == "sim_offset_value") sim.offset_value = num();
    else if (key == "sim_offset_log_sd") sim.offset_log_sd = num();
    else throw std::runtime_error(where + ": unknown key '" + key + "'");
  }
  cfg.simulation.max_lag = cfg.max_lag;
  cfg.simulation.exposure_knots = cfg.exposure_knots;
  cfg.simulation.lag_knots = cfg.lag_knots;
  return cfg;
}

inline RunConfig load_config(const fs::path& path) {
  auto is = open_input(path);
  return parse_config(is, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Panel plus adjacency as named in the configuration.
inline PanelDataset load_dataset(const RunConfig& cfg) {
  if (cfg.panel.empty()) throw std::runtime_error("config: 'panel' is required");
  PanelDataset d = load_panel(cfg.panel);
  if (!cfg.adjacency.empty()) d.graph = load_edge_list(cfg.adjacency, d.n_areas());
  d.validate();
  return d;
}

// ---- draws --------------------------------------------------------------------

template <class Vec>
inline void write_row(std::ostream& os, const std::string& lead, const Vec& values) {
  os << lead;
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(values.size()); ++k) os << ',' << format_double(values[k]);
  os << '\n';
}

inline std::string numbered(const std::string& prefix, Eigen::Index count) {
  std::string s;
  for (Eigen::Index k = 1; k <= count; ++k) s += "," + prefix + std::to_string(k);
  return s;
}

struct FitInfo {
  ModelVariant variant = ModelVariant::standard;
  int clusters = 1;
  int areas = 0;
  int times = 0;
  int max_lag = 0;
  int columns = 0;
  std::size_t draws = 0;
};

inline void write_draws(const fs::path& dir, const PosteriorDraws& post, const PanelDataset& data, int max_lag) {
  fs::create_directories(dir);
  if (post.draws.empty()) throw std::runtime_error("write_draws: no retained draws");
  const auto& first = post.draws.front();
  const auto n = first.u.size();
  const auto t_len = first.gamma.size();
  const auto p = first.eta.cols();
  const int C = post.clusters;
  const bool mixture = post.variant != ModelVariant::standard;
  const bool spatial = post.variant == ModelVariant::mixture_spatial;

  {
    auto os = open_output(dir / "fit_info.txt");
    os << "variant=" << to_string(post.variant) << "\nclusters=" << C << "\nareas=" << n << "\ntimes=" << t_len
       << "\nmax_lag=" << max_lag << "\ncolumns=" << p << "\ndraws=" << post.draws.size()
       << "\nobservations=" << post.loglik.cols() << "\nseed=" << post.config.seed
       << "\nn_iterations=" << post.config.n_iterations << "\nburn_in=" << post.config.burn_in
       << "\nthinning=" << post.config.thinning << "\nn_chains=" << post.config.n_chains << "\npointwise_loglik="
       << (post.config.pointwise == PointwiseLikelihood::conditional ? "conditional" : "marginal") << '\n';
    for (const auto& w : post.warnings) os << "warning=" << w << '\n';
  }
  {
    auto os = open_output(dir / "area_index.csv");
    os << "index,area\n";
    for (int i = 0; i < data.n_areas(); ++i)
      os << (i + 1) << ',' << (data.area_ids.empty() ? std::to_string(i + 1) : data.area_ids[static_cast<std::size_t>(i)])
         << '\n';
  }
  {
    auto os = open_output(dir / "acceptance.csv");
    os << "block,rate\n";
    for (const auto& [name, rate] : post.acceptance_rates) os << name << ',' << format_double(rate) << '\n';
  }
  {
    auto os = open_output(dir / "reference_eta.csv");
    os << "cluster" << numbered("eta_", p) << '\n';
    for (Eigen::Index c = 0; c < post.reference_eta.rows(); ++c)
      write_row(os, std::to_string(c + 1), Eigen::RowVectorXd(post.reference_eta.row(c)));
  }
  auto scalars = open_output(dir / "draws_scalars.csv");
  scalars << "draw,sweep,alpha,log_r,r,sigma_u,sigma_v,sigma_gamma\n";
  auto eta = open_output(dir / "draws_eta.csv");
  eta << "draw,cluster" << numbered("eta_", p) << '\n';
  auto u = open_output(dir / "draws_u.csv");
  u << "draw" << numbered("u_", n) << '\n';
  auto v = open_output(dir / "draws_v.csv");
  v << "draw" << numbered("v_", n) << '\n';
  auto gamma = open_output(dir / "draws_gamma.csv");
  gamma << "draw" << numbered("gamma_", t_len) << '\n';
  std::ofstream z, q, asg, asg_sd;
  if (mixture) {
    z = open_output(dir / "draws_z.csv");
    z << "draw" << numbered("z_", n) << '\n';
    q = open_output(dir / "draws_q.csv");
    q << "draw,area" << numbered("q_", C) << '\n';
  }
  if (spatial) {
    asg = open_output(dir / "draws_assignment.csv");
    asg << "draw,cluster,field" << numbered("value_", n) << '\n';
    asg_sd = open_output(dir / "draws_assignment_sd.csv");
    asg_sd << "draw,cluster,sigma_uc,sigma_vc\n";
  }
  for (std::size_t d = 0; d < post.draws.size(); ++d) {
    const auto& s = post.draws[d];
    const std::string id = std::to_string(d + 1);
    scalars << id << ',' << post.sweeps[d] << ',' << format_double(s.alpha) << ',' << format_double(s.log_r) << ','
            << format_double(s.r()) << ',' << format_double(s.sigma_u) << ',' << format_double(s.sigma_v) << ','
            << format_double(s.sigma_gamma) << '\n';
    for (int c = 0; c < C; ++c) write_row(eta, id + "," + std::to_string(c + 1), Eigen::RowVectorXd(s.eta.row(c)));
    write_row(u, id, s.u);
    write_row(v, id, s.v);
    write_row(gamma, id, s.gamma);
    if (mixture) {
      z << id;
      for (int zi : s.z) z << ',' << (zi + 1);
      z << '\n';
      for (Eigen::Index i = 0; i < n; ++i) write_row(q, id + "," + std::to_string(i + 1), Eigen::RowVectorXd(s.q.row(i)));
    }
    if (spatial) {
      for (int c = 0; c < C; ++c) {
        write_row(asg, id + "," + std::to_string(c + 1) + ",u", Eigen::RowVectorXd(s.assignment_u.row(c)));
        write_row(asg, id + "," + std::to_string(c + 1) + ",v", Eigen::RowVectorXd(s.assignment_v.row(c)));
        asg_sd << id << ',' << (c + 1) << ',' << format_double(s.sigma_uc[c]) << ',' << format_double(s.sigma_vc[c])
               << '\n';
      }
    }
  }
  auto ll = open_output(dir / "loglik.txt");
  for (Eigen::Index d = 0; d < post.loglik.rows(); ++d) {
    for (Eigen::Index k = 0; k < post.loglik.cols(); ++k) ll << (k ? " " : "") << format_double(post.loglik(d, k));
    ll << '\n';
  }
}

/// Reads a CSV with a header into rows of fields (header checked by width).
inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path, std::size_t width) {
  auto is = open_input(path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path.string() + ": empty file");
  if (split(line, ',').size() != width) throw std::runtime_error(path.string() + ": unexpected header width");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto f = split(line, ',');
    if (f.size() != width) throw std::runtime_error(path.string() + ": row with unexpected width");
    rows.push_back(std::move(f));
  }
  return rows;
}

inline FitInfo read_fit_info(const fs::path& dir) {
  auto is = open_input(dir / "fit_info.txt");
  FitInfo info;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "variant") info.variant = parse_variant(value);
    else if (key == "clusters") info.clusters = static_cast<int>(parse_integer(value, key));
    else if (key == "areas") info.areas = static_cast<int>(parse_integer(value, key));
    else if (key == "times") info.times = static_cast<int>(parse_integer(value, key));
    else if (key == "max_lag") info.max_lag = static_cast<int>(parse_integer(value, key));
    else if (key == "columns") info.columns = static_cast<int>(parse_integer(value, key));
    else if (key == "draws") info.draws = static_cast<std::size_t>(parse_integer(value, key));
  }
  return info;
}

/// Reads the files written by write_draws back into PosteriorDraws.
inline PosteriorDraws read_draws(const fs::path& dir) {
  const FitInfo info = read_fit_info(dir);
  const int n = info.areas, t_len = info.times, p = info.columns, C = info.clusters;
  const std::size_t S = info.draws;
  PosteriorDraws post;
  post.variant = info.variant;
  post.clusters = C;
  post.draws.assign(S, ParameterState::zeros(n, t_len, p, C, info.variant));
  auto num = [&](const std::string& s) { return parse_double(s, dir.string()); };

  const auto scalars = read_csv_rows(dir / "draws_scalars.csv", 8);
  if (scalars.size() != S) throw std::runtime_error("draws: scalar row count differs from fit_info");
  for (std::size_t d = 0; d < S; ++d) {
    auto& s = post.draws[d];
    post.sweeps.push_back(static_cast<int>(parse_integer(scalars[d][1], "sweep")));
    s.alpha = num(scalars[d][2]);
    s.log_r = num(scalars[d][3]);
    s.sigma_u = num(scalars[d][5]);
    s.sigma_v = num(scalars[d][6]);
    s.sigma_gamma = num(scalars[d][7]);
  }
  for (const auto& row : read_csv_rows(dir / "draws_eta.csv", static_cast<std::size_t>(2 + p))) {
    auto& s = post.draws.at(static_cast<std::size_t>(parse_integer(row[0], "draw") - 1));
    const auto c = parse_integer(row[1], "cluster") - 1;
    for (int k = 0; k < p; ++k) s.eta(c, k) = num(row[static_cast<std::size_t>(2 + k)]);
  }
  auto read_wide = [&](const std::string& file, int width, auto setter) {
    for (const auto& row : read_csv_rows(dir / file, static_cast<std::size_t>(1 + width))) {
      auto& s = post.draws.at(static_cast<std::size_t>(parse_integer(row[0], "draw") - 1));
      for (int k = 0; k < width; ++k) setter(s, k, row[static_cast<std::size_t>(1 + k)]);
    }
  };
  read_wide("draws_u.csv", n, [&](ParameterState& s, int k, const std::string& x) { s.u[k] = num(x); });
  read_wide("draws_v.csv", n, [&](ParameterState& s, int k, const std::string& x) { s.v[k] = num(x); });
  read_wide("draws_gamma.csv", t_len, [&](ParameterState& s, int k, const std::string& x) { s.gamma[k] = num(x); });
  if (info.variant != ModelVariant::standard) {
    read_wide("draws_z.csv", n, [&](ParameterState& s, int k, const std::string& x) {
      s.z[static_cast<std::size_t>(k)] = static_cast<int>(parse_integer(x, "z")) - 1;
    });
    for (const auto& row : read_csv_rows(dir / "draws_q.csv", static_cast<std::size_t>(2 + C))) {
      auto& s = post.draws.at(static_cast<std::size_t>(parse_integer(row[0], "draw") - 1));
      const auto i = parse_integer(row[1], "area") - 1;
      for (int c = 0; c < C; ++c) s.q(i, c) = num(row[static_cast<std::size_t>(2 + c)]);
    }
  }
  if (info.variant == ModelVariant::mixture_spatial) {
    for (const auto& row : read_csv_rows(dir / "draws_assignment.csv", static_cast<std::size_t>(3 + n))) {
      auto& s = post.draws.at(static_cast<std::size_t>(parse_integer(row[0], "draw") - 1));
      const auto c = parse_integer(row[1], "cluster") - 1;
      RowMatrix& m = row[2] == "u" ? s.assignment_u : s.assignment_v;
      for (int k = 0; k < n; ++k) m(c, k) = num(row[static_cast<std::size_t>(3 + k)]);
    }
    for (const auto& row : read_csv_rows(dir / "draws_assignment_sd.csv", 4)) {
      auto& s = post.draws.at(static_cast<std::size_t>(parse_integer(row[0], "draw") - 1));
      const auto c = parse_integer(row[1], "cluster") - 1;
      s.sigma_uc[c] = num(row[2]);
      s.sigma_vc[c] = num(row[3]);
    }
  }
  {
    auto is = open_input(dir / "loglik.txt");
    std::vector<std::vector<double>> rows;
    std::string line, tok;
    while (std::getline(is, line)) {
      if (trim(line).empty()) continue;
      std::istringstream ls(line);
      std::vector<double> row;
      while (ls >> tok) row.push_back(std::strtod(tok.c_str(), nullptr));
      rows.push_back(std::move(row));
    }
    if (rows.size() != S) throw std::runtime_error("draws: loglik row count differs from fit_info");
    const auto width = rows.empty() ? 0 : rows.front().size();
    post.loglik.resize(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(width));
    for (std::size_t d = 0; d < S; ++d) {
      if (rows[d].size() != width) throw std::runtime_error("draws: ragged loglik matrix");
      for (std::size_t k = 0; k < width; ++k) post.loglik(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k)) = rows[d][k];
    }
  }
  post.reference_eta = RowMatrix::Zero(C, p);
  for (const auto& row : read_csv_rows(dir / "reference_eta.csv", static_cast<std::size_t>(1 + p))) {
    const auto c = parse_integer(row[0], "cluster") - 1;
    for (int k = 0; k < p; ++k) post.reference_eta(c, k) = num(row[static_cast<std::size_t>(1 + k)]);
  }
  return post;
}

}  // namespace dlnmclust
