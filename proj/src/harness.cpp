#include "ntd/harness.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace ntd {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename T>
std::vector<T> as_list(const Json& doc, const char* key, std::vector<T> fallback) {
  if (!doc.contains(key)) return fallback;
  const Json& v = doc.at(key);
  if (v.is_array()) return v.get<std::vector<T>>();
  return {v.get<T>()};
}

/// %g without locale surprises, used in cell ids.
std::string compact(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", value);
  return buf;
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace

ExperimentSpec ExperimentSpec::from_json(const Json& doc) {
  try {
    require(doc.is_object(), "experiment config must be a JSON object");
    static const std::set<std::string> known = {
        "version", "env", "algorithm", "algorithms", "mode", "architecture", "depth",
        "m", "T", "B", "beta", "eta", "n_seeds", "master_seed", "metrics_every",
        "burn_in", "nu_pairs", "checkpoint", "out", "threads", "emit_plotdata"};
    for (const auto& [key, value] : doc.items()) {
      require(known.count(key) == 1, "unknown config key '" + key + "'");
    }
    if (doc.contains("version")) {
      require(doc.at("version").get<int>() == 1, "unsupported config version");
    }
    ExperimentSpec s;
    s.env = doc.value("env", s.env);
    if (doc.contains("algorithms")) {
      s.algorithms = as_list<std::string>(doc, "algorithms", s.algorithms);
    } else {
      s.algorithms = as_list<std::string>(doc, "algorithm", s.algorithms);
    }
    if (doc.contains("mode")) s.mode = parse_sampling(doc.at("mode").get<std::string>());
    s.architecture = doc.value("architecture", s.architecture);
    s.depth = doc.value("depth", s.depth);
    s.m = as_list<int>(doc, "m", s.m);
    s.T = as_list<int>(doc, "T", s.T);
    s.B = as_list<double>(doc, "B", s.B);
    s.beta = as_list<double>(doc, "beta", s.beta);
    s.eta = doc.value("eta", s.eta);
    s.n_seeds = doc.value("n_seeds", s.n_seeds);
    s.master_seed = doc.value("master_seed", s.master_seed);
    s.metrics_every = doc.value("metrics_every", s.metrics_every);
    s.burn_in = doc.value("burn_in", s.burn_in);
    s.nu_pairs = doc.value("nu_pairs", s.nu_pairs);
    s.checkpoint = doc.value("checkpoint", s.checkpoint);
    s.out = doc.value("out", s.out);
    s.threads = doc.value("threads", s.threads);
    s.emit_plotdata = doc.value("emit_plotdata", s.emit_plotdata);
    s.validate();
    return s;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
}

Json ExperimentSpec::to_json() const {
  return Json{{"version", 1},
              {"env", env},
              {"algorithms", algorithms},
              {"mode", ntd::to_string(mode)},
              {"architecture", architecture},
              {"depth", depth},
              {"m", m},
              {"T", T},
              {"B", B},
              {"beta", beta},
              {"eta", eta},
              {"n_seeds", n_seeds},
              {"master_seed", master_seed},
              {"metrics_every", metrics_every},
              {"burn_in", burn_in},
              {"nu_pairs", nu_pairs},
              {"checkpoint", checkpoint}};
}

void ExperimentSpec::validate() const {
  require(!algorithms.empty() && !m.empty() && !T.empty() && !B.empty() && !beta.empty(),
          "every grid must be non-empty");
  require(n_seeds >= 1, "n_seeds must be at least 1");
  for (const auto& a : algorithms) {
    require(a == "td" || a == "qlearn" || a == "softq" || a == "sac",
            "unknown algorithm '" + a + "'");
    require(mode != Sampling::kPopulation || a == "td",
            "population mode is only available for td");
    require(a != "sac" || mode == Sampling::kIid, "sac only supports iid mode");
  }
  require(architecture == "two_layer" || architecture == "deep",
          "architecture must be two_layer or deep");
  require(depth >= 1, "depth must be at least 1");
  const int cap = architecture == "deep" ? (1 << 7) : (1 << 13);
  for (int w : m) require(w >= 1 && w <= cap, "width m outside [1, " + std::to_string(cap) + "]");
  for (int t : T) require(t >= 2, "T must be at least 2");
  for (double b : B) require(b > 0.0, "B must be positive");
  for (double b : beta) require(b > 0.0, "beta must be positive");
  require(eta >= 0.0, "eta must be non-negative");
  require(metrics_every >= 0 && burn_in >= 0, "metrics_every and burn_in must be >= 0");
  require(nu_pairs >= 1, "nu_pairs must be at least 1");
  require(threads >= 0, "threads must be non-negative");
  require(checkpoint.empty() || architecture == "two_layer",
          "checkpoints are two-layer only");
}

ExperimentSpec load_experiment_spec(const std::string& path) {
  return ExperimentSpec::from_json(read_json_file(path));
}

std::uint64_t replicate_seed(std::uint64_t master_seed, int k) {
  CounterRng rng(master_seed, Stream::kEnvironment);
  return rng.split(static_cast<std::uint64_t>(k))() >> 1;
}

SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), "slope fit needs paired samples");
  SlopeFit fit;
  fit.n = static_cast<int>(x.size());
  require(fit.n >= 2, "slope fit needs at least two points");
  std::vector<double> lx, ly;
  for (size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0.0 && y[i] > 0.0, "log-log fit needs positive values");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  double mx = 0, my = 0;
  for (int i = 0; i < fit.n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= fit.n;
  my /= fit.n;
  double sxx = 0, sxy = 0, syy = 0;
  for (int i = 0; i < fit.n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  require(sxx > 0.0, "slope fit needs at least two distinct x values");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0;
  for (int i = 0; i < fit.n; ++i) {
    const double r = ly[i] - fit.intercept - fit.slope * lx[i];
    sse += r * r;
  }
  fit.r2 = syy > 0.0 ? 1.0 - sse / syy : 1.0;
  fit.std_error = fit.n > 2 ? std::sqrt(sse / (fit.n - 2) / sxx) : 0.0;
  fit.ci_low = fit.slope - 1.96 * fit.std_error;
  fit.ci_high = fit.slope + 1.96 * fit.std_error;
  return fit;
}

std::string trace_to_csv(const RunTrace& trace) {
  std::string out;
  const auto& cols = trace_columns();
  for (size_t i = 0; i < cols.size(); ++i) {
    out += cols[i];
    out += i + 1 < cols.size() ? ',' : '\n';
  }
  for (const auto& r : trace.rows) {
    out += std::to_string(r.t);
    for (double v : {r.delta, r.displacement, r.dist_to_oracle, r.lin_err, r.net_err,
                     r.linearization_gap, r.delta_sq, r.flip_fraction, r.g_norm,
                     r.gbar_norm, r.gap_norm, r.variance, r.monotone_slack,
                     r.descent_slack}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

Json fixed_point_to_json(const FixedPoint& fp, const FiniteMdp& mdp) {
  Json q = Json::array();
  for (int s = 0; s < mdp.n_states; ++s) {
    std::vector<double> row;
    for (int a = 0; a < mdp.n_actions; ++a) row.push_back(fp.q_values(mdp.pair(s, a)));
    q.push_back(row);
  }
  return Json{{"version", 1},
              {"kind", to_string(fp.kind)},
              {"W_star", std::vector<double>(fp.w_star.begin(), fp.w_star.end())},
              {"q_values", q},
              {"residual", fp.residual},
              {"iterations", fp.iterations},
              {"lambda", fp.lambda},
              {"constrained", fp.constrained}};
}

Json checkpoint_to_json(const TwoLayerNet<double>& net) {
  auto rows = [](const Matrix& M) {
    Json out = Json::array();
    for (Index r = 0; r < M.rows(); ++r) {
      out.push_back(std::vector<double>(M.row(r).begin(), M.row(r).end()));
    }
    return out;
  };
  return Json{{"version", 1},
              {"kind", "two_layer"},
              {"shape", {net.m, net.d}},
              {"b", std::vector<double>(net.b.begin(), net.b.end())},
              {"W", rows(net.W)},
              {"W0", rows(net.W0)}};
}

TwoLayerNet<double> checkpoint_from_json(const Json& doc) {
  try {
    require(doc.at("version").get<int>() == 1, "unsupported checkpoint version");
    require(doc.at("kind").get<std::string>() == "two_layer", "unsupported checkpoint kind");
    const auto shape = doc.at("shape").get<std::vector<int>>();
    require(shape.size() == 2 && shape[0] >= 1 && shape[1] >= 1, "bad checkpoint shape");
    TwoLayerNet<double> net;
    net.m = shape[0];
    net.d = shape[1];
    const auto b = doc.at("b").get<std::vector<double>>();
    require(b.size() == static_cast<size_t>(net.m), "checkpoint b has wrong length");
    net.b = Eigen::Map<const Vector>(b.data(), net.m);
    for (double v : b) require(v == 1.0 || v == -1.0, "checkpoint b must hold signs");
    auto read = [&](const char* key) {
      Matrix M(net.m, net.d);
      const auto& rows = doc.at(key);
      require(rows.size() == static_cast<size_t>(net.m), "checkpoint matrix has wrong rows");
      for (int r = 0; r < net.m; ++r) {
        const auto row = rows.at(r).get<std::vector<double>>();
        require(row.size() == static_cast<size_t>(net.d), "checkpoint matrix has wrong cols");
        for (int k = 0; k < net.d; ++k) M(r, k) = row[k];
      }
      return M;
    };
    net.W = read("W");
    net.W0 = read("W0");
    return net;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

std::unique_ptr<QNetwork> build_network(const ExperimentSpec& spec, int m, int d,
                                        std::uint64_t seed) {
  if (!spec.checkpoint.empty()) {
    auto net = checkpoint_from_json(read_json_file(spec.checkpoint));
    require(net.d == d, "checkpoint input dimension does not match the env");
    // Training restarts from the stored W(0); W itself is not a start point.
    net.W = net.W0;
    return std::make_unique<TwoLayerModel>(std::move(net));
  }
  if (spec.architecture == "deep") {
    return std::make_unique<DeepModel>(init_deep<double>(spec.depth, m, d, seed));
  }
  return std::make_unique<TwoLayerModel>(init_two_layer<double>(m, d, seed));
}

namespace {

struct Job {
  size_t cell = 0;
  int seed_index = 0;
};

std::string cell_id(const std::string& alg, int m, int T, double B, double beta) {
  return alg + "_m" + std::to_string(m) + "_T" + std::to_string(T) + "_B" + compact(B) +
         "_beta" + compact(beta);
}

std::string plotdata(const RunTrace& trace) {
  std::string out = "#";
  for (const auto& c : trace_columns()) out += " " + c;
  out += '\n';
  std::string csv = trace_to_csv(trace);
  const auto first = csv.find('\n');
  for (size_t i = first + 1; i < csv.size(); ++i) out += csv[i] == ',' ? ' ' : csv[i];
  return out;
}

SeedResult run_job(const ExperimentSpec& spec, const Environment& env,
                   const CellResult& cell, int k) {
  namespace fs = std::filesystem;
  SeedResult res;
  res.seed_index = k;
  res.seed = replicate_seed(spec.master_seed, k);
  const fs::path dir = fs::path(spec.out) / cell.id;
  const std::string stem = "seed_" + std::to_string(k);
  try {
    const auto net = build_network(spec, cell.m, env.features.dim(), res.seed);
    const FiniteMdp& mdp = env.mdp;
    const Policy uniform = Policy::uniform(mdp.n_states, mdp.n_actions);
    const ProjectionSpec ball(cell.B);

    TdConfig base;
    if (spec.eta > 0.0) base.eta = spec.eta;
    base.T = cell.T;
    base.spec = ball;
    base.sampling = spec.mode;
    base.seed = res.seed;
    base.metrics_every = spec.metrics_every;
    base.burn_in = spec.burn_in;
    SoftConfig soft;
    static_cast<TdConfig&>(soft) = base;
    soft.beta = cell.beta;

    std::optional<FixedPoint> fp;
    RunTrace trace;
    const LinearizedFeatures lin = ntk_features(*net, env.features);
    if (cell.algorithm == "qlearn" || cell.algorithm == "softq") {
      const std::optional<double> b =
          cell.algorithm == "softq" ? std::optional<double>(cell.beta) : std::nullopt;
      const auto rep = estimate_nu(mdp, uniform, lin, ball, spec.nu_pairs, res.seed, b);
      res.nu_hat = rep.nu_hat;
      res.has_nu = true;
      // A non-positive estimate does not stop the run; the solver reports divergence itself.
      try {
        fp = solve_projected_optimality(mdp, uniform, lin, ball, {}, b);
      } catch (const SolverError& e) {
        throw SolverError(std::string(e.what()) + " (estimated nu " + compact(rep.nu_hat) + ")");
      }
    } else if (cell.algorithm == "td") {
      fp = solve_projected_evaluation(mdp, uniform, lin, ball);
    }

    const Problem problem = make_problem(env, *net, fp ? &*fp : nullptr);
    if (cell.algorithm == "td") trace = neural_td(problem, uniform, base);
    if (cell.algorithm == "qlearn") trace = neural_q_learning(problem, uniform, base);
    if (cell.algorithm == "softq") trace = neural_soft_q(problem, uniform, soft);
    if (cell.algorithm == "sac") {
      trace = soft_actor_critic(problem, soft);
      res.expected_return = expected_return(mdp, Policy{trace.pi_out});
    }

    res.eta = trace.eta;
    res.final_error = trace.final_error;
    res.final_lin_error = trace.final_lin_error;
    res.max_variance = trace.metric_rows > 0 ? trace.max_variance : kNaN;
    res.ball_violations = trace.ball_violations;
    res.monotone_violations = trace.monotone_violations;
    res.descent_violations = trace.descent_violations;
    res.sandwich_violations = trace.sandwich_violations;
    {
      const Policy& behaviour = uniform;
      const Vector mu = stationary_distribution(mdp, behaviour).probs;
      const double q0_sq = (mu.array() * lin.base.array().square()).sum();
      res.variance_bound =
          1.1 * (12.0 * q0_sq + 12.0 * cell.B * cell.B + 3.0 * mdp.r_bar * mdp.r_bar);
    }

    // Paths in the summary are relative to the output directory.
    res.csv_path = cell.id + "/" + stem + ".csv";
    write_text_file((dir / (stem + ".csv")).string(), trace_to_csv(trace));
    if (fp) {
      res.oracle_residual = fp->residual;
      res.fixed_point_path = cell.id + "/" + stem + "_fixed_point.json";
      write_text_file((dir / (stem + "_fixed_point.json")).string(),
                      fixed_point_to_json(*fp, mdp).dump(2) + "\n");
    }
    if (const auto* two = dynamic_cast<const TwoLayerModel*>(net.get())) {
      TwoLayerNet<double> out = two->net();
      out.W = Eigen::Map<const Matrix>(trace.w_bar.data(), out.m, out.d);
      write_text_file((dir / (stem + "_checkpoint.json")).string(),
                      checkpoint_to_json(out).dump() + "\n");
    }
    if (spec.emit_plotdata) {
      write_text_file((dir / (stem + ".dat")).string(), plotdata(trace));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    res.status = "failed";
    res.reason = e.what();
  }
  return res;
}

/// null when the check does not apply to this run.
Json seed_json(const SeedResult& r, const std::string& algorithm, Sampling mode) {
  const bool ok = r.status == "ok";
  auto check = [&](int violations, bool applies = true) -> Json {
    if (!ok || !applies) return nullptr;
    return violations == 0 ? "pass" : "fail";
  };
  Json variance = nullptr;
  if (ok && std::isfinite(r.max_variance)) {
    variance = r.max_variance <= r.variance_bound ? "pass" : "fail";
  }
  Json j{{"seed_index", r.seed_index},
         {"seed", r.seed},
         {"status", r.status},
         {"eta", number_or_null(r.eta)},
         {"final_error", number_or_null(r.final_error)},
         {"final_lin_error", number_or_null(r.final_lin_error)},
         {"nu_hat", r.has_nu ? number_or_null(r.nu_hat) : Json(nullptr)},
         {"max_variance", number_or_null(r.max_variance)},
         {"variance_bound", number_or_null(r.variance_bound)},
         {"oracle_residual", number_or_null(r.oracle_residual)},
         {"expected_return", number_or_null(r.expected_return)},
         {"assertions",
          {{"ball", check(r.ball_violations)},
           {"monotone", check(r.monotone_violations, algorithm == "td")},
           {"descent",
            check(r.descent_violations, algorithm == "td" && mode == Sampling::kPopulation)},
           {"softmax_sandwich",
            check(r.sandwich_violations, algorithm == "softq")},
           {"variance", variance}}},
         {"csv", r.csv_path},
         {"fixed_point", r.fixed_point_path.empty() ? Json(nullptr) : Json(r.fixed_point_path)}};
  if (!r.reason.empty()) j["reason"] = r.reason;
  return j;
}

Json fit_json(const SlopeFit& f) {
  return Json{{"n", f.n},           {"slope", f.slope},     {"intercept", f.intercept},
              {"std_error", f.std_error}, {"ci_low", f.ci_low}, {"ci_high", f.ci_high},
              {"r2", f.r2}};
}

}  // namespace

SweepResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const Environment env = resolve_environment(spec.env);

  SweepResult result;
  std::vector<Job> jobs;
  for (const auto& alg : spec.algorithms) {
    for (int m : spec.m) {
      for (int T : spec.T) {
        for (double B : spec.B) {
          for (double beta : spec.beta) {
            CellResult cell;
            cell.algorithm = alg;
            cell.m = m;
            cell.T = T;
            cell.B = B;
            cell.beta = beta;
            cell.id = cell_id(alg, m, T, B, beta);
            cell.seeds.resize(static_cast<size_t>(spec.n_seeds));
            for (int k = 0; k < spec.n_seeds; ++k) jobs.push_back({result.cells.size(), k});
            result.cells.push_back(std::move(cell));
          }
        }
      }
    }
  }

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned n_threads =
      std::min<unsigned>(spec.threads > 0 ? unsigned(spec.threads) : hw,
                         static_cast<unsigned>(jobs.size()));
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr config_error;
  auto worker = [&]() {
    for (size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      CellResult& cell = result.cells[job.cell];
      try {
        cell.seeds[static_cast<size_t>(job.seed_index)] =
            run_job(spec, env, cell, job.seed_index);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!config_error) config_error = std::current_exception();
      }
    }
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (config_error) std::rethrow_exception(config_error);

  // Aggregation runs after the barrier, in grid order.
  Json cells = Json::array();
  int failures = 0;
  bool all_pass = true;
  for (auto& cell : result.cells) {
    std::vector<double> errs;
    Json seeds = Json::array();
    for (const auto& s : cell.seeds) {
      if (s.status == "failed") ++failures;
      if (s.status == "ok" && std::isfinite(s.final_error)) errs.push_back(s.final_error);
      const Json sj = seed_json(s, cell.algorithm, spec.mode);
      for (const auto& [name, v] : sj.at("assertions").items()) {
        if (v == "fail") all_pass = false;
      }
      seeds.push_back(sj);
    }
    cell.n_ok = static_cast<int>(errs.size());
    cell.mean_error = kNaN;
    cell.se_error = kNaN;
    if (!errs.empty()) {
      double mean = 0;
      for (double e : errs) mean += e;
      mean /= double(errs.size());
      double var = 0;
      for (double e : errs) var += (e - mean) * (e - mean);
      cell.mean_error = mean;
      cell.se_error =
          errs.size() > 1 ? std::sqrt(var / double(errs.size() - 1) / double(errs.size())) : 0.0;
    }
    cells.push_back(Json{{"id", cell.id},
                         {"algorithm", cell.algorithm},
                         {"mode", to_string(spec.mode)},
                         {"m", cell.m},
                         {"T", cell.T},
                         {"B", cell.B},
                         {"beta", cell.beta},
                         {"mean_final_error", number_or_null(cell.mean_error)},
                         {"se_final_error", number_or_null(cell.se_error)},
                         {"n_ok", cell.n_ok},
                         {"seeds", seeds}});
  }

  // Width fits group cells by (algorithm, T, B, beta); horizon fits by (algorithm, m, B, beta).
  auto fits = [&](bool width) {
    std::map<std::tuple<std::string, double, double, double>, std::vector<const CellResult*>> groups;
    for (const auto& c : result.cells) {
      const double other = width ? double(c.T) : double(c.m);
      groups[{c.algorithm, other, c.B, c.beta}].push_back(&c);
    }
    Json out = Json::array();
    for (const auto& [key, members] : groups) {
      std::vector<double> xs, ys;
      for (const auto* c : members) {
        if (std::isfinite(c->mean_error) && c->mean_error > 0.0) {
          xs.push_back(width ? double(c->m) : double(c->T));
          ys.push_back(c->mean_error);
        }
      }
      if (std::set<double>(xs.begin(), xs.end()).size() < 2) continue;
      Json j = fit_json(fit_loglog(xs, ys));
      j["algorithm"] = std::get<0>(key);
      j[width ? "T" : "m"] = static_cast<int>(std::get<1>(key));
      j["B"] = std::get<2>(key);
      j["beta"] = std::get<3>(key);
      out.push_back(j);
    }
    return out;
  };

  result.summary = Json{{"version", 1},
                        {"spec", spec.to_json()},
                        {"env_hash", content_hash(env)},
                        {"gamma", env.mdp.gamma},
                        {"cells", cells},
                        {"width_fits", fits(true)},
                        {"horizon_fits", fits(false)},
                        {"failures", failures},
                        {"all_assertions_pass", all_pass}};
  write_text_file((std::filesystem::path(spec.out) / "summary.json").string(),
                  result.summary.dump(2) + "\n");
  return result;
}

}  // namespace ntd
