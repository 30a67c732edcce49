#include "cpi/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "cpi/rng.hpp"

namespace cpi::exp {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

double parse_number(const std::string& text, const std::string& what) {
  double x = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), x);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw UsageError("bad number '" + text + "' in " + what);
  }
  return x;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_hash_line(std::ostream& out, const std::string& hash) {
  out << "# spec_hash=" << hash << '\n';
}

double greedy_return(const TabularMdp& mdp, const Policy& policy, std::size_t cap) {
  return rollout_return(mdp, policy, mdp.start_state(), cap, 0, RolloutMode::kGreedy)
      .undiscounted_return;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

// Population statistics (ddof = 0), so a single seed reports std 0.
MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  double acc = 0.0;
  for (double x : xs) acc += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(acc / static_cast<double>(xs.size()));
  return r;
}

}  // namespace

std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Environments

const envs::Region& Environment::region(const std::string& name) const {
  for (const auto& r : regions) {
    if (r.name == name) return r;
  }
  std::string known;
  for (const auto& r : regions) known += (known.empty() ? "" : ", ") + r.name;
  throw UsageError("unknown region '" + name + "' (known: " + known + ")");
}

Environment resolve_environment(const std::string& id, double discount) {
  envs::GridSpec spec;
  if (id == "grid7x7") {
    spec = envs::GridSpec::grid7x7();
  } else if (id == "fourroom") {
    spec = envs::GridSpec::four_room();
  } else if (fs::exists(id)) {
    spec = envs::load_grid_spec(id);
  } else {
    throw UsageError("unknown environment '" + id +
                     "' (expected grid7x7, fourroom or a spec file)");
  }
  Environment env{id, spec, envs::build_gridworld(spec, discount), {}, {}};
  try {
    for (auto& room : envs::four_room_regions(spec)) env.regions.push_back(room);
  } catch (const InvalidSpec&) {
    // Not a four-room layout; only the whole grid is addressable.
  }
  env.regions.push_back(envs::whole_grid_region(spec));
  const envs::GridLayout layout(spec);
  for (StateIndex s = 0; s < layout.n_cells(); ++s) {
    if (s != layout.goal_state()) env.restart_states.push_back(s);
  }
  return env;
}

// ---------------------------------------------------------------------------
// Dataset recipes

void DatasetRecipe::validate() const {
  if (behavior != "mixed" && !data::parse_behavior(behavior)) {
    throw UsageError("unknown behavior '" + behavior + "'");
  }
  if (behavior == "custom") throw UsageError("custom behavior needs the library API");
  if (behavior == "mixed") {
    if (!(expert_fraction >= 0.0 && expert_fraction <= 1.0)) {
      throw UsageError("expert_fraction must lie in [0, 1]");
    }
    const auto other = data::parse_behavior(mix_with);
    if (!other || *other == data::BehaviorKind::kCustom) {
      throw UsageError("unknown mix_with behavior '" + mix_with + "'");
    }
  }
  if (n == 0) throw UsageError("dataset size must be positive");
  if (cap == 0) throw UsageError("episode cap must be positive");
  if (!restart.empty() && !data::parse_restart(restart)) {
    throw UsageError("unknown restart '" + restart + "'");
  }
  for (const auto& f : filters) {
    const auto parts = split(f, ':');
    if (parts[0] == "missing-action") {
      if (parts.size() != 3 || !envs::parse_action(parts[2])) {
        throw UsageError("filter '" + f + "': expected missing-action:<region>:<action>");
      }
    } else if (parts[0] == "percentile") {
      if (parts.size() != 3 || !data::parse_band(parts[1])) {
        throw UsageError("filter '" + f + "': expected percentile:<band>:<fraction>");
      }
      const double frac = parse_number(parts[2], f);
      if (!(frac > 0.0 && frac <= 1.0)) throw UsageError("filter '" + f + "': bad fraction");
    } else {
      throw UsageError("unknown filter '" + f + "'");
    }
  }
}

void to_json(nlohmann::json& j, const DatasetRecipe& r) {
  j = nlohmann::json{{"behavior", r.behavior}, {"n", r.n},     {"cap", r.cap},
                     {"restart", r.restart},   {"seed", r.seed}, {"filters", r.filters}};
  if (r.behavior == "mixed") {
    j["expert_fraction"] = r.expert_fraction;
    j["mix_with"] = r.mix_with;
  }
}

void from_json(const nlohmann::json& j, DatasetRecipe& r) {
  const DatasetRecipe d;
  r.behavior = j.value("behavior", d.behavior);
  r.n = j.value("n", d.n);
  r.cap = j.value("cap", d.cap);
  r.restart = j.value("restart", d.restart);
  r.seed = j.value("seed", d.seed);
  r.expert_fraction = j.value("expert_fraction", d.expert_fraction);
  r.mix_with = j.value("mix_with", d.mix_with);
  r.filters = j.value("filters", d.filters);
}

namespace {

data::Restart default_restart(data::BehaviorKind kind, const std::string& requested) {
  if (!requested.empty()) return *data::parse_restart(requested);
  return kind == data::BehaviorKind::kExpert ? data::Restart::kFixedStart
                                             : data::Restart::kRandomRestart;
}

data::Dataset collect_kind(const Environment& env, data::BehaviorKind kind, std::size_t n,
                           std::size_t cap, data::Restart restart, std::uint64_t seed) {
  const Policy behavior = data::make_behavior_policy(kind, env.mdp);
  return data::collect(env.mdp, behavior, n, cap, restart, seed, env.restart_states);
}

}  // namespace

data::Dataset apply_filter(const Environment& env, const data::Dataset& dataset,
                           const std::string& filter) {
  const auto parts = split(filter, ':');
  if (parts.size() == 3 && parts[0] == "missing-action") {
    const auto action = envs::parse_action(parts[2]);
    if (!action) throw UsageError("unknown action '" + parts[2] + "'");
    return data::missing_action_filter(dataset, env.region(parts[1]).states, *action);
  }
  if (parts.size() == 3 && parts[0] == "percentile") {
    const auto band = data::parse_band(parts[1]);
    if (!band) throw UsageError("unknown band '" + parts[1] + "'");
    return data::percentile_filter(dataset, *band, parse_number(parts[2], filter));
  }
  throw UsageError("unknown filter '" + filter + "'");
}

data::Dataset build_dataset(const Environment& env, const DatasetRecipe& recipe,
                            std::uint64_t seed) {
  recipe.validate();
  data::Dataset ds;
  if (recipe.behavior == "mixed") {
    const auto other = *data::parse_behavior(recipe.mix_with);
    const auto n_expert = static_cast<std::size_t>(
        std::llround(recipe.expert_fraction * static_cast<double>(recipe.n)));
    const std::size_t n_other = recipe.n - n_expert;
    std::optional<data::Dataset> part;
    if (n_expert > 0) {
      part = collect_kind(env, data::BehaviorKind::kExpert, n_expert, recipe.cap,
                          data::Restart::kFixedStart, derive_seed(seed, 1));
    }
    if (n_other > 0) {
      data::Dataset rest = collect_kind(env, other, n_other, recipe.cap,
                                        default_restart(other, recipe.restart),
                                        derive_seed(seed, 2));
      part = part ? data::concat(*part, rest) : std::move(rest);
    }
    ds = std::move(*part);
  } else {
    const auto kind = *data::parse_behavior(recipe.behavior);
    ds = collect_kind(env, kind, recipe.n, recipe.cap, default_restart(kind, recipe.restart),
                      seed);
  }
  for (const auto& f : recipe.filters) ds = apply_filter(env, ds, f);
  nlohmann::json recipe_json = recipe;
  recipe_json["seed"] = seed;
  ds.provenance() = nlohmann::json{{"env", env.id},
                                   {"discount", env.mdp.discount()},
                                   {"recipe", recipe_json},
                                   {"collection", ds.provenance()}};
  return ds;
}

// ---------------------------------------------------------------------------
// Specs

void ExperimentSpec::validate() const {
  if (dataset_file.empty()) {
    dataset.validate();
  } else if (!fs::exists(dataset_file)) {
    throw UsageError("dataset file '" + dataset_file + "' does not exist");
  }
  if (env != "grid7x7" && env != "fourroom" && !fs::exists(env)) {
    throw UsageError("environment '" + env + "' is neither built in nor an existing file");
  }
  if (!(discount >= 0.0 && discount < 1.0)) throw UsageError("discount must lie in [0, 1)");
  if (algorithms.empty()) throw UsageError("algorithm list is empty");
  if (taus.empty()) throw UsageError("tau grid is empty");
  if (lambdas.empty()) throw UsageError("lambda grid is empty");
  if (seeds.empty()) throw UsageError("seed list is empty");
  for (const auto& a : algorithms) {
    if (a != "cpi" && a != "br" && a != "cpi-re") {
      throw UsageError("unknown algorithm '" + a + "' (expected cpi, br or cpi-re)");
    }
  }
  for (double t : taus) {
    if (!(t > 0.0) || !std::isfinite(t)) throw UsageError("tau values must be positive");
  }
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("lambda values must lie in [0, 1]");
  }
  const auto mode = solvers::parse_eval_mode(eval_mode);
  if (!mode) throw UsageError("unknown eval_mode '" + eval_mode + "'");
  if (br_mode != "multi-step" && br_mode != "one-step") {
    throw UsageError("unknown br_mode '" + br_mode + "'");
  }
  if (*mode == solvers::EvalMode::kExact &&
      std::find(algorithms.begin(), algorithms.end(), "cpi-re") != algorithms.end()) {
    throw UsageError("cpi-re needs fitted or fitted-bootstrap evaluation");
  }
  if (episode_cap == 0) throw UsageError("episode_cap must be positive");
  if (out.empty()) throw UsageError("output directory is empty");
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = nlohmann::json{{"env", s.env},
                     {"discount", s.discount},
                     {"algorithms", s.algorithms},
                     {"taus", s.taus},
                     {"lambdas", s.lambdas},
                     {"iterations", s.iterations},
                     {"seeds", s.seeds},
                     {"eval_mode", s.eval_mode},
                     {"br_mode", s.br_mode},
                     {"eval_episodes", s.eval_episodes},
                     {"episode_cap", s.episode_cap},
                     {"out", s.out}};
  if (s.dataset_file.empty()) {
    j["dataset"] = s.dataset;
  } else {
    j["dataset_file"] = s.dataset_file;
  }
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  const ExperimentSpec d;
  try {
    s.env = j.value("env", d.env);
    s.discount = j.value("discount", d.discount);
    s.dataset = j.value("dataset", d.dataset);
    s.dataset_file = j.value("dataset_file", d.dataset_file);
    s.algorithms = j.value("algorithms", d.algorithms);
    s.taus = j.value("taus", d.taus);
    s.lambdas = j.value("lambdas", d.lambdas);
    s.iterations = j.value("iterations", d.iterations);
    s.seeds = j.value("seeds", d.seeds);
    s.eval_mode = j.value("eval_mode", d.eval_mode);
    s.br_mode = j.value("br_mode", d.br_mode);
    s.eval_episodes = j.value("eval_episodes", d.eval_episodes);
    s.episode_cap = j.value("episode_cap", d.episode_cap);
    s.out = j.value("out", d.out);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed experiment spec: ") + e.what());
  }
}

ExperimentSpec load_experiment_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read spec file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("spec file '" + path + "' is not valid JSON: " + e.what());
  }
  return j.get<ExperimentSpec>();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string spec_hash(const nlohmann::json& spec) {
  // The output directory names where results go, not what they are.
  nlohmann::json content = spec;
  if (content.is_object()) content.erase("out");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(content.dump());
  return os.str();
}

std::string RunKey::stem() const {
  return algorithm + "_tau" + format_double(tau) + "_lambda" + format_double(lambda) +
         "_seed" + std::to_string(seed);
}

std::size_t GridResult::failures() const {
  return static_cast<std::size_t>(
      std::count_if(runs.begin(), runs.end(), [](const RunRecord& r) { return r.error.has_value(); }));
}

// ---------------------------------------------------------------------------
// Oracles

OracleValues compute_oracles(const TabularMdp& mdp, const SupportMask& support,
                             std::size_t episode_cap) {
  constexpr double kTol = 1e-10;
  OracleValues o;
  const OptimalSolution full = value_iteration(mdp, kTol);
  o.value_full = full.v(mdp.start_state());
  o.return_full = greedy_return(mdp, full.policy, episode_cap);
  const OptimalSolution in = in_sample_value_iteration(mdp, support, kTol);
  o.value_in_sample = in.v(mdp.start_state());
  o.return_in_sample = greedy_return(mdp, in.policy, episode_cap);
  return o;
}

OracleReport oracle_report(const Environment& env, const data::Dataset* dataset,
                           bool strict) {
  constexpr double kTol = 1e-10;
  constexpr std::size_t kCap = 30;
  OracleReport r;
  r.env_id = env.id;
  const envs::GridLayout layout(env.spec);
  r.optimal_path_length =
      static_cast<std::size_t>(layout.bfs_distance(env.spec.start, env.spec.goal).value());
  const std::size_t ns = env.mdp.n_states();
  const std::size_t na = env.mdp.n_actions();
  if (dataset == nullptr) {
    r.values = compute_oracles(env.mdp, SupportMask::full(ns, na), kCap);
    r.supported_pairs = ns * na;
    return r;
  }
  dataset->validate(ns, na, &env.mdp);
  r.has_dataset = true;
  const SupportMask support = data::empirical_support(*dataset, ns, na);
  r.supported_pairs = support.count();
  for (StateIndex s : support.unvisited_states()) {
    if (!env.mdp.is_terminal(s)) r.unvisited_states.push_back(s);
  }
  if (strict) {
    InSampleOptions opts;
    opts.unvisited = UnvisitedHandling::kError;
    in_sample_value_iteration(env.mdp, support, kTol, opts);  // throws on bootstrap
  }
  r.values = compute_oracles(env.mdp, support, kCap);
  return r;
}

nlohmann::json to_json(const OracleReport& r) {
  return nlohmann::json{{"env", r.env_id},
                        {"optimal_path_moves", r.optimal_path_length},
                        {"value_full", r.values.value_full},
                        {"return_full", r.values.return_full},
                        {"value_in_sample", r.values.value_in_sample},
                        {"return_in_sample", r.values.return_in_sample},
                        {"has_dataset", r.has_dataset},
                        {"supported_pairs", r.supported_pairs},
                        {"unvisited_states", r.unvisited_states}};
}

// ---------------------------------------------------------------------------
// Run grid

namespace {

struct SeedContext {
  std::optional<solvers::Problem> problem;
  OracleValues oracle;
  std::optional<std::string> error;
};

solvers::SolverConfig solver_config(const ExperimentSpec& spec, const RunKey& key) {
  solvers::SolverConfig c;
  c.tau = key.tau;
  c.lambda = key.lambda;
  c.iterations = spec.iterations;
  c.eval_mode = *solvers::parse_eval_mode(spec.eval_mode);
  c.rng_seed = key.seed;
  c.ensemble = key.algorithm == "cpi-re";
  c.br_mode = spec.br_mode == "one-step" ? solvers::BrMode::kOneStep
                                         : solvers::BrMode::kMultiStep;
  c.eval_episodes = spec.eval_episodes;
  c.episode_cap = spec.episode_cap;
  return c;
}

solvers::RunResult run_one(const solvers::Problem& problem, const RunKey& key,
                           const solvers::SolverConfig& config) {
  if (key.algorithm == "br") return solvers::run_br(problem, config);
  if (key.algorithm == "cpi-re") return solvers::run_cpi_re(problem, config);
  return solvers::run_cpi(problem, config);
}

}  // namespace

GridResult run_grid(const ExperimentSpec& spec, std::size_t jobs, std::ostream* progress) {
  spec.validate();
  const Environment env = resolve_environment(spec.env, spec.discount);
  const nlohmann::json spec_json = spec;
  GridResult result;
  result.spec_hash = spec_hash(spec_json);

  const fs::path out_dir(spec.out);
  ensure_directory(out_dir / "runs");

  std::optional<data::Dataset> file_dataset;
  if (!spec.dataset_file.empty()) {
    auto loaded = data::read_jsonl(spec.dataset_file);
    if (loaded.n_states != env.mdp.n_states() || loaded.n_actions != env.mdp.n_actions()) {
      throw UsageError("dataset file shape does not match environment '" + spec.env + "'");
    }
    file_dataset = std::move(loaded.dataset);
  }

  // Datasets and models are built once per seed, before any worker starts;
  // the runs only read them.
  std::vector<SeedContext> contexts(spec.seeds.size());
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
    try {
      const data::Dataset ds = file_dataset ? *file_dataset
                                            : build_dataset(env, spec.dataset,
                                                            spec.dataset.seed + spec.seeds[i]);
      contexts[i].problem = solvers::Problem::from_dataset(env.mdp, ds);
      contexts[i].oracle =
          compute_oracles(env.mdp, contexts[i].problem->support(), spec.episode_cap);
    } catch (const std::exception& e) {
      contexts[i].error = std::string("dataset: ") + e.what();
    }
  }

  struct Task {
    RunKey key;
    std::size_t seed_index;
  };
  std::vector<Task> tasks;
  for (const auto& algo : spec.algorithms) {
    for (double tau : spec.taus) {
      for (double lambda : spec.lambdas) {
        for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
          tasks.push_back({RunKey{algo, tau, lambda, spec.seeds[i]}, i});
        }
      }
    }
  }
  result.runs.resize(tasks.size());

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < tasks.size(); k = next++) {
      const Task& task = tasks[k];
      RunRecord& rec = result.runs[k];
      rec.key = task.key;
      rec.spec_hash = result.spec_hash;
      rec.curve_file = "runs/" + task.key.stem() + ".csv";
      const SeedContext& ctx = contexts[task.seed_index];
      rec.oracle = ctx.oracle;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (ctx.error) throw std::runtime_error(*ctx.error);
        auto run = run_one(*ctx.problem, task.key, solver_config(spec, task.key));
        std::ofstream out = open_output(out_dir / rec.curve_file);
        write_hash_line(out, result.spec_hash);
        run.curve.write_csv(out);
        rec.curve = std::move(run.curve);
      } catch (const std::exception& e) {
        rec.error = e.what();
      }
      rec.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const std::size_t finished = ++done;
      if (progress != nullptr) {
        std::lock_guard<std::mutex> lock(progress_mutex);
        *progress << "[" << finished << "/" << tasks.size() << "] " << task.key.stem()
                  << (rec.error ? " FAILED: " + *rec.error : std::string()) << '\n';
      }
    }
  };
  const std::size_t n_workers = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  {
    std::ofstream out = open_output(out_dir / "aggregate.csv");
    write_hash_line(out, result.spec_hash);
    write_aggregate_csv(result, spec.iterations, out);
  }

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : result.runs) {
    nlohmann::json j{{"stem", r.key.stem()},
                     {"algorithm", r.key.algorithm},
                     {"tau", r.key.tau},
                     {"lambda", r.key.lambda},
                     {"seed", r.key.seed},
                     {"spec_hash", r.spec_hash},
                     {"oracle",
                      {{"value_full", r.oracle.value_full},
                       {"return_full", r.oracle.return_full},
                       {"value_in_sample", r.oracle.value_in_sample},
                       {"return_in_sample", r.oracle.return_in_sample}}}};
    if (r.error) {
      j["status"] = "failed";
      j["error"] = *r.error;
    } else {
      const auto& last = r.curve->records.back();
      j["status"] = "ok";
      j["curve_file"] = r.curve_file;
      j["final_return_undiscounted"] = last.return_undiscounted;
      j["final_value_start_discounted"] = last.value_start_discounted;
    }
    runs.push_back(std::move(j));
  }
  {
    std::ofstream out = open_output(out_dir / "manifest.json");
    out << nlohmann::json{{"spec_hash", result.spec_hash},
                          {"spec", spec_json},
                          {"failures", result.failures()},
                          {"runs", runs}}
               .dump(2)
        << '\n';
  }
  {
    std::ofstream out = open_output(out_dir / "timing.log");
    out << "spec_hash " << result.spec_hash << '\n';
    for (const auto& r : result.runs) {
      out << r.key.stem() << ' ' << std::fixed << std::setprecision(3) << r.wall_seconds
          << "s\n";
    }
  }
  return result;
}

void write_aggregate_csv(const GridResult& result, std::size_t iterations,
                         std::ostream& out) {
  out << "algorithm,tau,lambda,iteration,n_seeds,"
         "mean_return_undiscounted,std_return_undiscounted,"
         "mean_value_start_discounted,std_value_start_discounted,"
         "mean_policy_delta,std_policy_delta,mean_oracle_gap,std_oracle_gap\n";
  // Groups in first-appearance order, which follows the spec's grid order.
  std::vector<std::tuple<std::string, double, double>> groups;
  for (const auto& r : result.runs) {
    const auto g = std::make_tuple(r.key.algorithm, r.key.tau, r.key.lambda);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  for (const auto& [algo, tau, lambda] : groups) {
    std::vector<const solvers::LearningCurve*> curves;
    for (const auto& r : result.runs) {
      if (r.key.algorithm == algo && r.key.tau == tau && r.key.lambda == lambda && r.curve) {
        curves.push_back(&*r.curve);
      }
    }
    for (std::size_t t = 0; t <= iterations; ++t) {
      std::vector<double> ret, val, delta, gap;
      for (const auto* c : curves) {
        const auto& rec = c->records.at(t);
        ret.push_back(rec.return_undiscounted);
        val.push_back(rec.value_start_discounted);
        delta.push_back(rec.policy_delta);
        if (rec.oracle_gap) gap.push_back(*rec.oracle_gap);
      }
      out << algo << ',' << format_double(tau) << ',' << format_double(lambda) << ',' << t
          << ',' << curves.size();
      for (const auto* xs : {&ret, &val, &delta, &gap}) {
        const MeanStd m = mean_std(*xs);
        if (xs->empty()) {
          out << ",,";
        } else {
          out << ',' << format_double(m.mean) << ',' << format_double(m.std);
        }
      }
      out << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Percentile study

void PercentileSpec::validate() const {
  dataset.validate();
  if (dataset.behavior != "mixed") {
    throw UsageError("the percentile study needs a mixed dataset (two behavior kinds)");
  }
  if (!(fraction > 0.0 && fraction <= 0.5)) throw UsageError("fraction must lie in (0, 0.5]");
  if (!(tau > 0.0)) throw UsageError("tau must be positive");
  if (seeds.empty()) throw UsageError("seed list is empty");
  if (episode_cap == 0) throw UsageError("episode_cap must be positive");
}

void to_json(nlohmann::json& j, const PercentileSpec& s) {
  j = nlohmann::json{{"env", s.env},           {"discount", s.discount},
                     {"dataset", s.dataset},   {"fraction", s.fraction},
                     {"tau", s.tau},           {"iterations", s.iterations},
                     {"seeds", s.seeds},       {"eval_episodes", s.eval_episodes},
                     {"episode_cap", s.episode_cap}, {"out", s.out}};
}

void from_json(const nlohmann::json& j, PercentileSpec& s) {
  const PercentileSpec d;
  try {
    s.env = j.value("env", d.env);
    s.discount = j.value("discount", d.discount);
    s.dataset = j.value("dataset", d.dataset);
    s.fraction = j.value("fraction", d.fraction);
    s.tau = j.value("tau", d.tau);
    s.iterations = j.value("iterations", d.iterations);
    s.seeds = j.value("seeds", d.seeds);
    s.eval_episodes = j.value("eval_episodes", d.eval_episodes);
    s.episode_cap = j.value("episode_cap", d.episode_cap);
    s.out = j.value("out", d.out);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed percentile spec: ") + e.what());
  }
}

double PercentileResult::mean(data::Band band, bool br) const {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.band != band) continue;
    acc += br ? r.br_return : r.clone_return;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

PercentileResult run_percentile(const PercentileSpec& spec) {
  spec.validate();
  const Environment env = resolve_environment(spec.env, spec.discount);
  const nlohmann::json spec_json = spec;
  PercentileResult result;
  result.spec_hash = spec_hash(spec_json);
  const std::size_t ns = env.mdp.n_states();
  const std::size_t na = env.mdp.n_actions();

  for (std::uint64_t seed : spec.seeds) {
    const data::Dataset full = build_dataset(env, spec.dataset, spec.dataset.seed + seed);
    const std::size_t k = full.trajectory_count();
    if (2 * data::band_size(spec.fraction, k) > k) {
      throw InvalidArgument("dataset has " + std::to_string(k) +
                            " trajectories, too few for disjoint bands of fraction " +
                            format_double(spec.fraction));
    }
    const TabularMdp model = data::empirical_mdp(full, env.mdp);
    for (data::Band band : {data::Band::kTop, data::Band::kMedian, data::Band::kBottom}) {
      const data::Dataset sub = data::percentile_filter(full, band, spec.fraction);
      PercentileRow row;
      row.seed = seed;
      row.band = band;
      row.trajectories = sub.trajectory_count();
      double acc = 0.0;
      for (const auto& t : sub.summaries()) acc += t.undiscounted_return;
      row.band_mean_return = acc / static_cast<double>(row.trajectories);

      const Policy clone = data::empirical_behavior_policy(sub, ns, na);
      row.clone_return = mean_rollout_return(env.mdp, clone, env.mdp.start_state(),
                                             spec.episode_cap, spec.eval_episodes,
                                             derive_seed(seed, 0xC10E), RolloutMode::kGreedy)
                             .undiscounted_return;

      // BR against the frozen clone, with Q from the full dataset's model.
      const solvers::Problem problem(env.mdp, model, clone, full);
      solvers::SolverConfig config;
      config.tau = spec.tau;
      config.iterations = spec.iterations;
      config.eval_mode = solvers::EvalMode::kFitted;
      config.rng_seed = seed;
      config.eval_episodes = spec.eval_episodes;
      config.episode_cap = spec.episode_cap;
      row.br_return = solvers::run_br(problem, config).curve.records.back().return_undiscounted;
      result.rows.push_back(row);
    }
  }

  const fs::path out_dir(spec.out);
  ensure_directory(out_dir);
  const char* kLabel =
      "# desk-scale analog: tabular behavior regularization (BR) stands in for TD3+BC; "
      "reference = return-filtered clone\n";
  {
    std::ofstream out = open_output(out_dir / "percentile.csv");
    write_hash_line(out, result.spec_hash);
    out << kLabel;
    out << "seed,band,fraction,trajectories,band_mean_return,reference_clone_return,"
           "regularized_br_return\n";
    for (const auto& r : result.rows) {
      out << r.seed << ',' << data::to_string(r.band) << ',' << format_double(spec.fraction)
          << ',' << r.trajectories << ',' << format_double(r.band_mean_return) << ','
          << format_double(r.clone_return) << ',' << format_double(r.br_return) << '\n';
    }
  }
  {
    std::ofstream out = open_output(out_dir / "percentile_summary.csv");
    write_hash_line(out, result.spec_hash);
    out << kLabel;
    out << "band,n_seeds,mean_reference_clone_return,std_reference_clone_return,"
           "mean_regularized_br_return,std_regularized_br_return\n";
    for (data::Band band : {data::Band::kTop, data::Band::kMedian, data::Band::kBottom}) {
      std::vector<double> clone, br;
      for (const auto& r : result.rows) {
        if (r.band != band) continue;
        clone.push_back(r.clone_return);
        br.push_back(r.br_return);
      }
      const MeanStd c = mean_std(clone);
      const MeanStd b = mean_std(br);
      out << data::to_string(band) << ',' << clone.size() << ',' << format_double(c.mean)
          << ',' << format_double(c.std) << ',' << format_double(b.mean) << ','
          << format_double(b.std) << '\n';
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Theory checks

bool CheckResult::passed() const {
  return improvement.passed() && bound.passed() && softmax.passed();
}

nlohmann::json CheckResult::to_json() const {
  return nlohmann::json{{"passed", passed()},
                        {"vacuous", vacuous},
                        {"improvement", theory::to_json(improvement)},
                        {"bound", theory::to_json(bound)},
                        {"softmax", theory::to_json(softmax)}};
}

CheckResult run_checks(const CheckSpec& spec) {
  CheckResult r;
  r.improvement = theory::check_improvement_and_support(spec.improvement);
  r.bound = theory::check_gap_bound_suite(spec.bound);
  r.softmax = theory::check_softmax_optimality(spec.softmax);
  r.vacuous = spec.improvement.n_trials == 0 && spec.bound.n_trials == 0 &&
              spec.softmax.n_trials == 0;
  return r;
}

}  // namespace cpi::exp
