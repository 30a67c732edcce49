// cpi_lab: command-line front end for the tabular offline-RL laboratory.
//
//   cpi_lab collect    --env grid7x7 --behavior inferior --n 10000 --cap 30
//   cpi_lab oracle     --env fourroom [--dataset FILE] [--strict]
//   cpi_lab run        --config spec.json | --env ... --algo cpi,br --tau 0.05,1
//   cpi_lab percentile [--config spec.json] [--fraction 0.05]
//   cpi_lab check      [--trials 100] [--inject-bug kl-sign]
//
// Exit codes: 0 success, 1 run or check failure, 2 usage error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "cpi/experiment.hpp"

namespace fs = std::filesystem;
using namespace cpi;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  std::string config;
};

struct RecipeFlags {
  std::string behavior;
  std::optional<std::size_t> n;
  std::optional<std::size_t> cap;
  std::string restart;
  std::optional<double> expert_fraction;
  std::string mix_with;
  std::vector<std::string> filters;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--behavior", behavior, "inferior | uniform | expert | mixed");
    cmd->add_option("--n", n, "transitions to collect");
    cmd->add_option("--cap", cap, "episode step cap");
    cmd->add_option("--restart", restart, "fixed | random");
    cmd->add_option("--expert-fraction", expert_fraction, "mixed: expert share");
    cmd->add_option("--mix-with", mix_with, "mixed: the non-expert behavior");
    cmd->add_option("--filter", filters,
                    "missing-action:<region>:<action> or percentile:<band>:<fraction>");
  }

  void apply(exp::DatasetRecipe& r) const {
    if (!behavior.empty()) r.behavior = behavior;
    if (n) r.n = *n;
    if (cap) r.cap = *cap;
    if (!restart.empty()) r.restart = restart;
    if (expert_fraction) r.expert_fraction = *expert_fraction;
    if (!mix_with.empty()) r.mix_with = mix_with;
    if (!filters.empty()) r.filters = filters;
  }
};

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw exp::UsageError("cannot read config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw exp::UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

void print_return_stats(const data::Dataset& ds) {
  const auto summaries = ds.summaries();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double acc = 0.0;
  for (const auto& t : summaries) {
    lo = std::min(lo, t.undiscounted_return);
    hi = std::max(hi, t.undiscounted_return);
    acc += t.undiscounted_return;
  }
  std::cout << "transitions " << ds.size() << ", trajectories " << summaries.size();
  if (!summaries.empty()) {
    std::cout << ", return mean " << exp::format_double(acc / static_cast<double>(summaries.size()))
              << " min " << exp::format_double(lo) << " max " << exp::format_double(hi);
  }
  std::cout << '\n';
}

// ---------------------------------------------------------------------------

struct CollectCmd {
  std::string env = "grid7x7";
  double discount = 0.9;
  std::string name = "dataset";
  bool csv = false;
  RecipeFlags recipe;

  int run(const Globals& g) const {
    const exp::Environment e = exp::resolve_environment(env, discount);
    exp::DatasetRecipe r;
    recipe.apply(r);
    r.seed = g.seed.value_or(0);
    const data::Dataset ds = exp::build_dataset(e, r, r.seed);
    const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
    exp::ensure_directory(dir);
    const fs::path path = dir / (name + ".jsonl");
    data::write_jsonl(ds, e.mdp.n_states(), e.mdp.n_actions(), path.string());
    if (csv) {
      std::ofstream out(dir / (name + ".csv"), std::ios::binary);
      data::write_csv(ds, out);
    }
    std::cout << "wrote " << path.string() << '\n';
    print_return_stats(ds);
    return kExitOk;
  }
};

struct OracleCmd {
  std::string env = "grid7x7";
  double discount = 0.9;
  std::string dataset;
  bool strict = false;

  int run(const Globals& g) const {
    const exp::Environment e = exp::resolve_environment(env, discount);
    std::optional<data::Dataset> ds;
    if (!dataset.empty()) {
      if (!fs::exists(dataset)) throw exp::UsageError("dataset '" + dataset + "' not found");
      auto loaded = data::read_jsonl(dataset);
      if (loaded.n_states != e.mdp.n_states() || loaded.n_actions != e.mdp.n_actions()) {
        throw exp::UsageError("dataset shape does not match environment '" + env + "'");
      }
      ds = std::move(loaded.dataset);
    }
    const exp::OracleReport report = exp::oracle_report(e, ds ? &*ds : nullptr, strict);
    const auto& v = report.values;
    std::cout << "env " << report.env_id << " (shortest path " << report.optimal_path_length
              << " moves)\n"
              << "full-support oracle: V*(start) " << exp::format_double(v.value_full)
              << ", greedy return " << exp::format_double(v.return_full) << '\n'
              << "in-sample oracle:    V*(start) " << exp::format_double(v.value_in_sample)
              << ", greedy return " << exp::format_double(v.return_in_sample) << '\n';
    if (report.has_dataset) {
      std::cout << "supported pairs " << report.supported_pairs << ", unvisited states "
                << report.unvisited_states.size() << '\n';
    }
    const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
    exp::ensure_directory(dir);
    std::ofstream out(dir / "oracle.json", std::ios::binary);
    out << exp::to_json(report).dump(2) << '\n';
    return kExitOk;
  }
};

struct RunCmd {
  std::string env;
  std::optional<double> discount;
  std::string dataset_file;
  RecipeFlags recipe;
  std::vector<std::string> algorithms;
  std::vector<double> taus;
  std::vector<double> lambdas;
  std::optional<std::size_t> iterations;
  std::vector<std::uint64_t> seeds;
  std::string eval_mode;
  std::string br_mode;
  std::optional<std::size_t> eval_episodes;

  int run(const Globals& g) const {
    exp::ExperimentSpec spec;
    if (!g.config.empty()) spec = read_json_file(g.config).get<exp::ExperimentSpec>();
    if (!env.empty()) spec.env = env;
    if (discount) spec.discount = *discount;
    if (!dataset_file.empty()) spec.dataset_file = dataset_file;
    recipe.apply(spec.dataset);
    if (g.seed) spec.dataset.seed = *g.seed;
    if (!algorithms.empty()) spec.algorithms = algorithms;
    if (!taus.empty()) spec.taus = taus;
    if (!lambdas.empty()) spec.lambdas = lambdas;
    if (iterations) spec.iterations = *iterations;
    if (!seeds.empty()) spec.seeds = seeds;
    if (!eval_mode.empty()) spec.eval_mode = eval_mode;
    if (!br_mode.empty()) spec.br_mode = br_mode;
    if (eval_episodes) spec.eval_episodes = *eval_episodes;
    if (!g.out.empty()) spec.out = g.out;
    spec.validate();

    const exp::GridResult result = exp::run_grid(spec, g.jobs, &std::cerr);
    std::cout << "spec_hash " << result.spec_hash << ": " << result.runs.size() << " runs, "
              << result.failures() << " failed; outputs in " << spec.out << '\n';
    return result.failures() == 0 ? kExitOk : kExitFailure;
  }
};

struct PercentileCmd {
  std::string env;
  RecipeFlags recipe;
  std::optional<double> fraction;
  std::optional<double> tau;
  std::optional<std::size_t> iterations;
  std::vector<std::uint64_t> seeds;

  int run(const Globals& g) const {
    exp::PercentileSpec spec;
    if (!g.config.empty()) spec = read_json_file(g.config).get<exp::PercentileSpec>();
    if (!env.empty()) spec.env = env;
    recipe.apply(spec.dataset);
    if (g.seed) spec.dataset.seed = *g.seed;
    if (fraction) spec.fraction = *fraction;
    if (tau) spec.tau = *tau;
    if (iterations) spec.iterations = *iterations;
    if (!seeds.empty()) spec.seeds = seeds;
    if (!g.out.empty()) spec.out = g.out;

    const exp::PercentileResult result = exp::run_percentile(spec);
    std::cout << "desk-scale analog (tabular BR in place of TD3+BC), fraction "
              << exp::format_double(spec.fraction) << ", " << spec.seeds.size() << " seeds\n";
    for (data::Band band : {data::Band::kTop, data::Band::kMedian, data::Band::kBottom}) {
      std::cout << "  " << data::to_string(band) << ": clone "
                << exp::format_double(result.mean(band, false)) << ", BR "
                << exp::format_double(result.mean(band, true)) << '\n';
    }
    std::cout << "outputs in " << spec.out << '\n';
    return kExitOk;
  }
};

struct CheckCmd {
  std::size_t trials = 100;
  std::size_t bound_trials = 50;
  std::size_t horizon = 500;
  std::size_t softmax_trials = 200;
  std::string inject_bug;

  int run(const Globals& g) const {
    exp::CheckSpec spec;
    spec.improvement.n_trials = trials;
    spec.bound.n_trials = bound_trials;
    spec.bound.horizon = horizon;
    spec.softmax.n_trials = softmax_trials;
    if (g.seed) {
      spec.improvement.seed = derive_seed(*g.seed, 1);
      spec.bound.seed = derive_seed(*g.seed, 2);
      spec.softmax.seed = derive_seed(*g.seed, 3);
    }
    if (!inject_bug.empty()) {
      if (inject_bug != "kl-sign") throw exp::UsageError("unknown bug '" + inject_bug + "'");
      spec.improvement.flip_kl_sign = true;
    }
    if (horizon == 0 && bound_trials > 0) throw exp::UsageError("horizon must be positive");

    const exp::CheckResult r = exp::run_checks(spec);
    if (r.vacuous) std::cerr << "warning: all trial counts are zero; the check passes vacuously\n";
    std::cout << "improvement/support: " << r.improvement.cases << " cases, "
              << r.improvement.improvement_violations << " improvement and "
              << r.improvement.support_violations << " support violations\n";
    for (const auto& v : r.improvement.violations) {
      std::cout << "  counterexample: trial " << v.trial << " seed " << v.seed << " tau "
                << exp::format_double(v.tau) << ' ' << v.kind << " at state " << v.state
                << " (" << exp::format_double(v.amount) << ")\n";
    }
    std::size_t bound_failures = 0;
    for (const auto& t : r.bound.trials) {
      if (!t.satisfied()) {
        ++bound_failures;
        std::cout << "  bound violated: seed " << t.spec.seed << " worst slack "
                  << exp::format_double(t.worst_slack()) << '\n';
      }
    }
    std::cout << "gap bound: " << r.bound.trials.size() << " trials, " << bound_failures
              << " violated\n"
              << "softmax optimality: " << r.softmax.trials << " trials, "
              << r.softmax.closed_form_failures + r.softmax.dominated_failures << " failures\n";

    const fs::path dir = g.out.empty() ? fs::path(".") : fs::path(g.out);
    exp::ensure_directory(dir);
    std::ofstream out(dir / "check_report.json", std::ios::binary);
    out << r.to_json().dump(2) << '\n';
    std::cout << (r.passed() ? "PASS" : "FAIL") << '\n';
    return r.passed() ? kExitOk : kExitFailure;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tabular conservative policy iteration laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // subcommands inherit it, so global flags may follow them
  Globals g;
  app.add_option("--seed", g.seed, "base seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--jobs", g.jobs, "worker threads for run grids")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON spec file (run, percentile)");

  CollectCmd collect;
  auto* c = app.add_subcommand("collect", "collect an offline dataset");
  c->add_option("--env", collect.env, "grid7x7 | fourroom | spec file");
  c->add_option("--discount", collect.discount);
  c->add_option("--name", collect.name, "file stem inside --out");
  c->add_flag("--csv", collect.csv, "also write a CSV export");
  collect.recipe.add_to(c);

  OracleCmd oracle;
  auto* o = app.add_subcommand("oracle", "full-support and in-sample optimal values");
  o->add_option("--env", oracle.env);
  o->add_option("--discount", oracle.discount);
  o->add_option("--dataset", oracle.dataset, "JSONL dataset for the in-sample oracle");
  o->add_flag("--strict", oracle.strict, "fail on bootstrapping into unvisited states");

  RunCmd run;
  auto* r = app.add_subcommand("run", "run an experiment grid");
  r->add_option("--env", run.env);
  r->add_option("--discount", run.discount);
  r->add_option("--dataset", run.dataset_file, "train on this JSONL file for every seed");
  run.recipe.add_to(r);
  r->add_option("--algo", run.algorithms, "cpi, br, cpi-re")->delimiter(',');
  r->add_option("--tau", run.taus, "tau grid")->delimiter(',');
  r->add_option("--lambda", run.lambdas, "lambda grid")->delimiter(',');
  r->add_option("--iterations", run.iterations);
  r->add_option("--seeds", run.seeds, "seed list")->delimiter(',');
  r->add_option("--eval-mode", run.eval_mode, "exact | fitted | fitted-bootstrap");
  r->add_option("--br-mode", run.br_mode, "multi-step | one-step");
  r->add_option("--eval-episodes", run.eval_episodes);

  PercentileCmd pct;
  auto* p = app.add_subcommand("percentile", "percentile-clone reference study");
  p->add_option("--env", pct.env);
  pct.recipe.add_to(p);
  p->add_option("--fraction", pct.fraction);
  p->add_option("--tau", pct.tau);
  p->add_option("--iterations", pct.iterations);
  p->add_option("--seeds", pct.seeds)->delimiter(',');

  CheckCmd check;
  auto* k = app.add_subcommand("check", "randomized theory checks");
  k->add_option("--trials", check.trials, "improvement/support trials");
  k->add_option("--bound-trials", check.bound_trials);
  k->add_option("--horizon", check.horizon);
  k->add_option("--softmax-trials", check.softmax_trials);
  k->add_option("--inject-bug", check.inject_bug, "kl-sign (mutation test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (!g.config.empty() && !r->parsed() && !p->parsed()) {
      throw exp::UsageError("--config applies to run and percentile only");
    }
    if (c->parsed()) return collect.run(g);
    if (o->parsed()) return oracle.run(g);
    if (r->parsed()) return run.run(g);
    if (p->parsed()) return pct.run(g);
    if (k->parsed()) return check.run(g);
  } catch (const exp::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidSpec& e) {
    std::cerr << "invalid spec: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DegenerateSupport& e) {
    std::cerr << "degenerate support: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
