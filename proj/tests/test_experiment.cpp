#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "cpi/experiment.hpp"

using namespace cpi;
using namespace cpi::exp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cpi_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int lab(const std::string& args) {
  const std::string cmd = std::string(CPI_LAB_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentSpec small_spec(const fs::path& out) {
  ExperimentSpec s;
  s.dataset.n = 2000;
  s.algorithms = {"cpi", "br"};
  s.taus = {0.5, 2.0};
  s.iterations = 6;
  s.seeds = {0, 1};
  s.eval_episodes = 2;
  s.out = out.string();
  return s;
}

}  // namespace

TEST_CASE("FNV-1a reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("spec hash ignores key order and the output directory") {
  const auto a = nlohmann::json::parse(R"({"env": "grid7x7", "taus": [1, 2], "out": "x"})");
  const auto b = nlohmann::json::parse(R"({"taus": [1, 2], "out": "y", "env": "grid7x7"})");
  const auto c = nlohmann::json::parse(R"({"taus": [1, 3], "env": "grid7x7"})");
  CHECK(spec_hash(a) == spec_hash(b));
  CHECK(spec_hash(a) != spec_hash(c));
  CHECK(spec_hash(a).size() == 16);
}

TEST_CASE("spec validation and JSON round trip") {
  ExperimentSpec s;
  s.validate();
  nlohmann::json j = s;
  const auto back = j.get<ExperimentSpec>();
  CHECK(nlohmann::json(back) == j);

  auto bad = s;
  SUBCASE("empty tau grid") { bad.taus.clear(); }
  SUBCASE("empty seeds") { bad.seeds.clear(); }
  SUBCASE("negative tau") { bad.taus = {-1.0}; }
  SUBCASE("lambda above one") { bad.lambdas = {1.5}; }
  SUBCASE("unknown algorithm") { bad.algorithms = {"sarsa"}; }
  SUBCASE("unknown environment") { bad.env = "mars"; }
  SUBCASE("cpi-re with exact evaluation") {
    bad.algorithms = {"cpi-re"};
    bad.eval_mode = "exact";
  }
  SUBCASE("unknown filter") { bad.dataset.filters = {"rot13"}; }
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("run stems and number formatting") {
  CHECK(RunKey{"cpi", 0.5, 1.0, 3}.stem() == "cpi_tau0.5_lambda1_seed3");
  CHECK(format_double(0.05) == "0.05");
  CHECK(format_double(2.0) == "2");
}

TEST_CASE("environments and filters") {
  const auto fr = resolve_environment("fourroom", 0.9);
  CHECK(fr.regions.size() == 5);
  CHECK(fr.region("all").states.size() == 104);
  CHECK(fr.restart_states.size() == 103);
  CHECK_THROWS_AS(fr.region("attic"), UsageError);
  const auto from_file = resolve_environment(std::string(CPI_DATA_DIR) + "/fourroom.json", 0.9);
  CHECK(from_file.mdp.n_states() == fr.mdp.n_states());

  DatasetRecipe r;
  r.behavior = "uniform";
  r.n = 3000;
  r.filters = {"missing-action:upper-left:down"};
  const auto d = build_dataset(fr, r, 5);
  const auto& room = fr.region("upper-left").states;
  for (const auto& t : d.transitions())
    CHECK_FALSE((t.a == envs::kDown && std::binary_search(room.begin(), room.end(), t.s)));
  CHECK(d.provenance()["recipe"]["behavior"] == "uniform");
  CHECK(build_dataset(fr, r, 5) == d);
}

TEST_CASE("run grid outputs") {
  const auto out = scratch("grid");
  const auto spec = small_spec(out);
  const auto result = run_grid(spec, 2);
  CHECK(result.runs.size() == 8);
  CHECK(result.failures() == 0);
  for (const auto& run : result.runs) {
    const auto text = slurp(out / run.curve_file);
    CHECK(text.rfind("# spec_hash=" + result.spec_hash + "\n", 0) == 0);
    REQUIRE(run.curve);
    CHECK(run.curve->records.size() == spec.iterations + 1);
  }
  // One aggregate row per (algorithm, tau, lambda, iteration).
  std::ifstream agg(out / "aggregate.csv");
  std::string line;
  std::size_t rows = 0;
  std::getline(agg, line);
  CHECK(line.rfind("# spec_hash=", 0) == 0);
  std::getline(agg, line);
  CHECK(line.rfind("algorithm,tau,lambda,iteration,n_seeds,", 0) == 0);
  while (std::getline(agg, line)) rows += !line.empty();
  CHECK(rows == 4 * (spec.iterations + 1));

  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  CHECK(manifest["spec_hash"] == result.spec_hash);
  CHECK(manifest["runs"].size() == 8);
  CHECK(fs::exists(out / "timing.log"));

  // Same spec, one worker: identical files apart from timing.
  const auto again = scratch("grid_serial");
  auto serial = spec;
  serial.out = again.string();
  const auto r2 = run_grid(serial, 1);
  CHECK(r2.spec_hash == result.spec_hash);
  for (const auto& run : result.runs) CHECK(slurp(out / run.curve_file) == slurp(again / run.curve_file));
  CHECK(slurp(out / "aggregate.csv") == slurp(again / "aggregate.csv"));
  fs::remove_all(out);
  fs::remove_all(again);
}

TEST_CASE("oracle report") {
  const auto env = resolve_environment("grid7x7", 0.9);
  const auto plain = oracle_report(env, nullptr, false);
  CHECK(plain.optimal_path_length == 12);
  CHECK(plain.values.return_full == 89.0);
  CHECK(plain.values.value_in_sample == plain.values.value_full);
  DatasetRecipe r;
  r.behavior = "expert";
  r.n = 24;
  const auto d = build_dataset(env, r, 0);
  const auto rep = oracle_report(env, &d, false);
  CHECK(rep.supported_pairs == 12);
  CHECK(rep.values.return_in_sample == 89.0);
  CHECK(rep.values.value_in_sample == doctest::Approx(rep.values.value_full).epsilon(1e-9));
  CHECK_NOTHROW(oracle_report(env, &d, true));  // the path never leaves its support
  // One step up from the start lands in a state with no observed action.
  const StateIndex s0 = env.mdp.start_state();
  const StateIndex s1 = envs::GridLayout(env.spec).state_of({5, 0}).value();
  const data::Dataset one({{s0, envs::kUp, -1.0, s1, false}}, {0});
  CHECK_THROWS_AS(oracle_report(env, &one, true), DegenerateSupport);
  // Everything but the start and the terminal.
  CHECK(oracle_report(env, &one, false).unvisited_states.size() == env.mdp.n_states() - 2);
  CHECK(to_json(rep)["has_dataset"] == true);
}

TEST_CASE("percentile study needs enough trajectories") {
  PercentileSpec s;
  s.dataset.n = 36;
  s.dataset.expert_fraction = 1.0;  // three expert trajectories
  s.fraction = 0.5;
  s.seeds = {0};
  s.iterations = 2;
  s.out = scratch("pct_small").string();
  CHECK_THROWS_AS(run_percentile(s), InvalidArgument);
  s.dataset.behavior = "uniform";
  CHECK_THROWS_AS(s.validate(), UsageError);
}

TEST_CASE("check runner flags vacuous runs") {
  CheckSpec spec;
  spec.improvement.n_trials = 0;
  spec.bound.n_trials = 0;
  spec.softmax.n_trials = 0;
  const auto r = run_checks(spec);
  CHECK(r.vacuous);
  CHECK(r.passed());
  CHECK(r.to_json()["vacuous"] == true);
}

TEST_CASE("command-line exit codes") {
  const auto out = scratch("cli");
  const std::string o = " --out " + out.string();
  CHECK(lab("") == 2);
  CHECK(lab("frobnicate") == 2);
  CHECK(lab("run --tau -1" + o) == 2);
  CHECK(lab("run --algo sarsa" + o) == 2);
  CHECK(lab("run --env mars" + o) == 2);
  CHECK(lab("collect --behavior telepathic" + o) == 2);
  CHECK(lab("check --trials 3 --bound-trials 1 --horizon 20 --softmax-trials 3" + o) == 0);
  CHECK(lab("check --trials 0 --bound-trials 0 --softmax-trials 0" + o) == 0);
  CHECK(lab("check --trials 10 --bound-trials 0 --softmax-trials 0 --inject-bug kl-sign" + o) ==
        1);
  CHECK(fs::exists(out / "check_report.json"));

  CHECK(lab("--seed 7 collect --n 500 --name d" + o) == 0);
  REQUIRE(fs::exists(out / "d.jsonl"));
  CHECK(lab("oracle --dataset " + (out / "d.jsonl").string() + o) == 0);
  CHECK(fs::exists(out / "oracle.json"));
  CHECK(lab("oracle --dataset " + (out / "missing.jsonl").string() + o) != 0);
  CHECK(lab("run --algo cpi,br --tau 1,2 --iterations 3 --seeds 0 --eval-episodes 1" + o) == 0);
  CHECK(fs::exists(out / "aggregate.csv"));
  CHECK(fs::exists(out / "runs" / "br_tau2_lambda1_seed0.csv"));

  // A config file, overridden from the command line.
  const auto cfg = out / "spec.json";
  std::ofstream(cfg) << R"({"algorithms": ["cpi"], "taus": [0.5], "iterations": 2, "seeds": [1],
                           "eval_episodes": 1, "dataset": {"n": 800}})";
  const auto out2 = out / "cfg";
  CHECK(lab("--config " + cfg.string() + " --out " + out2.string() + " run --tau 3") == 0);
  CHECK(fs::exists(out2 / "runs" / "cpi_tau3_lambda1_seed1.csv"));
  std::ofstream(out / "broken.json") << "{not json";
  CHECK(lab("--config " + (out / "broken.json").string() + " run" + o) == 2);
  fs::remove_all(out);
}

TEST_CASE("default 7x7 inferior data covers an optimal path") {
  const auto env = resolve_environment("grid7x7", 0.9);
  DatasetRecipe r;  // inferior, 10k transitions, cap 30, random restart
  const auto d = build_dataset(env, r, 7);
  const auto support = data::empirical_support(d, env.mdp.n_states(), env.mdp.n_actions());
  // Breadth-first search over observed (state, action) pairs only.
  std::vector<int> dist(env.mdp.n_states(), -1);
  std::vector<StateIndex> queue = {env.mdp.start_state()};
  dist[env.mdp.start_state()] = 0;
  int to_terminal = -1;
  for (std::size_t head = 0; head < queue.size(); ++head) {
    const StateIndex s = queue[head];
    if (env.mdp.is_terminal(s)) {
      to_terminal = dist[s];
      break;
    }
    for (ActionIndex a = 0; a < env.mdp.n_actions(); ++a) {
      if (!support.allowed(s, a)) continue;
      const auto row = env.mdp.transition_row(s, a);
      const auto t = static_cast<StateIndex>(std::max_element(row.begin(), row.end()) - row.begin());
      if (dist[t] < 0) {
        dist[t] = dist[s] + 1;
        queue.push_back(t);
      }
    }
  }
  CHECK(to_terminal == 12);
  const auto rep = oracle_report(env, &d, false);
  CHECK(rep.values.return_in_sample == rep.values.return_full);
}

TEST_CASE("top band of mixed data beats the dataset mean") {
  const auto env = resolve_environment("grid7x7", 0.9);
  DatasetRecipe r;
  r.behavior = "mixed";
  r.mix_with = "inferior";
  const auto d = build_dataset(env, r, 3);
  const auto top = data::percentile_filter(d, data::Band::kTop, 0.05);
  auto mean_return = [](const data::Dataset& x) {
    double acc = 0.0;
    for (const auto& s : x.summaries()) acc += s.undiscounted_return;
    return acc / static_cast<double>(x.trajectory_count());
  };
  CHECK(mean_return(top) >= mean_return(d));
}

TEST_CASE("bootstrap Q stays within r_span / (1 - gamma) of the fitted Q") {
  const auto env = resolve_environment("grid7x7", 0.9);
  DatasetRecipe r;
  r.n = 3000;
  const auto d = build_dataset(env, r, 1);
  const auto pi = data::empirical_behavior_policy(d, env.mdp.n_states(), env.mdp.n_actions());
  const auto q = exact_policy_evaluation(data::empirical_mdp(d, env.mdp), pi, 1e-10).q;
  const auto [lo, hi] = env.mdp.reward_range();
  const double bound = (hi - lo) / (1.0 - 0.9);
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b = data::bootstrap_resample(d, seed);
    const auto qb = exact_policy_evaluation(data::empirical_mdp(b, env.mdp), pi, 1e-10).q;
    for (std::size_t i = 0; i < q.values.size(); ++i)
      worst = std::max(worst, std::fabs(q.values[i] - qb.values[i]));
  }
  CHECK(worst <= bound);
}

TEST_CASE("shipped configs load and validate") {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(CPI_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_experiment_spec(entry.path().string()).validate());
    ++n;
  }
  CHECK(n >= 3);
}
