#pragma once

// Experiment plumbing behind the cpi_lab CLI: environment resolution, dataset
// recipes, the run grid with CSV/JSON outputs, oracle reports, the percentile
// reference study and the theory-check runner.
//
// Every output file carries the FNV-1a hash of the canonical spec JSON.
// Wall-clock timings only ever go to timing.log so that CSV and JSON outputs
// are byte-identical across repeated invocations.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "cpi/envs.hpp"
#include "cpi/mdp.hpp"
#include "cpi/offline_data.hpp"
#include "cpi/solvers.hpp"
#include "cpi/theory_checks.hpp"

namespace cpi::exp {

/// Bad spec or arguments; maps to exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Environments

struct Environment {
  std::string id;  // "grid7x7", "fourroom" or the spec file path
  envs::GridSpec spec;
  TabularMdp mdp;
  /// The four rooms when the layout has them, then "all".
  std::vector<envs::Region> regions;
  /// Open cells other than the goal.
  std::vector<StateIndex> restart_states;

  const envs::Region& region(const std::string& name) const;
};

/// "grid7x7", "fourroom", or a path to a GridSpec JSON file.
Environment resolve_environment(const std::string& id, double discount);

// ---------------------------------------------------------------------------
// Dataset recipes

struct DatasetRecipe {
  /// inferior | uniform | expert | mixed
  std::string behavior = "inferior";
  std::size_t n = 10000;
  std::size_t cap = 30;
  /// Empty: fixed for expert, random otherwise. For mixed, applies to the
  /// non-expert part (the expert part always starts at the task start).
  std::string restart;
  std::uint64_t seed = 0;
  /// mixed only: share of expert transitions and the other behavior.
  double expert_fraction = 0.5;
  std::string mix_with = "uniform";
  /// Applied in order: "missing-action:<region>:<action>",
  /// "percentile:<top|median|bottom>:<fraction>".
  std::vector<std::string> filters;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetRecipe& r);
void from_json(const nlohmann::json& j, DatasetRecipe& r);

/// Collects and filters; the recipe and seed end up in the provenance.
data::Dataset build_dataset(const Environment& env, const DatasetRecipe& recipe,
                            std::uint64_t seed);

/// Applies one filter string.
data::Dataset apply_filter(const Environment& env, const data::Dataset& dataset,
                           const std::string& filter);

// ---------------------------------------------------------------------------
// Run grid

struct ExperimentSpec {
  std::string env = "grid7x7";
  double discount = 0.9;
  DatasetRecipe dataset;
  /// When set, every seed trains on this file instead of the recipe.
  std::string dataset_file;
  std::vector<std::string> algorithms = {"cpi"};  // cpi | br | cpi-re
  std::vector<double> taus = {1.0};
  std::vector<double> lambdas = {1.0};
  std::size_t iterations = 200;
  std::vector<std::uint64_t> seeds = {0};
  std::string eval_mode = "fitted";
  std::string br_mode = "multi-step";
  std::size_t eval_episodes = 20;
  std::size_t episode_cap = 30;
  std::string out = "runs";

  /// Throws UsageError: empty grids, unknown names, missing files.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);
ExperimentSpec load_experiment_spec(const std::string& path);

/// 64-bit FNV-1a of the bytes.
std::uint64_t fnv1a64(const std::string& bytes);
/// Hex FNV-1a of the canonical (sorted-key, compact) JSON dump, ignoring a
/// top-level "out" key.
std::string spec_hash(const nlohmann::json& spec);

struct RunKey {
  std::string algorithm;
  double tau = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;

  /// e.g. "cpi_tau0.5_lambda1_seed3"
  std::string stem() const;
};

struct OracleValues {
  double value_full = 0.0;       // V*(start) on the true MDP
  double return_full = 0.0;      // its greedy undiscounted return
  double value_in_sample = 0.0;  // in-sample V*(start) on the true MDP
  double return_in_sample = 0.0;
};

struct RunRecord {
  RunKey key;
  std::string spec_hash;
  std::string curve_file;  // relative to the output directory
  std::optional<solvers::LearningCurve> curve;
  OracleValues oracle;
  std::optional<std::string> error;
  double wall_seconds = 0.0;  // timing.log only
};

struct GridResult {
  std::string spec_hash;
  std::vector<RunRecord> runs;
  std::size_t failures() const;
};

/// Runs algorithms x taus x lambdas x seeds on `jobs` worker threads and
/// writes runs/<stem>.csv, aggregate.csv, manifest.json and timing.log under
/// spec.out. Failed runs are recorded and skipped by the aggregate.
GridResult run_grid(const ExperimentSpec& spec, std::size_t jobs,
                    std::ostream* progress = nullptr);

/// Iterations x (algorithm, tau, lambda) rows with population mean/std over
/// seeds of every curve column.
void write_aggregate_csv(const GridResult& result, std::size_t iterations,
                         std::ostream& out);

// ---------------------------------------------------------------------------
// Oracle report

struct OracleReport {
  std::string env_id;
  OracleValues values;
  std::size_t optimal_path_length = 0;  // BFS moves start -> goal
  bool has_dataset = false;
  std::size_t supported_pairs = 0;
  std::vector<StateIndex> unvisited_states;
};

/// Without a dataset the in-sample columns repeat the full-support oracle.
/// With strict = true, bootstrapping into an unvisited state throws
/// DegenerateSupport instead of using the pessimistic floor.
OracleReport oracle_report(const Environment& env, const data::Dataset* dataset,
                           bool strict);

nlohmann::json to_json(const OracleReport& r);

/// Full-support and in-sample oracles for one dataset.
OracleValues compute_oracles(const TabularMdp& mdp, const SupportMask& support,
                             std::size_t episode_cap);

// ---------------------------------------------------------------------------
// Percentile reference study (tabular analog of return-filtered cloning
// versus behavior regularization with the same reference)

struct PercentileSpec {
  std::string env = "grid7x7";
  double discount = 0.9;
  DatasetRecipe dataset = [] {
    DatasetRecipe r;
    r.behavior = "mixed";
    r.mix_with = "inferior";
    r.expert_fraction = 0.5;
    return r;
  }();
  double fraction = 0.05;
  double tau = 1.0;
  std::size_t iterations = 100;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t eval_episodes = 20;
  std::size_t episode_cap = 30;
  std::string out = "percentile";

  void validate() const;
};

void to_json(nlohmann::json& j, const PercentileSpec& s);
void from_json(const nlohmann::json& j, PercentileSpec& s);

struct PercentileRow {
  std::uint64_t seed = 0;
  data::Band band = data::Band::kTop;
  std::size_t trajectories = 0;
  double band_mean_return = 0.0;  // mean trajectory return inside the band
  double clone_return = 0.0;      // greedy return of the band's clone
  double br_return = 0.0;         // BR with the clone as frozen reference
};

struct PercentileResult {
  std::string spec_hash;
  std::vector<PercentileRow> rows;  // seed-major, bands top/median/bottom

  double mean(data::Band band, bool br) const;
};

/// Writes percentile.csv (per seed) and percentile_summary.csv under spec.out.
/// Throws InvalidArgument when 2 ceil(f K) > K for a dataset.
PercentileResult run_percentile(const PercentileSpec& spec);

// ---------------------------------------------------------------------------
// Theory checks

struct CheckSpec {
  theory::ImprovementConfig improvement;
  theory::BoundSuiteConfig bound;
  theory::SoftmaxConfig softmax;
};

struct CheckResult {
  theory::ImprovementReport improvement;
  theory::BoundSuiteReport bound;
  theory::SoftmaxReport softmax;
  bool vacuous = false;  // every trial count was zero
  bool passed() const;
  nlohmann::json to_json() const;
};

CheckResult run_checks(const CheckSpec& spec);

// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form ("0.05", "1", "2.5").
std::string format_double(double x);

void ensure_directory(const std::filesystem::path& dir);

}  // namespace cpi::exp
