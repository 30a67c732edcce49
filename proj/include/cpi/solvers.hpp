#pragma once

// KL-regularized policy updates and the iteration schemes built on them.
//
//   conservative_step: pi'(a|s) ∝ ref(a|s) exp(q(s,a) / tau)
//   mixed_step:        pi'(a|s) ∝ ref^lambda data^(1-lambda) exp(q / tau)
//   forward_kl_step:   argmin_pi KL(pi* || pi), pi* the conservative target
//
// CPI refines the reference every iteration (ref = previous iterate), BR keeps
// it frozen at the behavior estimate, CPI-RE runs two members and lets the
// better-valued one serve as the shared reference state by state.

#include <cstddef>
#include <cstdint>
#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "cpi/mdp.hpp"
#include "cpi/offline_data.hpp"

namespace cpi::solvers {

// ---------------------------------------------------------------------------
// Update rules

Policy conservative_step(const QTable& q, const Policy& ref, double tau);

Policy mixed_step(const QTable& q, const Policy& ref, const Policy& data_policy,
                  double tau, double lambda);

Policy forward_kl_step(const QTable& q, const Policy& ref, double tau);

// ---------------------------------------------------------------------------
// Configuration and results

enum class EvalMode {
  kExact,            // exact evaluation on the true MDP
  kFitted,           // exact evaluation on the empirical MDP of the dataset
  kFittedBootstrap,  // as kFitted, on a fresh bootstrap resample every iteration
};

enum class BrMode {
  kMultiStep,  // re-evaluate Q^{pi_t} every iteration
  kOneStep,    // evaluate Q^{pi_D} once
};

std::optional<EvalMode> parse_eval_mode(const std::string& name);
std::string to_string(EvalMode mode);

struct SolverConfig {
  double tau = 1.0;
  double lambda = 1.0;
  std::size_t iterations = 200;
  EvalMode eval_mode = EvalMode::kFitted;
  double eval_tol = 1e-10;
  std::uint64_t rng_seed = 0;
  bool ensemble = false;
  BrMode br_mode = BrMode::kMultiStep;
  std::size_t eval_episodes = 20;  // greedy rollouts per record; 0 skips them
  std::size_t episode_cap = 30;

  /// Throws InvalidArgument unless tau > 0, lambda in [0, 1], eval_tol > 0.
  void validate() const;
};

void to_json(nlohmann::json& j, const SolverConfig& c);
void from_json(const nlohmann::json& j, SolverConfig& c);

struct CurveRecord {
  std::size_t iteration = 0;
  /// Mean undiscounted return of greedy rollouts on the true MDP.
  double return_undiscounted = 0.0;
  /// V(start) of the greedy policy of pi_t on the evaluation model.
  double value_start_discounted = 0.0;
  /// max |pi_t - pi_{t-1}|; 0 at iteration 0.
  double policy_delta = 0.0;
  /// V*_D(start) minus value_start_discounted.
  std::optional<double> oracle_gap;
};

struct LearningCurve {
  std::vector<CurveRecord> records;

  static constexpr const char* kCsvHeader =
      "iteration,return_undiscounted,value_start_discounted,policy_delta,oracle_gap";
  /// One row per record; oracle_gap is empty when unknown.
  void write_csv(std::ostream& out) const;
};

struct RunResult {
  Policy policy;
  LearningCurve curve;
};

// ---------------------------------------------------------------------------
// Problems

/// Everything a solver may look at: the true environment (rollouts, exact
/// mode), the evaluation model, the behavior estimate and its support, and the
/// dataset itself for bootstrap mode.
class Problem {
 public:
  Problem(TabularMdp env, TabularMdp model, Policy data_policy,
          std::optional<data::Dataset> dataset = std::nullopt);

  /// Offline problem: behavior estimate (uniform on unvisited states), its
  /// support and the empirical MDP, all from `dataset`.
  static Problem from_dataset(const TabularMdp& env, const data::Dataset& dataset,
                              const data::EmpiricalModelOptions& model_options = {});

  /// Planning problem on a known MDP starting from `initial` (used as pi_D).
  static Problem from_mdp(const TabularMdp& env, const Policy& initial);

  const TabularMdp& env() const { return env_; }
  const TabularMdp& model() const { return model_; }
  const Policy& data_policy() const { return data_policy_; }
  /// Pairs observed in the dataset, or the support of data_policy when there
  /// is no dataset. Unvisited states have empty rows even though data_policy
  /// is uniform there.
  const SupportMask& support() const { return support_; }
  const std::optional<data::Dataset>& dataset() const { return dataset_; }

  /// The model a solver evaluates on under `mode` (bootstrap excluded).
  const TabularMdp& eval_model(EvalMode mode) const;

  /// In-sample optimal value at the start state of the evaluation model
  /// (computed at construction).
  double oracle_value(EvalMode mode) const;

 private:
  TabularMdp env_;
  TabularMdp model_;
  Policy data_policy_;
  SupportMask support_;
  std::optional<data::Dataset> dataset_;
  double oracle_env_ = 0.0;
  double oracle_model_ = 0.0;
};

/// Called once per iteration t = 0..iterations with the iterate and its
/// evaluation (for CPI-RE: the selected member).
using IterationObserver =
    std::function<void(std::size_t t, const Policy& policy, const Evaluation& eval)>;

RunResult run_cpi(const Problem& problem, const SolverConfig& config,
                  const IterationObserver& observer = {});

RunResult run_br(const Problem& problem, const SolverConfig& config,
                 const IterationObserver& observer = {});

struct EnsembleOptions {
  enum class SecondInit { kUniformOnSupport, kDataPolicy };
  SecondInit second_init = SecondInit::kUniformOnSupport;
  /// Replaces the second member and keeps it fixed (never updated).
  std::optional<Policy> frozen_second;
};

/// Requires eval_mode kFitted or kFittedBootstrap.
RunResult run_cpi_re(const Problem& problem, const SolverConfig& config,
                     const EnsembleOptions& options = {});

/// Exact policy evaluation on an empirical model.
QTable fitted_q_evaluation(const TabularMdp& empirical_mdp, const Policy& policy,
                           double tol);

/// Uniform over the allowed actions of each state (all actions where a row
/// is empty).
Policy uniform_on_support(const SupportMask& support);

}  // namespace cpi::solvers
