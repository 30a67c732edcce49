#pragma once

// Randomized executable checks of the guarantees behind the conservative
// update: one-step improvement with support preservation, the O(1/sqrt(t))
// gap to the in-sample optimum, and optimality of the entropy-regularized
// softmax.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "cpi/mdp.hpp"
#include "cpi/rng.hpp"

namespace cpi::theory {

struct RandomMdpSpec {
  std::size_t n_states = 10;
  std::size_t n_actions = 3;
  /// Fraction of next states with positive probability in each row, in (0, 1].
  double sparsity = 0.5;
  double reward_min = 0.0;
  double reward_max = 1.0;
  double discount = 0.9;
  std::uint64_t seed = 0;
};

/// No terminal states; start state 0.
TabularMdp random_mdp(const RandomMdpSpec& spec);

/// Random rows; each entry is zeroed with probability `zero_prob`, always
/// keeping at least one positive entry per row.
Policy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng,
                     double zero_prob);

/// Each pair kept with probability `keep_prob`, at least one per state.
SupportMask random_support(std::size_t n_states, std::size_t n_actions, Rng& rng,
                           double keep_prob);

/// Affine map of rewards onto [0, 1] (terminal rows stay at zero reward);
/// needed before feeding gridworlds to the bound check.
TabularMdp normalize_rewards(const TabularMdp& mdp);

// ---------------------------------------------------------------------------

struct Violation {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  double tau = 0.0;
  std::string kind;  // "improvement" or "support"
  StateIndex state = 0;
  double amount = 0.0;
};

struct ImprovementConfig {
  std::size_t n_trials = 100;
  std::size_t max_states = 20;
  std::size_t max_actions = 5;
  std::vector<double> tau_grid = {0.1, 1.0, 10.0};
  double discount = 0.9;
  double slack = 1e-9;
  double eval_tol = 1e-12;
  std::uint64_t seed = 1;
  /// Mutation hook: update with exp(-Q / tau) instead of exp(Q / tau).
  bool flip_kl_sign = false;
};

struct ImprovementReport {
  std::size_t trials = 0;
  std::size_t cases = 0;
  std::size_t improvement_violations = 0;
  std::size_t support_violations = 0;
  std::vector<Violation> violations;  // first few of each kind
  bool passed() const { return improvement_violations == 0 && support_violations == 0; }
};

ImprovementReport check_improvement_and_support(const ImprovementConfig& config);

// ---------------------------------------------------------------------------

enum class SupportKind { kFull, kRandom };

struct BoundRow {
  std::size_t t = 0;
  double gap = 0.0;    // max_s V*_D(s) - V^{pi_t}(s)
  double bound = 0.0;  // (1 / (1 - gamma)^2) sqrt(2 ln|A| / t)
  bool satisfied = false;
};

struct BoundReport {
  RandomMdpSpec spec;
  std::size_t horizon = 0;
  double tau = 0.0;  // (1 / (1 - gamma)) sqrt(T / (2 ln|A|))
  SupportKind support = SupportKind::kFull;
  std::vector<BoundRow> rows;  // t = 1..horizon
  bool satisfied() const;
  double worst_slack() const;  // min over t of bound - gap
};

/// Temperature of the mirror-descent schedule for horizon T.
double schedule_tau(double discount, std::size_t n_actions, std::size_t horizon);
double gap_bound(double discount, std::size_t n_actions, std::size_t t);

/// Exact CPI from the uniform policy on the support, on a random MDP with
/// rewards in [0, 1]; compares the gap to the in-sample optimum with the bound.
BoundReport check_gap_bound(const RandomMdpSpec& spec, std::size_t horizon,
                           SupportKind support, double eval_tol = 1e-10);

struct BoundSuiteConfig {
  std::size_t n_trials = 50;
  std::size_t max_states = 20;
  std::size_t max_actions = 5;
  double discount = 0.9;
  std::size_t horizon = 500;
  std::uint64_t seed = 2;
};

struct BoundSuiteReport {
  std::vector<BoundReport> trials;
  bool passed() const;
};

/// Alternates full and random supports across trials.
BoundSuiteReport check_gap_bound_suite(const BoundSuiteConfig& config);

// ---------------------------------------------------------------------------

/// tau log sum_a exp(q_a / tau), computed with a max shift.
double soft_max_value(std::span<const double> q, double tau);
/// pi . q + tau H(pi), with 0 log 0 = 0.
double entropy_objective(std::span<const double> pi, std::span<const double> q, double tau);

struct SoftmaxConfig {
  std::size_t n_trials = 200;
  std::size_t k_actions = 4;
  std::vector<double> tau_grid = {0.1, 1.0, 10.0};
  std::size_t competitors = 1000;
  double slack = 1e-9;
  std::uint64_t seed = 3;
};

struct SoftmaxReport {
  std::size_t trials = 0;
  std::size_t closed_form_failures = 0;  // |objective(softmax) - F| too large
  std::size_t dominated_failures = 0;    // a competitor beat F by more than slack
  double min_margin = 0.0;               // min over competitors of F - objective
  bool passed() const { return closed_form_failures == 0 && dominated_failures == 0; }
};

SoftmaxReport check_softmax_optimality(const SoftmaxConfig& config);

// ---------------------------------------------------------------------------

nlohmann::json to_json(const ImprovementReport& r);
nlohmann::json to_json(const BoundReport& r);
nlohmann::json to_json(const BoundSuiteReport& r);
nlohmann::json to_json(const SoftmaxReport& r);

}  // namespace cpi::theory
