#pragma once

// Finite MDPs, stochastic policies and the exact dynamic-programming kernels
// (policy evaluation, value iteration, in-sample value iteration, greedy
// extraction, rollouts).
//
// Storage is dense and row-major:
//   transition[(s * n_actions + a) * n_states + s']
//   reward[s * n_actions + a], policy[s * n_actions + a], q[s * n_actions + a]

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cpi {

using StateIndex = std::size_t;
using ActionIndex = std::size_t;

// ---------------------------------------------------------------------------
// Errors

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A fixed-point solver exceeded its iteration cap or produced non-finite
/// values.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A state that must choose an action has no admissible one.
class DegenerateSupport : public std::runtime_error {
 public:
  DegenerateSupport(StateIndex state, const std::string& what)
      : std::runtime_error(what + " (state " + std::to_string(state) + ")"),
        state_(state) {}
  StateIndex state() const { return state_; }

 private:
  StateIndex state_;
};

// ---------------------------------------------------------------------------
// Types

class TabularMdp {
 public:
  static constexpr double kRowTolerance = 1e-12;

  /// Validates every invariant: row-stochastic transitions, absorbing
  /// zero-reward terminals, discount in [0, 1), start in range.
  TabularMdp(std::size_t n_states, std::size_t n_actions,
             std::vector<double> transition, std::vector<double> reward,
             double discount, std::vector<std::uint8_t> terminal_mask,
             StateIndex start_state);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  double discount() const { return discount_; }
  StateIndex start_state() const { return start_state_; }
  bool is_terminal(StateIndex s) const { return terminal_[s] != 0; }
  std::span<const std::uint8_t> terminal_mask() const { return terminal_; }

  std::span<const double> transition_row(StateIndex s, ActionIndex a) const {
    return {transition_.data() + (s * n_actions_ + a) * n_states_, n_states_};
  }
  double reward(StateIndex s, ActionIndex a) const {
    return reward_[s * n_actions_ + a];
  }
  std::span<const double> rewards() const { return reward_; }
  std::span<const double> transitions() const { return transition_; }

  /// (min, max) over all reward entries.
  std::pair<double, double> reward_range() const;
  /// max |r(s, a)|; the sup-norm of one Bellman backup of the zero vector.
  double reward_sup() const;

  /// Copy with a different start state.
  TabularMdp with_start(StateIndex start) const;

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> transition_;
  std::vector<double> reward_;
  double discount_;
  std::vector<std::uint8_t> terminal_;
  StateIndex start_state_;
};

/// Per-state distribution over actions.
class Policy {
 public:
  static constexpr double kRowTolerance = 1e-12;

  Policy(std::size_t n_states, std::size_t n_actions, std::vector<double> probs);

  static Policy uniform(std::size_t n_states, std::size_t n_actions);
  /// One-hot rows at the given actions.
  static Policy deterministic(std::span<const ActionIndex> actions,
                              std::size_t n_actions);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::span<const double> row(StateIndex s) const {
    return {probs_.data() + s * n_actions_, n_actions_};
  }
  double operator()(StateIndex s, ActionIndex a) const {
    return probs_[s * n_actions_ + a];
  }
  std::span<const double> probs() const { return probs_; }

  /// Highest-probability action; ties go to the lowest index.
  ActionIndex greedy_action(StateIndex s) const;

  /// max over (s, a) of |this - other|.
  double max_abs_diff(const Policy& other) const;

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<double> probs_;
};

struct QTable {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> values;
  double discount = 0.0;

  double operator()(StateIndex s, ActionIndex a) const {
    return values[s * n_actions + a];
  }
  std::span<const double> row(StateIndex s) const {
    return {values.data() + s * n_actions, n_actions};
  }
};

struct VTable {
  std::vector<double> values;
  double discount = 0.0;

  double operator()(StateIndex s) const { return values[s]; }
};

/// Admissible (state, action) pairs. States whose row is empty are the
/// "unvisited" states of a dataset.
class SupportMask {
 public:
  SupportMask(std::size_t n_states, std::size_t n_actions,
              std::vector<std::uint8_t> allowed);

  static SupportMask full(std::size_t n_states, std::size_t n_actions);
  /// allowed(s, a) iff policy(s, a) > 0.
  static SupportMask of_policy(const Policy& policy);

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  bool allowed(StateIndex s, ActionIndex a) const {
    return allowed_[s * n_actions_ + a] != 0;
  }
  bool any(StateIndex s) const;
  bool unvisited(StateIndex s) const { return !any(s); }
  std::vector<StateIndex> unvisited_states() const;
  std::size_t count() const;
  std::span<const std::uint8_t> raw() const { return allowed_; }

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<std::uint8_t> allowed_;
};

struct Evaluation {
  QTable q;
  VTable v;
  std::size_t sweeps = 0;
};

struct OptimalSolution {
  QTable q;
  VTable v;
  Policy policy;
  std::size_t sweeps = 0;
};

// ---------------------------------------------------------------------------
// Dynamic programming

/// Sweep budget for a gamma-contraction started at zero:
/// ceil(log(tol (1 - gamma) / r_sup) / log gamma) + 100.
std::size_t iteration_cap(double discount, double tol, double reward_sup);

/// V^pi by Jacobi sweeps on (P^pi, r^pi), stopped once successive iterates
/// differ by at most tol in max-norm. Q = r + gamma P V.
Evaluation exact_policy_evaluation(const TabularMdp& mdp, const Policy& policy,
                                   double tol);

/// Solves the Bellman optimality equation; the policy is greedy in Q* with
/// lowest-index tie-breaking.
OptimalSolution value_iteration(const TabularMdp& mdp, double tol);

enum class UnvisitedHandling {
  kPessimistic,  // unvisited non-terminal states are worth a fixed floor
  kError,        // bootstrapping into an unvisited state throws
};

struct InSampleOptions {
  UnvisitedHandling unvisited = UnvisitedHandling::kPessimistic;
  /// Floor for unvisited states; defaults to r_min / (1 - gamma).
  std::optional<double> pessimistic_value;
};

/// Solves V(s) = max over allowed a of r(s, a) + gamma E[V(s')].
/// Terminal states are pinned to 0. Unvisited states get the pessimistic floor
/// and, in the returned policy, the unrestricted greedy action of Q.
OptimalSolution in_sample_value_iteration(const TabularMdp& mdp,
                                          const SupportMask& support, double tol,
                                          const InSampleOptions& options = {});

/// Deterministic policy picking argmax_a q(s, a) over the allowed set, lowest
/// index on ties. Throws DegenerateSupport for a state with no allowed action.
Policy greedy_policy(const QTable& q,
                     const std::optional<SupportMask>& support = std::nullopt);

// ---------------------------------------------------------------------------
// Rollouts

enum class RolloutMode { kGreedy, kStochastic };

struct RolloutResult {
  double undiscounted_return = 0.0;
  double discounted_return = 0.0;
  std::size_t steps = 0;
};

/// Simulates one episode until terminal entry or `cap` steps.
RolloutResult rollout_return(const TabularMdp& mdp, const Policy& policy,
                             StateIndex start, std::size_t cap,
                             std::uint64_t rng_seed, RolloutMode mode);

/// Mean over `episodes` independent rollouts seeded from `rng_seed`.
RolloutResult mean_rollout_return(const TabularMdp& mdp, const Policy& policy,
                                  StateIndex start, std::size_t cap,
                                  std::size_t episodes, std::uint64_t rng_seed,
                                  RolloutMode mode);

void check_shape(const TabularMdp& mdp, const Policy& policy);

}  // namespace cpi
