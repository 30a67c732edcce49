#pragma once

// Offline datasets: collection under a behavior policy, filtering, and the
// empirical quantities an offline learner is allowed to see (support,
// behavior-policy estimate, maximum-likelihood model).

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "cpi/mdp.hpp"

namespace cpi::data {

struct Transition {
  StateIndex s = 0;
  ActionIndex a = 0;
  double r = 0.0;
  StateIndex s_next = 0;
  bool done = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct TrajectorySummary {
  std::size_t start = 0;
  std::size_t length = 0;
  double undiscounted_return = 0.0;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<Transition> transitions,
          std::vector<std::size_t> trajectory_starts,
          nlohmann::json provenance = nlohmann::json::object());

  const std::vector<Transition>& transitions() const { return transitions_; }
  const std::vector<std::size_t>& trajectory_starts() const { return starts_; }
  const nlohmann::json& provenance() const { return provenance_; }
  nlohmann::json& provenance() { return provenance_; }

  std::size_t size() const { return transitions_.size(); }
  bool empty() const { return transitions_.empty(); }
  std::size_t trajectory_count() const { return starts_.size(); }
  std::span<const Transition> trajectory(std::size_t i) const;
  std::vector<TrajectorySummary> summaries() const;

  /// Checks index ranges against (n_states, n_actions) and, when an MDP is
  /// given, that done matches the terminal mask. Always checks boundary
  /// ordering and within-trajectory continuity.
  void validate(std::size_t n_states, std::size_t n_actions,
                const TabularMdp* mdp = nullptr) const;

  friend bool operator==(const Dataset& x, const Dataset& y) {
    return x.transitions_ == y.transitions_ && x.starts_ == y.starts_;
  }

 private:
  std::vector<Transition> transitions_;
  std::vector<std::size_t> starts_;
  nlohmann::json provenance_;
};

/// Appends b after a; provenance records both parts.
Dataset concat(const Dataset& a, const Dataset& b);

// ---------------------------------------------------------------------------
// Behavior policies and collection

enum class BehaviorKind { kInferior, kUniform, kExpert, kCustom };

/// Action probabilities (up, down, right, left) of the inferior behavior.
inline constexpr std::array<double, 4> kInferiorProbs = {0.1, 0.4, 0.1, 0.4};

std::optional<BehaviorKind> parse_behavior(const std::string& name);
std::string to_string(BehaviorKind kind);

/// inferior: kInferiorProbs at every state (requires 4 actions);
/// uniform: 1/|A|; expert: greedy in Q* of the true MDP;
/// custom: `custom_probs` (length |A|, sums to 1) at every state.
Policy make_behavior_policy(BehaviorKind kind, const TabularMdp& mdp,
                            std::span<const double> custom_probs = {});

enum class Restart { kFixedStart, kRandomRestart };

std::optional<Restart> parse_restart(const std::string& name);
std::string to_string(Restart restart);

/// Samples episodes (terminal entry or `episode_cap` steps) until at least
/// `n_transitions` are recorded, then truncates to exactly that many.
/// Random restart draws each episode start uniformly from `restart_states`
/// (default: all non-terminal states).
Dataset collect(const TabularMdp& mdp, const Policy& behavior,
                std::size_t n_transitions, std::size_t episode_cap,
                Restart restart, std::uint64_t rng_seed,
                std::span<const StateIndex> restart_states = {});

/// Sample of size() transitions drawn with replacement; every transition
/// becomes its own trajectory.
Dataset bootstrap_resample(const Dataset& dataset, std::uint64_t rng_seed);

// ---------------------------------------------------------------------------
// Filters

/// Drops every transition with s in `region` and a == action. A removal cuts
/// its trajectory in two.
Dataset missing_action_filter(const Dataset& dataset,
                              std::span<const StateIndex> region,
                              ActionIndex action);

enum class Band { kTop, kMedian, kBottom };

std::optional<Band> parse_band(const std::string& name);
std::string to_string(Band band);

/// Number of trajectories a band of `fraction` keeps out of `total`:
/// ceil(fraction * total).
std::size_t band_size(double fraction, std::size_t total);

/// Keeps ceil(fraction * K) trajectories ranked by undiscounted return
/// (descending, stable): the first ones (top), the last ones (bottom), or the
/// ones centred at rank floor(K / 2) (median). Kept trajectories appear in
/// their original order.
Dataset percentile_filter(const Dataset& dataset, Band band, double fraction);

// ---------------------------------------------------------------------------
// Empirical estimates

/// allowed(s, a) iff (s, a) occurs in the dataset.
SupportMask empirical_support(const Dataset& dataset, std::size_t n_states,
                              std::size_t n_actions);

enum class Smoothing {
  kNone,               // an unvisited state has no distribution
  kUniformOnUnvisited  // unvisited states get the uniform row
};

/// State-conditional action frequencies. Unvisited states either raise
/// DegenerateSupport (kNone) or get the uniform row.
class BehaviorEstimate {
 public:
  BehaviorEstimate(const Dataset& dataset, std::size_t n_states,
                   std::size_t n_actions);

  std::size_t visits(StateIndex s) const { return state_counts_[s]; }
  std::size_t count(StateIndex s, ActionIndex a) const {
    return counts_[s * n_actions_ + a];
  }
  double prob(StateIndex s, ActionIndex a, Smoothing smoothing) const;
  Policy policy(Smoothing smoothing) const;

 private:
  std::size_t n_states_;
  std::size_t n_actions_;
  std::vector<std::size_t> counts_;
  std::vector<std::size_t> state_counts_;
};

Policy empirical_behavior_policy(const Dataset& dataset, std::size_t n_states,
                                 std::size_t n_actions,
                                 Smoothing smoothing = Smoothing::kUniformOnUnvisited);

struct EmpiricalModelOptions {
  /// Reward of unobserved (s, a) self-loops; defaults to the template's r_min.
  std::optional<double> unobserved_reward;
};

/// Maximum-likelihood model: observed rows are next-state frequencies and
/// mean rewards; unobserved rows self-loop paying the pessimistic reward.
/// Discount, terminal mask and start come from `template_mdp`.
TabularMdp empirical_mdp(const Dataset& dataset, const TabularMdp& template_mdp,
                         const EmpiricalModelOptions& options = {});

// ---------------------------------------------------------------------------
// Files

/// JSON lines: a header object {"header": {...}} carrying provenance, shape
/// and trajectory_starts, then one {"s","a","r","s_next","done"} per line.
void write_jsonl(const Dataset& dataset, std::size_t n_states,
                 std::size_t n_actions, std::ostream& out);
void write_jsonl(const Dataset& dataset, std::size_t n_states,
                 std::size_t n_actions, const std::string& path);

struct LoadedDataset {
  Dataset dataset;
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
};

LoadedDataset read_jsonl(std::istream& in);
LoadedDataset read_jsonl(const std::string& path);

/// Columns s,a,r,s_next,done.
void write_csv(const Dataset& dataset, std::ostream& out);

}  // namespace cpi::data
