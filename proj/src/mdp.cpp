#include "cpi/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpi/kernels.hpp"
#include "cpi/rng.hpp"

namespace cpi {

namespace {

bool all_finite(std::span<const double> xs) {
  return std::all_of(xs.begin(), xs.end(),
                     [](double x) { return std::isfinite(x); });
}

void check_tol(double tol) {
  if (!(tol > 0.0)) throw InvalidArgument("tolerance must be positive");
}

// Q(s, a) = r(s, a) + gamma * P(s, a, .) . V
QTable backup_q(const TabularMdp& mdp, std::span<const double> v) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  QTable q{ns, na, std::vector<double>(ns * na), mdp.discount()};
  const auto& k = kernels::active();
  for (StateIndex s = 0; s < ns; ++s) {
    for (ActionIndex a = 0; a < na; ++a) {
      const auto row = mdp.transition_row(s, a);
      q.values[s * na + a] =
          mdp.reward(s, a) + mdp.discount() * k.dot(row.data(), v.data(), ns);
    }
  }
  return q;
}

ActionIndex argmax_allowed(std::span<const double> values,
                           const std::uint8_t* allowed) {
  ActionIndex best = values.size();
  for (ActionIndex a = 0; a < values.size(); ++a) {
    if (allowed != nullptr && allowed[a] == 0) continue;
    if (best == values.size() || values[a] > values[best]) best = a;
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// TabularMdp

TabularMdp::TabularMdp(std::size_t n_states, std::size_t n_actions,
                       std::vector<double> transition, std::vector<double> reward,
                       double discount, std::vector<std::uint8_t> terminal_mask,
                       StateIndex start_state)
    : n_states_(n_states),
      n_actions_(n_actions),
      transition_(std::move(transition)),
      reward_(std::move(reward)),
      discount_(discount),
      terminal_(std::move(terminal_mask)),
      start_state_(start_state) {
  if (n_states_ == 0 || n_actions_ == 0) {
    throw InvalidArgument("MDP needs at least one state and one action");
  }
  if (transition_.size() != n_states_ * n_actions_ * n_states_ ||
      reward_.size() != n_states_ * n_actions_ ||
      terminal_.size() != n_states_) {
    throw InvalidArgument("MDP tensor shapes do not match (n_states, n_actions)");
  }
  if (!(discount_ >= 0.0 && discount_ < 1.0)) {
    throw InvalidArgument("discount must lie in [0, 1)");
  }
  if (start_state_ >= n_states_) throw InvalidArgument("start state out of range");
  if (!all_finite(reward_)) throw InvalidArgument("rewards must be finite");
  for (StateIndex s = 0; s < n_states_; ++s) {
    for (ActionIndex a = 0; a < n_actions_; ++a) {
      const auto row = transition_row(s, a);
      double total = 0.0;
      for (double p : row) {
        if (!(p >= 0.0)) {
          throw InvalidArgument("negative or NaN transition probability at state " +
                                std::to_string(s));
        }
        total += p;
      }
      if (std::fabs(total - 1.0) > kRowTolerance) {
        throw InvalidArgument("transition row (" + std::to_string(s) + ", " +
                              std::to_string(a) + ") does not sum to 1");
      }
      if (terminal_[s] != 0 && (row[s] != 1.0 || reward_[s * n_actions_ + a] != 0.0)) {
        throw InvalidArgument("terminal state " + std::to_string(s) +
                              " must self-loop with zero reward");
      }
    }
  }
}

std::pair<double, double> TabularMdp::reward_range() const {
  const auto [lo, hi] = std::minmax_element(reward_.begin(), reward_.end());
  return {*lo, *hi};
}

double TabularMdp::reward_sup() const {
  double sup = 0.0;
  for (double r : reward_) sup = std::max(sup, std::fabs(r));
  return sup;
}

TabularMdp TabularMdp::with_start(StateIndex start) const {
  return TabularMdp(n_states_, n_actions_, transition_, reward_, discount_,
                    terminal_, start);
}

// ---------------------------------------------------------------------------
// Policy

Policy::Policy(std::size_t n_states, std::size_t n_actions,
               std::vector<double> probs)
    : n_states_(n_states), n_actions_(n_actions), probs_(std::move(probs)) {
  if (n_states_ == 0 || n_actions_ == 0) {
    throw InvalidArgument("policy needs at least one state and one action");
  }
  if (probs_.size() != n_states_ * n_actions_) {
    throw InvalidArgument("policy shape mismatch");
  }
  for (StateIndex s = 0; s < n_states_; ++s) {
    double total = 0.0;
    for (double p : row(s)) {
      if (!(p >= 0.0) || !std::isfinite(p)) {
        throw InvalidArgument("policy row " + std::to_string(s) +
                              " has a negative or non-finite entry");
      }
      total += p;
    }
    if (std::fabs(total - 1.0) > kRowTolerance) {
      throw InvalidArgument("policy row " + std::to_string(s) +
                            " does not sum to 1");
    }
  }
}

Policy Policy::uniform(std::size_t n_states, std::size_t n_actions) {
  return Policy(n_states, n_actions,
                std::vector<double>(n_states * n_actions,
                                    1.0 / static_cast<double>(n_actions)));
}

Policy Policy::deterministic(std::span<const ActionIndex> actions,
                             std::size_t n_actions) {
  std::vector<double> probs(actions.size() * n_actions, 0.0);
  for (StateIndex s = 0; s < actions.size(); ++s) {
    if (actions[s] >= n_actions) throw InvalidArgument("action out of range");
    probs[s * n_actions + actions[s]] = 1.0;
  }
  return Policy(actions.size(), n_actions, std::move(probs));
}

ActionIndex Policy::greedy_action(StateIndex s) const {
  return argmax_allowed(row(s), nullptr);
}

double Policy::max_abs_diff(const Policy& other) const {
  if (other.n_states_ != n_states_ || other.n_actions_ != n_actions_) {
    throw InvalidArgument("policy shapes differ");
  }
  return kernels::max_abs_diff(probs_, other.probs_);
}

// ---------------------------------------------------------------------------
// SupportMask

SupportMask::SupportMask(std::size_t n_states, std::size_t n_actions,
                         std::vector<std::uint8_t> allowed)
    : n_states_(n_states), n_actions_(n_actions), allowed_(std::move(allowed)) {
  if (allowed_.size() != n_states_ * n_actions_) {
    throw InvalidArgument("support mask shape mismatch");
  }
}

SupportMask SupportMask::full(std::size_t n_states, std::size_t n_actions) {
  return SupportMask(n_states, n_actions,
                     std::vector<std::uint8_t>(n_states * n_actions, 1));
}

SupportMask SupportMask::of_policy(const Policy& policy) {
  std::vector<std::uint8_t> allowed(policy.probs().size());
  std::transform(policy.probs().begin(), policy.probs().end(), allowed.begin(),
                 [](double p) -> std::uint8_t { return p > 0.0 ? 1 : 0; });
  return SupportMask(policy.n_states(), policy.n_actions(), std::move(allowed));
}

bool SupportMask::any(StateIndex s) const {
  const auto* first = allowed_.data() + s * n_actions_;
  return std::any_of(first, first + n_actions_,
                     [](std::uint8_t x) { return x != 0; });
}

std::vector<StateIndex> SupportMask::unvisited_states() const {
  std::vector<StateIndex> out;
  for (StateIndex s = 0; s < n_states_; ++s) {
    if (!any(s)) out.push_back(s);
  }
  return out;
}

std::size_t SupportMask::count() const {
  return static_cast<std::size_t>(
      std::count_if(allowed_.begin(), allowed_.end(),
                    [](std::uint8_t x) { return x != 0; }));
}

// ---------------------------------------------------------------------------
// Dynamic programming

std::size_t iteration_cap(double discount, double tol, double reward_sup) {
  constexpr std::size_t kMargin = 100;
  if (discount <= 0.0 || reward_sup <= 0.0) return 1 + kMargin;
  const double ratio = tol * (1.0 - discount) / reward_sup;
  if (ratio >= 1.0) return 1 + kMargin;
  const double sweeps = std::ceil(std::log(ratio) / std::log(discount));
  return static_cast<std::size_t>(sweeps) + kMargin;
}

void check_shape(const TabularMdp& mdp, const Policy& policy) {
  if (policy.n_states() != mdp.n_states() ||
      policy.n_actions() != mdp.n_actions()) {
    throw InvalidArgument("policy shape (" + std::to_string(policy.n_states()) +
                          "x" + std::to_string(policy.n_actions()) +
                          ") does not match MDP (" +
                          std::to_string(mdp.n_states()) + "x" +
                          std::to_string(mdp.n_actions()) + ")");
  }
}

Evaluation exact_policy_evaluation(const TabularMdp& mdp, const Policy& policy,
                                   double tol) {
  check_shape(mdp, policy);
  check_tol(tol);
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();

  // Collapse the action dimension: P^pi (ns x ns) and r^pi.
  std::vector<double> p_pi(ns * ns, 0.0);
  std::vector<double> r_pi(ns, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    double* out = p_pi.data() + s * ns;
    for (ActionIndex a = 0; a < na; ++a) {
      const double w = policy(s, a);
      if (w == 0.0) continue;
      r_pi[s] += w * mdp.reward(s, a);
      const auto row = mdp.transition_row(s, a);
      for (StateIndex t = 0; t < ns; ++t) out[t] += w * row[t];
    }
  }

  const auto& k = kernels::active();
  const std::size_t cap = iteration_cap(mdp.discount(), tol, mdp.reward_sup());
  std::vector<double> v(ns, 0.0);
  std::vector<double> next(ns, 0.0);
  std::size_t sweeps = 0;
  for (;;) {
    if (sweeps == cap) {
      throw NumericFailure("policy evaluation did not converge within " +
                           std::to_string(cap) + " sweeps");
    }
    k.affine_matvec(p_pi.data(), ns, ns, v.data(), r_pi.data(), mdp.discount(),
                    next.data());
    ++sweeps;
    const double residual = k.max_abs_diff(next.data(), v.data(), ns);
    v.swap(next);
    if (std::isnan(residual)) {
      throw NumericFailure("policy evaluation produced non-finite values");
    }
    if (residual <= tol) break;
  }

  Evaluation out{backup_q(mdp, v), VTable{std::move(v), mdp.discount()}, sweeps};
  return out;
}

namespace {

// Shared optimality sweep. A null support means every action is admissible.
OptimalSolution optimality_iteration(const TabularMdp& mdp,
                                     const SupportMask* support, double floor,
                                     double tol) {
  check_tol(tol);
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  const auto& k = kernels::active();

  auto admissible = [&](StateIndex s) {
    return support == nullptr ? true : support->any(s);
  };

  double sup = mdp.reward_sup();
  // Unvisited states start at the floor, which bounds the first increment.
  if (support != nullptr) sup += std::fabs(floor);
  const std::size_t cap = iteration_cap(mdp.discount(), tol, sup);

  std::vector<double> v(ns, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    if (!mdp.is_terminal(s) && !admissible(s)) v[s] = floor;
  }
  std::vector<double> next = v;
  std::size_t sweeps = 0;
  for (;;) {
    if (sweeps == cap) {
      throw NumericFailure("value iteration did not converge within " +
                           std::to_string(cap) + " sweeps");
    }
    for (StateIndex s = 0; s < ns; ++s) {
      if (mdp.is_terminal(s)) {
        next[s] = 0.0;
        continue;
      }
      if (!admissible(s)) {
        next[s] = floor;
        continue;
      }
      double best = -std::numeric_limits<double>::infinity();
      for (ActionIndex a = 0; a < na; ++a) {
        if (support != nullptr && !support->allowed(s, a)) continue;
        const auto row = mdp.transition_row(s, a);
        const double value =
            mdp.reward(s, a) + mdp.discount() * k.dot(row.data(), v.data(), ns);
        best = std::max(best, value);
      }
      next[s] = best;
    }
    ++sweeps;
    const double residual = k.max_abs_diff(next.data(), v.data(), ns);
    v.swap(next);
    if (std::isnan(residual)) {
      throw NumericFailure("value iteration produced non-finite values");
    }
    if (residual <= tol) break;
  }

  QTable q = backup_q(mdp, v);
  std::vector<ActionIndex> actions(ns, 0);
  for (StateIndex s = 0; s < ns; ++s) {
    const std::uint8_t* allowed =
        (support != nullptr && support->any(s))
            ? support->raw().data() + s * na
            : nullptr;
    actions[s] = argmax_allowed(q.row(s), allowed);
  }
  return OptimalSolution{std::move(q), VTable{std::move(v), mdp.discount()},
                         Policy::deterministic(actions, na), sweeps};
}

}  // namespace

OptimalSolution value_iteration(const TabularMdp& mdp, double tol) {
  return optimality_iteration(mdp, nullptr, 0.0, tol);
}

OptimalSolution in_sample_value_iteration(const TabularMdp& mdp,
                                          const SupportMask& support, double tol,
                                          const InSampleOptions& options) {
  if (support.n_states() != mdp.n_states() ||
      support.n_actions() != mdp.n_actions()) {
    throw InvalidArgument("support mask shape does not match MDP");
  }
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();

  if (options.unvisited == UnvisitedHandling::kError) {
    for (StateIndex s = 0; s < ns; ++s) {
      if (mdp.is_terminal(s) || !support.any(s)) continue;
      for (ActionIndex a = 0; a < na; ++a) {
        if (!support.allowed(s, a)) continue;
        const auto row = mdp.transition_row(s, a);
        for (StateIndex t = 0; t < ns; ++t) {
          if (row[t] > 0.0 && !mdp.is_terminal(t) && !support.any(t)) {
            throw DegenerateSupport(
                t, "in-sample backup bootstraps into a state with no observed action");
          }
        }
      }
    }
  }

  const double floor = options.pessimistic_value.value_or(
      mdp.reward_range().first / (1.0 - mdp.discount()));
  return optimality_iteration(mdp, &support, floor, tol);
}

Policy greedy_policy(const QTable& q, const std::optional<SupportMask>& support) {
  if (!all_finite(q.values)) throw InvalidArgument("Q table has non-finite entries");
  if (support && (support->n_states() != q.n_states ||
                  support->n_actions() != q.n_actions)) {
    throw InvalidArgument("support mask shape does not match Q table");
  }
  std::vector<ActionIndex> actions(q.n_states, 0);
  for (StateIndex s = 0; s < q.n_states; ++s) {
    const std::uint8_t* allowed =
        support ? support->raw().data() + s * q.n_actions : nullptr;
    const ActionIndex best = argmax_allowed(q.row(s), allowed);
    if (best == q.n_actions) {
      throw DegenerateSupport(s, "greedy extraction over an empty allowed set");
    }
    actions[s] = best;
  }
  return Policy::deterministic(actions, q.n_actions);
}

// ---------------------------------------------------------------------------
// Rollouts

RolloutResult rollout_return(const TabularMdp& mdp, const Policy& policy,
                             StateIndex start, std::size_t cap,
                             std::uint64_t rng_seed, RolloutMode mode) {
  check_shape(mdp, policy);
  if (cap == 0) throw InvalidArgument("rollout cap must be at least 1");
  if (start >= mdp.n_states()) throw InvalidArgument("start state out of range");

  Rng rng(rng_seed);
  RolloutResult out;
  double weight = 1.0;
  StateIndex s = start;
  while (out.steps < cap && !mdp.is_terminal(s)) {
    const ActionIndex a = mode == RolloutMode::kGreedy
                              ? policy.greedy_action(s)
                              : rng.categorical(policy.row(s));
    const double r = mdp.reward(s, a);
    out.undiscounted_return += r;
    out.discounted_return += weight * r;
    weight *= mdp.discount();
    ++out.steps;
    s = rng.categorical(mdp.transition_row(s, a));
  }
  return out;
}

RolloutResult mean_rollout_return(const TabularMdp& mdp, const Policy& policy,
                                  StateIndex start, std::size_t cap,
                                  std::size_t episodes, std::uint64_t rng_seed,
                                  RolloutMode mode) {
  if (episodes == 0) throw InvalidArgument("need at least one episode");
  RolloutResult total;
  for (std::size_t e = 0; e < episodes; ++e) {
    const RolloutResult r =
        rollout_return(mdp, policy, start, cap, derive_seed(rng_seed, e), mode);
    total.undiscounted_return += r.undiscounted_return;
    total.discounted_return += r.discounted_return;
    total.steps += r.steps;
  }
  const double n = static_cast<double>(episodes);
  total.undiscounted_return /= n;
  total.discounted_return /= n;
  total.steps = (total.steps + episodes / 2) / episodes;
  return total;
}

}  // namespace cpi
