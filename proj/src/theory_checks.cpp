#include "cpi/theory_checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cpi/solvers.hpp"

namespace cpi::theory {

TabularMdp random_mdp(const RandomMdpSpec& spec) {
  if (spec.n_states == 0 || spec.n_actions == 0) {
    throw InvalidArgument("random MDP needs states and actions");
  }
  if (!(spec.sparsity > 0.0 && spec.sparsity <= 1.0)) {
    throw InvalidArgument("sparsity must lie in (0, 1]");
  }
  if (!(spec.reward_max >= spec.reward_min)) throw InvalidArgument("empty reward range");
  const std::size_t ns = spec.n_states;
  const std::size_t na = spec.n_actions;
  Rng rng(spec.seed);
  std::vector<double> transition(ns * na * ns, 0.0);
  std::vector<double> reward(ns * na);
  const auto support = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(spec.sparsity * static_cast<double>(ns))));
  std::vector<StateIndex> order(ns);
  for (std::size_t pair = 0; pair < ns * na; ++pair) {
    for (StateIndex s = 0; s < ns; ++s) order[s] = s;
    // Partial Fisher-Yates: the first `support` entries are the successors.
    for (std::size_t i = 0; i < support; ++i) {
      std::swap(order[i], order[i + rng.index(ns - i)]);
    }
    double* row = transition.data() + pair * ns;
    double total = 0.0;
    for (std::size_t i = 0; i < support; ++i) {
      const double w = 1e-3 + rng.uniform();
      row[order[i]] = w;
      total += w;
    }
    for (StateIndex s = 0; s < ns; ++s) row[s] /= total;
    reward[pair] = spec.reward_min + (spec.reward_max - spec.reward_min) * rng.uniform();
  }
  return TabularMdp(ns, na, std::move(transition), std::move(reward), spec.discount,
                    std::vector<std::uint8_t>(ns, 0), 0);
}

Policy random_policy(std::size_t n_states, std::size_t n_actions, Rng& rng,
                     double zero_prob) {
  std::vector<double> probs(n_states * n_actions);
  for (StateIndex s = 0; s < n_states; ++s) {
    double* row = probs.data() + s * n_actions;
    const ActionIndex keep = rng.index(n_actions);
    double total = 0.0;
    for (ActionIndex a = 0; a < n_actions; ++a) {
      const bool zero = a != keep && rng.uniform() < zero_prob;
      row[a] = zero ? 0.0 : 0.05 + rng.uniform();
      total += row[a];
    }
    for (ActionIndex a = 0; a < n_actions; ++a) row[a] /= total;
  }
  return Policy(n_states, n_actions, std::move(probs));
}

SupportMask random_support(std::size_t n_states, std::size_t n_actions, Rng& rng,
                           double keep_prob) {
  std::vector<std::uint8_t> allowed(n_states * n_actions, 0);
  for (StateIndex s = 0; s < n_states; ++s) {
    const ActionIndex always = rng.index(n_actions);
    for (ActionIndex a = 0; a < n_actions; ++a) {
      allowed[s * n_actions + a] = (a == always || rng.uniform() < keep_prob) ? 1 : 0;
    }
  }
  return SupportMask(n_states, n_actions, std::move(allowed));
}

TabularMdp normalize_rewards(const TabularMdp& mdp) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (StateIndex s = 0; s < ns; ++s) {
    if (mdp.is_terminal(s)) continue;
    for (ActionIndex a = 0; a < na; ++a) {
      lo = std::min(lo, mdp.reward(s, a));
      hi = std::max(hi, mdp.reward(s, a));
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<double> reward(ns * na, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    if (mdp.is_terminal(s)) continue;
    for (ActionIndex a = 0; a < na; ++a) {
      reward[s * na + a] = (mdp.reward(s, a) - lo) / span;
    }
  }
  std::vector<double> transition(mdp.transitions().begin(), mdp.transitions().end());
  std::vector<std::uint8_t> terminal(mdp.terminal_mask().begin(), mdp.terminal_mask().end());
  return TabularMdp(ns, na, std::move(transition), std::move(reward), mdp.discount(),
                    std::move(terminal), mdp.start_state());
}

// ---------------------------------------------------------------------------
// Improvement and support preservation

namespace {

constexpr std::size_t kMaxRecordedViolations = 20;

QTable negated(const QTable& q) {
  QTable out = q;
  for (double& x : out.values) x = -x;
  return out;
}

}  // namespace

ImprovementReport check_improvement_and_support(const ImprovementConfig& config) {
  if (config.tau_grid.empty()) throw InvalidArgument("tau grid must be nonempty");
  for (double tau : config.tau_grid) {
    if (!(tau > 0.0)) throw InvalidArgument("tau grid entries must be positive");
  }
  if (config.max_states < 1 || config.max_actions < 2) {
    throw InvalidArgument("need at least one state and two actions");
  }
  ImprovementReport report;
  report.trials = config.n_trials;
  for (std::size_t trial = 0; trial < config.n_trials; ++trial) {
    const std::uint64_t seed = derive_seed(config.seed, trial);
    Rng rng(seed);
    RandomMdpSpec spec;
    spec.n_states = 1 + rng.index(config.max_states);
    spec.n_actions = 2 + rng.index(config.max_actions - 1);
    spec.sparsity = 0.2 + 0.8 * rng.uniform();
    spec.discount = config.discount;
    spec.seed = rng.next();
    const TabularMdp mdp = random_mdp(spec);

    Policy reference = random_policy(spec.n_states, spec.n_actions, rng, 0.3);
    if (trial % 2 == 1) {
      // Adversarial: no reference mass on the optimal action wherever possible.
      const Policy optimal = value_iteration(mdp, config.eval_tol).policy;
      std::vector<double> probs(reference.probs().begin(), reference.probs().end());
      for (StateIndex s = 0; s < spec.n_states; ++s) {
        const ActionIndex best = optimal.greedy_action(s);
        double rest = 0.0;
        for (ActionIndex a = 0; a < spec.n_actions; ++a) {
          if (a != best) rest += probs[s * spec.n_actions + a];
        }
        if (rest <= 0.0) continue;
        probs[s * spec.n_actions + best] = 0.0;
        for (ActionIndex a = 0; a < spec.n_actions; ++a) probs[s * spec.n_actions + a] /= rest;
      }
      reference = Policy(spec.n_states, spec.n_actions, std::move(probs));
    }

    const Evaluation before = exact_policy_evaluation(mdp, reference, config.eval_tol);
    for (double tau : config.tau_grid) {
      ++report.cases;
      const Policy next = solvers::conservative_step(
          config.flip_kl_sign ? negated(before.q) : before.q, reference, tau);
      const Evaluation after = exact_policy_evaluation(mdp, next, config.eval_tol);

      bool improved = true;
      for (StateIndex s = 0; s < spec.n_states && improved; ++s) {
        const double drop = before.v(s) - after.v(s);
        if (drop > config.slack) {
          improved = false;
          if (report.violations.size() < kMaxRecordedViolations) {
            report.violations.push_back({trial, seed, tau, "improvement", s, drop});
          }
        }
      }
      if (!improved) ++report.improvement_violations;

      bool preserved = true;
      for (StateIndex s = 0; s < spec.n_states && preserved; ++s) {
        for (ActionIndex a = 0; a < spec.n_actions; ++a) {
          if (reference(s, a) == 0.0 && next(s, a) != 0.0) {
            preserved = false;
            if (report.violations.size() < kMaxRecordedViolations) {
              report.violations.push_back({trial, seed, tau, "support", s, next(s, a)});
            }
            break;
          }
        }
      }
      if (!preserved) ++report.support_violations;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Convergence bound

double schedule_tau(double discount, std::size_t n_actions, std::size_t horizon) {
  if (n_actions < 2) throw InvalidArgument("the bound needs at least two actions");
  const double log_a = std::log(static_cast<double>(n_actions));
  return std::sqrt(static_cast<double>(horizon) / (2.0 * log_a)) / (1.0 - discount);
}

double gap_bound(double discount, std::size_t n_actions, std::size_t t) {
  const double log_a = std::log(static_cast<double>(n_actions));
  const double scale = 1.0 / ((1.0 - discount) * (1.0 - discount));
  return scale * std::sqrt(2.0 * log_a / static_cast<double>(t));
}

bool BoundReport::satisfied() const {
  return std::all_of(rows.begin(), rows.end(), [](const BoundRow& r) { return r.satisfied; });
}

double BoundReport::worst_slack() const {
  double worst = std::numeric_limits<double>::infinity();
  for (const BoundRow& r : rows) worst = std::min(worst, r.bound - r.gap);
  return worst;
}

BoundReport check_gap_bound(const RandomMdpSpec& spec, std::size_t horizon,
                           SupportKind support, double eval_tol) {
  if (spec.reward_min < 0.0 || spec.reward_max > 1.0) {
    throw InvalidArgument("bound check needs rewards in [0, 1]");
  }
  if (horizon == 0) throw InvalidArgument("horizon must be positive");
  const TabularMdp mdp = random_mdp(spec);
  Rng rng(derive_seed(spec.seed, 0x5077));
  const SupportMask mask = support == SupportKind::kFull
                               ? SupportMask::full(spec.n_states, spec.n_actions)
                               : random_support(spec.n_states, spec.n_actions, rng, 0.5);
  const VTable oracle = in_sample_value_iteration(mdp, mask, eval_tol).v;

  BoundReport report;
  report.spec = spec;
  report.horizon = horizon;
  report.support = support;
  report.tau = schedule_tau(spec.discount, spec.n_actions, horizon);

  solvers::SolverConfig config;
  config.tau = report.tau;
  config.lambda = 1.0;
  config.iterations = horizon;
  config.eval_mode = solvers::EvalMode::kExact;
  config.eval_tol = eval_tol;
  config.eval_episodes = 0;

  const auto problem =
      solvers::Problem::from_mdp(mdp, solvers::uniform_on_support(mask));
  solvers::run_cpi(problem, config, [&](std::size_t t, const Policy&, const Evaluation& eval) {
    if (t == 0) return;
    double gap = -std::numeric_limits<double>::infinity();
    for (StateIndex s = 0; s < spec.n_states; ++s) {
      gap = std::max(gap, oracle(s) - eval.v(s));
    }
    const double bound = gap_bound(spec.discount, spec.n_actions, t);
    report.rows.push_back({t, gap, bound, gap <= bound + 1e-9});
  });
  return report;
}

bool BoundSuiteReport::passed() const {
  return std::all_of(trials.begin(), trials.end(),
                     [](const BoundReport& r) { return r.satisfied(); });
}

BoundSuiteReport check_gap_bound_suite(const BoundSuiteConfig& config) {
  if (config.max_actions < 2) throw InvalidArgument("need at least two actions");
  BoundSuiteReport suite;
  for (std::size_t trial = 0; trial < config.n_trials; ++trial) {
    Rng rng(derive_seed(config.seed, trial));
    RandomMdpSpec spec;
    spec.n_states = 1 + rng.index(config.max_states);
    spec.n_actions = 2 + rng.index(config.max_actions - 1);
    spec.sparsity = 0.2 + 0.8 * rng.uniform();
    spec.discount = config.discount;
    spec.seed = rng.next();
    const SupportKind kind = trial % 2 == 0 ? SupportKind::kFull : SupportKind::kRandom;
    suite.trials.push_back(check_gap_bound(spec, config.horizon, kind));
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Softmax optimality

double soft_max_value(std::span<const double> q, double tau) {
  const double top = *std::max_element(q.begin(), q.end());
  double acc = 0.0;
  for (double x : q) acc += std::exp((x - top) / tau);
  return top + tau * std::log(acc);
}

double entropy_objective(std::span<const double> pi, std::span<const double> q, double tau) {
  double value = 0.0;
  double entropy = 0.0;
  for (std::size_t a = 0; a < q.size(); ++a) {
    value += pi[a] * q[a];
    if (pi[a] > 0.0) entropy -= pi[a] * std::log(pi[a]);
  }
  return value + tau * entropy;
}

SoftmaxReport check_softmax_optimality(const SoftmaxConfig& config) {
  if (config.k_actions < 2) throw InvalidArgument("need at least two actions");
  if (config.tau_grid.empty()) throw InvalidArgument("tau grid must be nonempty");
  const std::size_t k = config.k_actions;
  SoftmaxReport report;
  report.trials = config.n_trials;
  report.min_margin = std::numeric_limits<double>::infinity();
  Rng rng(config.seed);
  std::vector<double> q(k), soft(k), other(k);
  for (std::size_t trial = 0; trial < config.n_trials; ++trial) {
    for (double& x : q) x = -5.0 + 10.0 * rng.uniform();
    for (double tau : config.tau_grid) {
      const double f_value = soft_max_value(q, tau);
      const double top = *std::max_element(q.begin(), q.end());
      double z = 0.0;
      for (std::size_t a = 0; a < k; ++a) z += soft[a] = std::exp((q[a] - top) / tau);
      for (double& p : soft) p /= z;
      const double tol = config.slack * std::max(1.0, std::fabs(f_value));
      if (std::fabs(entropy_objective(soft, q, tau) - f_value) > tol) {
        ++report.closed_form_failures;
      }

      for (std::size_t c = 0; c < config.competitors; ++c) {
        const std::size_t kind = c % 3;
        double total = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
          if (kind == 0) {
            other[a] = -std::log(1.0 - rng.uniform());  // flat Dirichlet
          } else if (kind == 1) {
            other[a] = std::max(0.0, soft[a] * (1.0 + 0.2 * (rng.uniform() - 0.5)));
          } else {
            other[a] = 0.0;
          }
          total += other[a];
        }
        if (kind == 2) {
          other[c / 3 % k] = 1.0;  // simplex vertex
          total = 1.0;
        }
        if (!(total > 0.0)) continue;
        for (double& p : other) p /= total;
        const double margin = f_value - entropy_objective(other, q, tau);
        report.min_margin = std::min(report.min_margin, margin);
        if (margin < -tol) ++report.dominated_failures;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json to_json(const ImprovementReport& r) {
  nlohmann::json v = nlohmann::json::array();
  for (const Violation& x : r.violations) {
    v.push_back({{"trial", x.trial}, {"seed", x.seed}, {"tau", x.tau}, {"kind", x.kind},
                 {"state", x.state}, {"amount", x.amount}});
  }
  return {{"trials", r.trials},
          {"cases", r.cases},
          {"improvement_violations", r.improvement_violations},
          {"support_violations", r.support_violations},
          {"violations", v},
          {"passed", r.passed()}};
}

nlohmann::json to_json(const BoundReport& r) {
  double worst_gap = 0.0;
  std::size_t failures = 0;
  nlohmann::json failed_t = nlohmann::json::array();
  for (const BoundRow& row : r.rows) {
    worst_gap = std::max(worst_gap, row.gap);
    if (!row.satisfied) {
      ++failures;
      if (failed_t.size() < 10) failed_t.push_back(row.t);
    }
  }
  return {{"seed", r.spec.seed},
          {"n_states", r.spec.n_states},
          {"n_actions", r.spec.n_actions},
          {"discount", r.spec.discount},
          {"horizon", r.horizon},
          {"tau", r.tau},
          {"tau_schedule", "(1/(1-gamma)) * sqrt(T / (2 ln|A|)), fixed for t <= T"},
          {"support", r.support == SupportKind::kFull ? "full" : "random"},
          {"final_gap", r.rows.empty() ? 0.0 : r.rows.back().gap},
          {"max_gap", worst_gap},
          {"worst_slack", r.worst_slack()},
          {"failed_iterations", failures},
          {"first_failed_t", failed_t},
          {"satisfied", r.satisfied()}};
}

nlohmann::json to_json(const BoundSuiteReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const BoundReport& b : r.trials) trials.push_back(to_json(b));
  return {{"trials", trials}, {"passed", r.passed()}};
}

nlohmann::json to_json(const SoftmaxReport& r) {
  return {{"trials", r.trials},
          {"closed_form_failures", r.closed_form_failures},
          {"dominated_failures", r.dominated_failures},
          {"min_margin", r.min_margin},
          {"passed", r.passed()}};
}

}  // namespace cpi::theory
