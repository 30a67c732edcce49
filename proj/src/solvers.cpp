#include "cpi/solvers.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <ostream>

#include "cpi/kernels.hpp"
#include "cpi/rng.hpp"

namespace cpi::solvers {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
}

void check_q(const QTable& q, const Policy& ref) {
  if (q.n_states != ref.n_states() || q.n_actions != ref.n_actions()) {
    throw InvalidArgument("Q table and policy shapes differ");
  }
  for (double x : q.values) {
    if (!std::isfinite(x)) throw InvalidArgument("Q table has non-finite entries");
  }
}

// x^e with the two exact endpoints that the lambda in {0, 1} collapses rely on.
double weighted_power(double x, double e) {
  if (e == 1.0) return x;
  if (e == 0.0) return 1.0;
  return std::pow(x, e);
}

// out[a] = base[a] exp((q[a] - max q) / tau) / Z over actions with base > 0.
// The max runs over the admissible actions only, and the shift uses q
// differences so that adding a constant to q leaves the result unchanged.
void reweight_row(StateIndex s, std::span<const double> q, std::span<const double> base,
                  double tau, std::span<double> out) {
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < q.size(); ++a) {
    if (base[a] > 0.0) top = std::max(top, q[a]);
  }
  if (top == -std::numeric_limits<double>::infinity()) {
    throw DegenerateSupport(s, "reference policy puts no mass on any action");
  }
  for (std::size_t a = 0; a < q.size(); ++a) {
    out[a] = base[a] > 0.0 ? base[a] * std::exp((q[a] - top) / tau) : 0.0;
  }
  const double z = kernels::sum(out);
  if (!(z > 0.0) || !std::isfinite(z)) {
    throw DegenerateSupport(s, "normalizer of the policy update vanished");
  }
  // Divide rather than scale by 1 / z: z can be subnormal when the surviving
  // actions carry almost no reference mass, and 1 / z would overflow.
  for (double& x : out) x /= z;
}

}  // namespace

// ---------------------------------------------------------------------------
// Update rules

Policy conservative_step(const QTable& q, const Policy& ref, double tau) {
  check_tau(tau);
  check_q(q, ref);
  const std::size_t na = q.n_actions;
  std::vector<double> probs(q.n_states * na);
  for (StateIndex s = 0; s < q.n_states; ++s) {
    reweight_row(s, q.row(s), ref.row(s), tau, {probs.data() + s * na, na});
  }
  return Policy(q.n_states, na, std::move(probs));
}

Policy mixed_step(const QTable& q, const Policy& ref, const Policy& data_policy,
                  double tau, double lambda) {
  check_tau(tau);
  check_q(q, ref);
  check_q(q, data_policy);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
  const std::size_t na = q.n_actions;
  std::vector<double> probs(q.n_states * na);
  std::vector<double> base(na);
  for (StateIndex s = 0; s < q.n_states; ++s) {
    for (ActionIndex a = 0; a < na; ++a) {
      // A zero base policy only matters when its exponent is positive.
      const double r = ref(s, a);
      const double d = data_policy(s, a);
      if ((lambda > 0.0 && r == 0.0) || (lambda < 1.0 && d == 0.0)) {
        base[a] = 0.0;
      } else {
        base[a] = weighted_power(r, lambda) * weighted_power(d, 1.0 - lambda);
      }
    }
    reweight_row(s, q.row(s), base, tau, {probs.data() + s * na, na});
  }
  return Policy(q.n_states, na, std::move(probs));
}

Policy forward_kl_step(const QTable& q, const Policy& ref, double tau) {
  check_tau(tau);
  check_q(q, ref);
  // Cross-entropy target: maximize sum_a w_a log pi_a with importance weights
  // w_a = ref_a exp(q_a / tau). Its stationary point on the simplex is
  // pi_a = w_a / sum_b w_b, evaluated here in log space.
  const std::size_t na = q.n_actions;
  std::vector<double> probs(q.n_states * na, 0.0);
  std::vector<double> log_w(na);
  for (StateIndex s = 0; s < q.n_states; ++s) {
    double top = -std::numeric_limits<double>::infinity();
    for (ActionIndex a = 0; a < na; ++a) {
      log_w[a] = ref(s, a) > 0.0 ? std::log(ref(s, a)) + q(s, a) / tau
                                 : -std::numeric_limits<double>::infinity();
      top = std::max(top, log_w[a]);
    }
    if (top == -std::numeric_limits<double>::infinity()) {
      throw DegenerateSupport(s, "reference policy puts no mass on any action");
    }
    double acc = 0.0;
    for (ActionIndex a = 0; a < na; ++a) {
      if (ref(s, a) > 0.0) acc += std::exp(log_w[a] - top);
    }
    const double log_z = top + std::log(acc);
    for (ActionIndex a = 0; a < na; ++a) {
      if (ref(s, a) > 0.0) probs[s * na + a] = std::exp(log_w[a] - log_z);
    }
  }
  return Policy(q.n_states, na, std::move(probs));
}

// ---------------------------------------------------------------------------
// Config

std::optional<EvalMode> parse_eval_mode(const std::string& name) {
  if (name == "exact") return EvalMode::kExact;
  if (name == "fitted") return EvalMode::kFitted;
  if (name == "fitted-bootstrap" || name == "bootstrap") return EvalMode::kFittedBootstrap;
  return std::nullopt;
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::kExact: return "exact";
    case EvalMode::kFitted: return "fitted";
    case EvalMode::kFittedBootstrap: return "fitted-bootstrap";
  }
  return "unknown";
}

void SolverConfig::validate() const {
  check_tau(tau);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
  if (!(eval_tol > 0.0)) throw InvalidArgument("eval_tol must be positive");
  if (episode_cap == 0) throw InvalidArgument("episode_cap must be at least 1");
}

void to_json(nlohmann::json& j, const SolverConfig& c) {
  j = nlohmann::json{{"tau", c.tau},
                     {"lambda", c.lambda},
                     {"iterations", c.iterations},
                     {"eval_mode", to_string(c.eval_mode)},
                     {"eval_tol", c.eval_tol},
                     {"rng_seed", c.rng_seed},
                     {"ensemble", c.ensemble},
                     {"br_mode", c.br_mode == BrMode::kOneStep ? "one-step" : "multi-step"},
                     {"eval_episodes", c.eval_episodes},
                     {"episode_cap", c.episode_cap}};
}

void from_json(const nlohmann::json& j, SolverConfig& c) {
  SolverConfig d;
  try {
    c.tau = j.value("tau", d.tau);
    c.lambda = j.value("lambda", d.lambda);
    c.iterations = j.value("iterations", d.iterations);
    const auto mode = parse_eval_mode(j.value("eval_mode", to_string(d.eval_mode)));
    if (!mode) throw InvalidArgument("unknown eval_mode");
    c.eval_mode = *mode;
    c.eval_tol = j.value("eval_tol", d.eval_tol);
    c.rng_seed = j.value("rng_seed", d.rng_seed);
    c.ensemble = j.value("ensemble", d.ensemble);
    const std::string br = j.value("br_mode", std::string("multi-step"));
    if (br != "multi-step" && br != "one-step") throw InvalidArgument("unknown br_mode");
    c.br_mode = br == "one-step" ? BrMode::kOneStep : BrMode::kMultiStep;
    c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
    c.episode_cap = j.value("episode_cap", d.episode_cap);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed solver config: ") + e.what());
  }
  c.validate();
}

namespace {

void put_double(std::ostream& out, double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  out.write(buf, res.ptr - buf);
}

}  // namespace

void LearningCurve::write_csv(std::ostream& out) const {
  out << kCsvHeader << '\n';
  for (const CurveRecord& r : records) {
    out << r.iteration << ',';
    put_double(out, r.return_undiscounted);
    out << ',';
    put_double(out, r.value_start_discounted);
    out << ',';
    put_double(out, r.policy_delta);
    out << ',';
    if (r.oracle_gap) put_double(out, *r.oracle_gap);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Problem

Problem::Problem(TabularMdp env, TabularMdp model, Policy data_policy,
                 std::optional<data::Dataset> dataset)
    : env_(std::move(env)),
      model_(std::move(model)),
      data_policy_(std::move(data_policy)),
      support_(dataset ? data::empirical_support(*dataset, data_policy_.n_states(),
                                                 data_policy_.n_actions())
                       : SupportMask::of_policy(data_policy_)),
      dataset_(std::move(dataset)) {
  if (env_.n_states() != model_.n_states() || env_.n_actions() != model_.n_actions()) {
    throw InvalidArgument("environment and model shapes differ");
  }
  check_shape(env_, data_policy_);
  constexpr double kOracleTol = 1e-10;
  oracle_env_ = in_sample_value_iteration(env_, support_, kOracleTol).v(env_.start_state());
  oracle_model_ =
      in_sample_value_iteration(model_, support_, kOracleTol).v(model_.start_state());
}

Problem Problem::from_dataset(const TabularMdp& env, const data::Dataset& dataset,
                              const data::EmpiricalModelOptions& model_options) {
  if (dataset.empty()) throw InvalidArgument("offline problem needs a nonempty dataset");
  dataset.validate(env.n_states(), env.n_actions());
  Policy behavior = data::empirical_behavior_policy(dataset, env.n_states(), env.n_actions(),
                                                    data::Smoothing::kUniformOnUnvisited);
  TabularMdp model = data::empirical_mdp(dataset, env, model_options);
  return Problem(env, std::move(model), std::move(behavior), dataset);
}

Problem Problem::from_mdp(const TabularMdp& env, const Policy& initial) {
  return Problem(env, env, initial);
}

const TabularMdp& Problem::eval_model(EvalMode mode) const {
  return mode == EvalMode::kExact ? env_ : model_;
}

double Problem::oracle_value(EvalMode mode) const {
  return mode == EvalMode::kExact ? oracle_env_ : oracle_model_;
}

// ---------------------------------------------------------------------------
// Loops

namespace {

struct Evaluator {
  const Problem& problem;
  const SolverConfig& config;

  Evaluation operator()(const Policy& policy, std::size_t t, std::uint64_t member) const {
    if (config.eval_mode == EvalMode::kFittedBootstrap) {
      if (!problem.dataset()) {
        throw InvalidArgument("bootstrap evaluation needs a dataset-backed problem");
      }
      const data::Dataset resample = data::bootstrap_resample(
          *problem.dataset(), derive_seed(config.rng_seed, 0xB007, t, member));
      const TabularMdp model = data::empirical_mdp(resample, problem.env());
      return exact_policy_evaluation(model, policy, config.eval_tol);
    }
    return exact_policy_evaluation(problem.eval_model(config.eval_mode), policy,
                                   config.eval_tol);
  }
};

class CurveRecorder {
 public:
  CurveRecorder(const Problem& problem, const SolverConfig& config)
      : problem_(problem), config_(config) {
    oracle_ = problem.oracle_value(config.eval_mode);
  }

  void record(std::size_t t, const Policy& policy, const Policy* previous) {
    CurveRecord r;
    r.iteration = t;
    const TabularMdp& env = problem_.env();
    if (config_.eval_episodes > 0) {
      r.return_undiscounted =
          mean_rollout_return(env, policy, env.start_state(), config_.episode_cap,
                              config_.eval_episodes, derive_seed(config_.rng_seed, 0xE7A1, t),
                              RolloutMode::kGreedy)
              .undiscounted_return;
    } else {
      r.return_undiscounted = std::numeric_limits<double>::quiet_NaN();
    }
    // The stochastic iterate only feeds the update; the curve tracks its
    // greedy policy, valued on the (non-resampled) evaluation model.
    std::vector<ActionIndex> actions(policy.n_states());
    for (StateIndex s = 0; s < policy.n_states(); ++s) actions[s] = policy.greedy_action(s);
    const TabularMdp& model = problem_.eval_model(config_.eval_mode);
    r.value_start_discounted =
        exact_policy_evaluation(model, Policy::deterministic(actions, policy.n_actions()),
                                config_.eval_tol)
            .v(model.start_state());
    r.policy_delta = previous ? policy.max_abs_diff(*previous) : 0.0;
    r.oracle_gap = oracle_ - r.value_start_discounted;
    curve_.records.push_back(r);
  }

  LearningCurve take() { return std::move(curve_); }

 private:
  const Problem& problem_;
  const SolverConfig& config_;
  double oracle_ = 0.0;
  LearningCurve curve_;
};

}  // namespace

RunResult run_cpi(const Problem& problem, const SolverConfig& config,
                  const IterationObserver& observer) {
  config.validate();
  const Evaluator evaluate{problem, config};
  CurveRecorder recorder(problem, config);

  Policy policy = problem.data_policy();
  std::optional<Policy> previous;
  for (std::size_t t = 0;; ++t) {
    const Evaluation eval = evaluate(policy, t, 0);
    recorder.record(t, policy, previous ? &*previous : nullptr);
    if (observer) observer(t, policy, eval);
    if (t == config.iterations) break;
    Policy next = mixed_step(eval.q, policy, problem.data_policy(), config.tau, config.lambda);
    previous = std::move(policy);
    policy = std::move(next);
  }
  return RunResult{std::move(policy), recorder.take()};
}

RunResult run_br(const Problem& problem, const SolverConfig& config,
                 const IterationObserver& observer) {
  config.validate();
  const Evaluator evaluate{problem, config};
  CurveRecorder recorder(problem, config);
  const Policy& reference = problem.data_policy();

  Policy policy = reference;
  std::optional<Policy> previous;
  std::optional<QTable> one_step_q;
  for (std::size_t t = 0;; ++t) {
    const Evaluation eval = evaluate(policy, t, 0);
    recorder.record(t, policy, previous ? &*previous : nullptr);
    if (observer) observer(t, policy, eval);
    if (t == config.iterations) break;
    if (config.br_mode == BrMode::kOneStep && !one_step_q) one_step_q = eval.q;
    const QTable& q = config.br_mode == BrMode::kOneStep ? *one_step_q : eval.q;
    Policy next = conservative_step(q, reference, config.tau);
    previous = std::move(policy);
    policy = std::move(next);
  }
  return RunResult{std::move(policy), recorder.take()};
}

RunResult run_cpi_re(const Problem& problem, const SolverConfig& config,
                     const EnsembleOptions& options) {
  config.validate();
  if (config.eval_mode == EvalMode::kExact) {
    throw InvalidArgument("CPI-RE needs fitted or bootstrap evaluation");
  }
  const Evaluator evaluate{problem, config};
  CurveRecorder recorder(problem, config);
  const std::size_t ns = problem.env().n_states();
  const std::size_t na = problem.env().n_actions();

  std::array<Policy, 2> members{
      problem.data_policy(),
      options.frozen_second ? *options.frozen_second
      : options.second_init == EnsembleOptions::SecondInit::kDataPolicy
          ? problem.data_policy()
          : uniform_on_support(problem.support())};
  check_shape(problem.env(), members[1]);

  std::optional<Policy> previous_best;
  std::size_t best = 0;
  for (std::size_t t = 0;; ++t) {
    std::array<Evaluation, 2> evals{evaluate(members[0], t, 0), evaluate(members[1], t, 1)};

    // Test-time selection: the member with the higher estimated start value.
    const StateIndex start = problem.env().start_state();
    best = evals[1].v(start) > evals[0].v(start) ? 1 : 0;
    recorder.record(t, members[best], previous_best ? &*previous_best : nullptr);
    if (t == config.iterations) break;

    // Per state, the member with the larger E_{a~pi_i} Q_i(s, a) is the
    // reference for both updates.
    std::vector<double> ref_probs(ns * na);
    for (StateIndex s = 0; s < ns; ++s) {
      double score[2];
      for (std::size_t i = 0; i < 2; ++i) {
        score[i] = kernels::dot(members[i].row(s), evals[i].q.row(s));
      }
      const std::size_t pick = score[1] > score[0] ? 1 : 0;
      const auto row = members[pick].row(s);
      std::copy(row.begin(), row.end(), ref_probs.begin() + static_cast<std::ptrdiff_t>(s * na));
    }
    const Policy reference(ns, na, std::move(ref_probs));

    previous_best = members[best];
    Policy first = mixed_step(evals[0].q, reference, problem.data_policy(), config.tau,
                              config.lambda);
    if (!options.frozen_second) {
      members[1] = mixed_step(evals[1].q, reference, problem.data_policy(), config.tau,
                              config.lambda);
    }
    members[0] = std::move(first);
  }
  return RunResult{members[best], recorder.take()};
}

QTable fitted_q_evaluation(const TabularMdp& empirical_mdp, const Policy& policy,
                           double tol) {
  return exact_policy_evaluation(empirical_mdp, policy, tol).q;
}

Policy uniform_on_support(const SupportMask& support) {
  const std::size_t ns = support.n_states();
  const std::size_t na = support.n_actions();
  std::vector<double> probs(ns * na, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    std::size_t k = 0;
    for (ActionIndex a = 0; a < na; ++a) k += support.allowed(s, a) ? 1 : 0;
    for (ActionIndex a = 0; a < na; ++a) {
      if (k == 0) {
        probs[s * na + a] = 1.0 / static_cast<double>(na);
      } else if (support.allowed(s, a)) {
        probs[s * na + a] = 1.0 / static_cast<double>(k);
      }
    }
  }
  return Policy(ns, na, std::move(probs));
}

}  // namespace cpi::solvers
