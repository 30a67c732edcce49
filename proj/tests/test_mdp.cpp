#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "cpi/envs.hpp"
#include "cpi/mdp.hpp"
#include "cpi/rng.hpp"
#include "support.hpp"

using namespace cpi;

namespace {

TabularMdp single_state(double reward, double gamma) {
  return TabularMdp(1, 1, {1.0}, {reward}, gamma, {0}, 0);
}

// Support keeping each pair with probability keep, at least one per state.
SupportMask random_mask(Rng& rng, std::size_t ns, std::size_t na, double keep) {
  std::vector<std::uint8_t> m(ns * na, 0);
  for (StateIndex s = 0; s < ns; ++s) {
    bool any = false;
    for (ActionIndex a = 0; a < na; ++a) {
      m[s * na + a] = rng.uniform() < keep;
      any = any || m[s * na + a];
    }
    if (!any) m[s * na + rng.index(na)] = 1;
  }
  return SupportMask(ns, na, std::move(m));
}

}  // namespace

TEST_CASE("single self-looping state is worth r / (1 - gamma)") {
  const auto mdp = single_state(1.0, 0.9);
  const auto eval = exact_policy_evaluation(mdp, Policy::uniform(1, 1), 1e-12);
  CHECK(eval.v(0) == doctest::Approx(10.0).epsilon(1e-10));
  const auto opt = value_iteration(mdp, 1e-12);
  CHECK(opt.v(0) == doctest::Approx(10.0).epsilon(1e-10));
}

TEST_CASE("zero rewards give zero values") {
  Rng rng(3);
  auto base = testing::make_random_mdp(rng, 6, 3, 0.95);
  std::vector<double> p(base.transitions().begin(), base.transitions().end());
  const TabularMdp mdp(6, 3, p, std::vector<double>(18, 0.0), 0.95,
                       std::vector<std::uint8_t>(6, 0), 0);
  const auto eval = exact_policy_evaluation(mdp, testing::make_random_policy(rng, 6, 3), 1e-12);
  for (double x : eval.v.values) CHECK(x == 0.0);
  for (double x : eval.q.values) CHECK(x == 0.0);
  for (double x : value_iteration(mdp, 1e-12).v.values) CHECK(x == 0.0);
}

TEST_CASE("policy evaluation matches a dense linear solve") {
  Rng rng(17);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t ns = 1 + rng.index(12);
    const std::size_t na = 1 + rng.index(4);
    const double gamma = 0.5 + 0.45 * rng.uniform();
    const auto mdp = testing::make_random_mdp(rng, ns, na, gamma, -1.0, 2.0, trial % 3 == 0 && ns > 1);
    const auto pi = testing::make_random_policy(rng, ns, na, 0.3);
    const auto eval = exact_policy_evaluation(mdp, pi, 1e-12);
    const auto direct = testing::direct_policy_value(mdp, pi);
    CHECK(testing::max_abs(eval.v.values, direct) < 1e-9);
    // V = sum_a pi Q and Q = r + gamma P V.
    for (StateIndex s = 0; s < ns; ++s) {
      double vq = 0.0;
      for (ActionIndex a = 0; a < na; ++a) {
        vq += pi(s, a) * eval.q(s, a);
        const auto row = mdp.transition_row(s, a);
        double next = 0.0;
        for (StateIndex t = 0; t < ns; ++t) next += row[t] * direct[t];
        CHECK(eval.q(s, a) == doctest::Approx(mdp.reward(s, a) + gamma * next).epsilon(1e-8));
      }
      CHECK(vq == doctest::Approx(eval.v(s)).epsilon(1e-9));
    }
  }
}

TEST_CASE("value iteration matches enumeration of deterministic policies") {
  Rng rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t ns = 1 + rng.index(5);
    const std::size_t na = 1 + rng.index(3);
    const auto mdp = testing::make_random_mdp(rng, ns, na, 0.9, 0.0, 1.0);
    const auto opt = value_iteration(mdp, 1e-12);
    const auto brute = testing::brute_force_optimal_value(mdp);
    CHECK(testing::max_abs(opt.v.values, brute) < 1e-9);
    // The returned policy attains V*.
    CHECK(testing::max_abs(testing::direct_policy_value(mdp, opt.policy), brute) < 1e-9);
  }
}

TEST_CASE("in-sample value iteration matches restricted enumeration") {
  Rng rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t ns = 2 + rng.index(4);
    const std::size_t na = 2 + rng.index(2);
    const auto mdp = testing::make_random_mdp(rng, ns, na, 0.9, 0.0, 1.0);
    const auto mask = random_mask(rng, ns, na, 0.5);
    std::vector<std::vector<ActionIndex>> allowed(ns);
    for (StateIndex s = 0; s < ns; ++s)
      for (ActionIndex a = 0; a < na; ++a)
        if (mask.allowed(s, a)) allowed[s].push_back(a);
    const auto sol = in_sample_value_iteration(mdp, mask, 1e-12);
    const auto brute = testing::brute_force_optimal_value(mdp, &allowed);
    CHECK(testing::max_abs(sol.v.values, brute) < 1e-9);
    for (StateIndex s = 0; s < ns; ++s) CHECK(mask.allowed(s, sol.policy.greedy_action(s)));
    // Dominance: V^pi <= V*_D <= V* for any policy supported on the mask.
    const auto full = value_iteration(mdp, 1e-12);
    const auto pi = testing::make_random_policy(rng, ns, na);
    std::vector<double> probs(pi.probs().begin(), pi.probs().end());
    for (StateIndex s = 0; s < ns; ++s) {
      double z = 0.0;
      for (ActionIndex a = 0; a < na; ++a) {
        if (!mask.allowed(s, a)) probs[s * na + a] = 0.0;
        z += probs[s * na + a];
      }
      for (ActionIndex a = 0; a < na; ++a) probs[s * na + a] /= z;
    }
    const auto v_pi = testing::direct_policy_value(mdp, Policy(ns, na, probs));
    for (StateIndex s = 0; s < ns; ++s) {
      CHECK(v_pi[s] <= sol.v(s) + 1e-9);
      CHECK(sol.v(s) <= full.v(s) + 1e-9);
    }
  }
}

TEST_CASE("unvisited states take the pessimistic floor") {
  // Two states, two actions. State 1 is never observed; from state 0, action 0
  // leads there and action 1 stays.
  const std::vector<double> p = {0, 1, 1, 0,   // s0: a0 -> s1, a1 -> s0
                                 0, 1, 0, 1};  // s1 self-loops
  const std::vector<double> r = {5.0, 0.5, -2.0, 1.0};
  const TabularMdp mdp(2, 2, p, r, 0.5, {0, 0}, 0);
  const SupportMask mask(2, 2, {1, 1, 0, 0});
  const auto sol = in_sample_value_iteration(mdp, mask, 1e-12);
  const double floor = -2.0 / (1.0 - 0.5);
  CHECK(sol.v(1) == floor);
  // Q(0, 0) = 5 + 0.5 floor = 3; Q(0, 1) = 0.5 + 0.5 V(0) gives V(0) = 1.
  CHECK(sol.v(0) == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(sol.q(1, 0) == doctest::Approx(-2.0 + 0.5 * floor).epsilon(1e-10));
  CHECK_THROWS_AS(in_sample_value_iteration(mdp, mask, 1e-12,
                                            {UnvisitedHandling::kError, std::nullopt}),
                  DegenerateSupport);
  const auto custom = in_sample_value_iteration(mdp, mask, 1e-12, {UnvisitedHandling::kPessimistic, 0.0});
  CHECK(custom.v(1) == 0.0);
  CHECK(custom.v(0) == doctest::Approx(5.0).epsilon(1e-10));
}

TEST_CASE("greedy extraction") {
  QTable q{2, 3, {1.0, 3.0, 3.0, 2.0, 5.0, 4.0}, 0.9};
  const auto pi = greedy_policy(q);
  CHECK(pi.greedy_action(0) == 1);  // tie between 1 and 2 goes low
  CHECK(pi.greedy_action(1) == 1);
  const SupportMask mask(2, 3, {1, 0, 0, 1, 0, 1});
  const auto restricted = greedy_policy(q, mask);
  CHECK(restricted.greedy_action(0) == 0);
  CHECK(restricted.greedy_action(1) == 2);
  CHECK_THROWS_AS(greedy_policy(q, SupportMask(2, 3, {1, 0, 0, 0, 0, 0})), DegenerateSupport);
  q.values[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(greedy_policy(q), InvalidArgument);
}

TEST_CASE("greedy in its own Q* is a fixed point") {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mdp = testing::make_random_mdp(rng, 6, 3, 0.9);
    const auto opt = value_iteration(mdp, 1e-12);
    const auto again = greedy_policy(exact_policy_evaluation(mdp, opt.policy, 1e-12).q);
    for (StateIndex s = 0; s < 6; ++s) {
      // Ties can break differently; the value of the choice must match.
      CHECK(opt.q(s, again.greedy_action(s)) == doctest::Approx(opt.v(s)).epsilon(1e-8));
    }
  }
}

TEST_CASE("rollouts agree with dynamic programming on deterministic grids") {
  const auto spec = envs::GridSpec::grid7x7();
  const auto mdp = envs::build_gridworld(spec, 0.9);
  const auto opt = value_iteration(mdp, 1e-12);
  const auto r = rollout_return(mdp, opt.policy, mdp.start_state(), 30, 0, RolloutMode::kGreedy);
  CHECK(r.undiscounted_return == testing::shortest_path_return(spec));
  CHECK(r.steps == static_cast<std::size_t>(testing::grid_bfs(spec, spec.start, spec.goal).value()));
  CHECK(r.discounted_return == doctest::Approx(opt.v(mdp.start_state())).epsilon(1e-9));
  // Hand value: eleven -1 steps then +100 at the twelfth.
  double hand = 0.0;
  for (int k = 0; k < 11; ++k) hand -= std::pow(0.9, k);
  hand += 100.0 * std::pow(0.9, 11);
  CHECK(opt.v(mdp.start_state()) == doctest::Approx(hand).epsilon(1e-10));
}

TEST_CASE("stochastic rollouts average to the policy value") {
  Rng rng(31);
  const auto mdp = testing::make_random_mdp(rng, 5, 2, 0.5);
  const auto pi = testing::make_random_policy(rng, 5, 2);
  const auto v = testing::direct_policy_value(mdp, pi);
  const auto mean = mean_rollout_return(mdp, pi, 0, 60, 20000, 9, RolloutMode::kStochastic);
  // Rewards in [0, 1], gamma 0.5: per-episode spread <= 2, so 20000 episodes
  // put the standard error near 0.007.
  CHECK(std::fabs(mean.discounted_return - v[0]) < 0.04);
  const auto again = mean_rollout_return(mdp, pi, 0, 60, 20000, 9, RolloutMode::kStochastic);
  CHECK(again.discounted_return == mean.discounted_return);
}

TEST_CASE("validation of MDP and policy inputs") {
  CHECK_THROWS_AS(TabularMdp(1, 1, {0.5}, {0.0}, 0.9, {0}, 0), InvalidArgument);
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0}, {0.0}, 1.0, {0}, 0), InvalidArgument);
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0}, {0.0}, -0.1, {0}, 0), InvalidArgument);
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0}, {0.0}, 0.9, {0}, 1), InvalidArgument);
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0}, {NAN}, 0.9, {0}, 0), InvalidArgument);
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0}, {1.0}, 0.9, {1}, 0), InvalidArgument);  // terminal pays
  CHECK_THROWS_AS(TabularMdp(2, 1, {0.0, 1.0, 0.0, 1.0}, {0.0, 0.0}, 0.9, {1, 0}, 0),
                  InvalidArgument);  // terminal leaks
  CHECK_THROWS_AS(TabularMdp(1, 1, {1.0, 0.0}, {0.0}, 0.9, {0}, 0), InvalidArgument);
  CHECK_THROWS_AS(Policy(1, 2, {0.7, 0.7}), InvalidArgument);
  CHECK_THROWS_AS(Policy(1, 2, {1.5, -0.5}), InvalidArgument);
  CHECK_THROWS_AS(exact_policy_evaluation(single_state(1.0, 0.9), Policy::uniform(2, 1), 1e-9),
                  InvalidArgument);
  CHECK_THROWS_AS(exact_policy_evaluation(single_state(1.0, 0.9), Policy::uniform(1, 1), 0.0),
                  InvalidArgument);
}

TEST_CASE("overflowing values raise NumericFailure") {
  const auto mdp = single_state(1e307, 0.99);
  CHECK_THROWS_AS(exact_policy_evaluation(mdp, Policy::uniform(1, 1), 1e-6), NumericFailure);
  CHECK_THROWS_AS(value_iteration(mdp, 1e-6), NumericFailure);
}

TEST_CASE("iteration cap formula") {
  // ceil(log(1e-10 * 0.1 / 1) / log 0.9) + 100 = ceil(240.4...) + 100
  CHECK(iteration_cap(0.9, 1e-10, 1.0) == 241 + 100);
  CHECK(iteration_cap(0.0, 1e-10, 1.0) >= 1);
  CHECK(iteration_cap(0.9, 1e-10, 0.0) >= 1);
}
