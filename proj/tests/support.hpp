#pragma once

// Independent oracles and generators shared by the unit tests. Nothing here
// calls the library's solvers: values come from dense Gaussian elimination,
// exhaustive enumeration, or a breadth-first search written from the grid
// description alone.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cpi/envs.hpp"
#include "cpi/mdp.hpp"
#include "cpi/rng.hpp"

namespace testing {

using cpi::ActionIndex;
using cpi::Policy;
using cpi::Rng;
using cpi::StateIndex;
using cpi::TabularMdp;

// Solves A x = b with partial pivoting; A is n x n row-major.
inline std::vector<double> dense_solve(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::fabs(a[r * n + col]) > std::fabs(a[piv * n + col])) piv = r;
    }
    if (a[piv * n + col] == 0.0) throw std::runtime_error("singular system");
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = b[i];
    for (std::size_t c = i + 1; c < n; ++c) acc -= a[i * n + c] * x[c];
    x[i] = acc / a[i * n + i];
  }
  return x;
}

// V^pi from (I - gamma P^pi) V = r^pi.
inline std::vector<double> direct_policy_value(const TabularMdp& mdp, const Policy& pi) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  std::vector<double> a(ns * ns, 0.0);
  std::vector<double> r(ns, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    a[s * ns + s] = 1.0;
    for (ActionIndex act = 0; act < na; ++act) {
      const double p = pi(s, act);
      if (p == 0.0) continue;
      r[s] += p * mdp.reward(s, act);
      const auto row = mdp.transition_row(s, act);
      for (StateIndex t = 0; t < ns; ++t) a[s * ns + t] -= mdp.discount() * p * row[t];
    }
  }
  return dense_solve(std::move(a), std::move(r));
}

// Elementwise max of V^pi over every deterministic policy whose actions are
// allowed (allowed == nullptr: all). Feasible only for tiny MDPs.
inline std::vector<double> brute_force_optimal_value(
    const TabularMdp& mdp, const std::vector<std::vector<ActionIndex>>* allowed = nullptr) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  std::vector<std::vector<ActionIndex>> choices(ns);
  for (StateIndex s = 0; s < ns; ++s) {
    if (allowed != nullptr && !(*allowed)[s].empty()) {
      choices[s] = (*allowed)[s];
    } else {
      for (ActionIndex a = 0; a < na; ++a) choices[s].push_back(a);
    }
  }
  std::vector<std::size_t> idx(ns, 0);
  std::vector<double> best(ns, -INFINITY);
  while (true) {
    std::vector<ActionIndex> acts(ns);
    for (StateIndex s = 0; s < ns; ++s) acts[s] = choices[s][idx[s]];
    const auto v = direct_policy_value(mdp, Policy::deterministic(acts, na));
    for (StateIndex s = 0; s < ns; ++s) best[s] = std::max(best[s], v[s]);
    std::size_t k = 0;
    while (k < ns && ++idx[k] == choices[k].size()) idx[k++] = 0;
    if (k == ns) break;
  }
  return best;
}

// Shortest number of moves between two cells, from the spec alone.
inline std::optional<int> grid_bfs(const cpi::envs::GridSpec& spec, cpi::envs::Cell from,
                                   cpi::envs::Cell to) {
  auto blocked = [&](int r, int c) {
    if (r < 0 || c < 0 || r >= spec.height || c >= spec.width) return true;
    return std::find(spec.walls.begin(), spec.walls.end(), cpi::envs::Cell{r, c}) !=
           spec.walls.end();
  };
  std::vector<int> dist(static_cast<std::size_t>(spec.width * spec.height), -1);
  auto at = [&](int r, int c) -> int& { return dist[static_cast<std::size_t>(r * spec.width + c)]; };
  std::deque<cpi::envs::Cell> queue{from};
  at(from.row, from.col) = 0;
  const int dr[] = {-1, 1, 0, 0};
  const int dc[] = {0, 0, 1, -1};
  while (!queue.empty()) {
    const auto c = queue.front();
    queue.pop_front();
    if (c == to) return at(c.row, c.col);
    for (int k = 0; k < 4; ++k) {
      const int r = c.row + dr[k];
      const int q = c.col + dc[k];
      if (blocked(r, q) || at(r, q) >= 0) continue;
      at(r, q) = at(c.row, c.col) + 1;
      queue.push_back({r, q});
    }
  }
  return std::nullopt;
}

// Return of the shortest path: every move pays step_reward except the last.
inline double shortest_path_return(const cpi::envs::GridSpec& spec) {
  const int moves = grid_bfs(spec, spec.start, spec.goal).value();
  return (moves - 1) * spec.step_reward + spec.goal_reward;
}

// Random MDP with rewards in [lo, hi]; each (s, a) row spreads its mass over
// a random nonempty subset of next states. Optionally the last state is an
// absorbing terminal.
inline TabularMdp make_random_mdp(Rng& rng, std::size_t ns, std::size_t na, double gamma,
                                  double lo = 0.0, double hi = 1.0, bool terminal = false) {
  std::vector<double> p(ns * na * ns, 0.0);
  std::vector<double> r(ns * na, 0.0);
  std::vector<std::uint8_t> mask(ns, 0);
  if (terminal && ns > 0) mask[ns - 1] = 1;
  for (StateIndex s = 0; s < ns; ++s) {
    for (ActionIndex a = 0; a < na; ++a) {
      double* row = p.data() + (s * na + a) * ns;
      if (mask[s]) {
        row[s] = 1.0;
        continue;
      }
      r[s * na + a] = lo + (hi - lo) * rng.uniform();
      double total = 0.0;
      for (StateIndex t = 0; t < ns; ++t) {
        if (rng.uniform() < 0.5) {
          row[t] = rng.uniform() + 1e-3;
          total += row[t];
        }
      }
      if (total == 0.0) {
        row[rng.index(ns)] = 1.0;
        total = 1.0;
      }
      for (StateIndex t = 0; t < ns; ++t) row[t] /= total;
    }
  }
  return TabularMdp(ns, na, std::move(p), std::move(r), gamma, std::move(mask), 0);
}

// Random stochastic policy; entries zeroed with probability zero_prob, at
// least one positive entry per row.
inline Policy make_random_policy(Rng& rng, std::size_t ns, std::size_t na,
                                 double zero_prob = 0.0) {
  std::vector<double> probs(ns * na, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    double total = 0.0;
    for (ActionIndex a = 0; a < na; ++a) {
      if (rng.uniform() >= zero_prob) {
        probs[s * na + a] = rng.uniform() + 1e-3;
        total += probs[s * na + a];
      }
    }
    if (total == 0.0) {
      const ActionIndex keep = rng.index(na);
      probs[s * na + keep] = 1.0;
      total = 1.0;
    }
    for (ActionIndex a = 0; a < na; ++a) probs[s * na + a] /= total;
  }
  return Policy(ns, na, std::move(probs));
}

inline double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace testing
