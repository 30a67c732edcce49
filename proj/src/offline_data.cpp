#include "cpi/offline_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

#include "cpi/rng.hpp"

namespace cpi::data {

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::vector<Transition> transitions,
                 std::vector<std::size_t> trajectory_starts,
                 nlohmann::json provenance)
    : transitions_(std::move(transitions)),
      starts_(std::move(trajectory_starts)),
      provenance_(std::move(provenance)) {
  if (transitions_.empty()) {
    if (!starts_.empty()) throw InvalidArgument("empty dataset cannot have trajectories");
    return;
  }
  if (starts_.empty() || starts_.front() != 0) {
    throw InvalidArgument("trajectory_starts must begin at 0");
  }
  for (std::size_t i = 1; i < starts_.size(); ++i) {
    if (starts_[i] <= starts_[i - 1]) {
      throw InvalidArgument("trajectory_starts must be strictly increasing");
    }
  }
  if (starts_.back() >= transitions_.size()) {
    throw InvalidArgument("trajectory start beyond the last transition");
  }
}

std::span<const Transition> Dataset::trajectory(std::size_t i) const {
  const std::size_t begin = starts_.at(i);
  const std::size_t end = i + 1 < starts_.size() ? starts_[i + 1] : transitions_.size();
  return {transitions_.data() + begin, end - begin};
}

std::vector<TrajectorySummary> Dataset::summaries() const {
  std::vector<TrajectorySummary> out;
  out.reserve(starts_.size());
  for (std::size_t i = 0; i < starts_.size(); ++i) {
    const auto traj = trajectory(i);
    double ret = 0.0;
    for (const Transition& t : traj) ret += t.r;
    out.push_back({starts_[i], traj.size(), ret});
  }
  return out;
}

void Dataset::validate(std::size_t n_states, std::size_t n_actions,
                       const TabularMdp* mdp) const {
  for (std::size_t i = 0; i < transitions_.size(); ++i) {
    const Transition& t = transitions_[i];
    if (t.s >= n_states || t.s_next >= n_states || t.a >= n_actions) {
      throw InvalidArgument("transition " + std::to_string(i) + " index out of range");
    }
    if (mdp != nullptr && t.done != mdp->is_terminal(t.s_next)) {
      throw InvalidArgument("transition " + std::to_string(i) +
                            ": done flag disagrees with the terminal mask");
    }
  }
  for (std::size_t k = 0; k < starts_.size(); ++k) {
    const auto traj = trajectory(k);
    for (std::size_t j = 1; j < traj.size(); ++j) {
      if (traj[j].s != traj[j - 1].s_next) {
        throw InvalidArgument("trajectory " + std::to_string(k) +
                              " is not contiguous at step " + std::to_string(j));
      }
    }
  }
}

Dataset concat(const Dataset& a, const Dataset& b) {
  std::vector<Transition> ts = a.transitions();
  ts.insert(ts.end(), b.transitions().begin(), b.transitions().end());
  std::vector<std::size_t> starts = a.trajectory_starts();
  for (std::size_t s : b.trajectory_starts()) starts.push_back(s + a.size());
  nlohmann::json prov{{"concat", nlohmann::json::array({a.provenance(), b.provenance()})}};
  return Dataset(std::move(ts), std::move(starts), std::move(prov));
}

// ---------------------------------------------------------------------------
// Behavior and collection

std::optional<BehaviorKind> parse_behavior(const std::string& name) {
  if (name == "inferior") return BehaviorKind::kInferior;
  if (name == "uniform" || name == "random") return BehaviorKind::kUniform;
  if (name == "expert") return BehaviorKind::kExpert;
  if (name == "custom") return BehaviorKind::kCustom;
  return std::nullopt;
}

std::string to_string(BehaviorKind kind) {
  switch (kind) {
    case BehaviorKind::kInferior: return "inferior";
    case BehaviorKind::kUniform: return "uniform";
    case BehaviorKind::kExpert: return "expert";
    case BehaviorKind::kCustom: return "custom";
  }
  return "unknown";
}

Policy make_behavior_policy(BehaviorKind kind, const TabularMdp& mdp,
                            std::span<const double> custom_probs) {
  const std::size_t ns = mdp.n_states();
  const std::size_t na = mdp.n_actions();
  auto repeat_row = [&](std::span<const double> row) {
    std::vector<double> probs;
    probs.reserve(ns * na);
    for (StateIndex s = 0; s < ns; ++s) probs.insert(probs.end(), row.begin(), row.end());
    return Policy(ns, na, std::move(probs));
  };
  switch (kind) {
    case BehaviorKind::kInferior:
      if (na != kInferiorProbs.size()) {
        throw InvalidArgument("the inferior behavior needs exactly 4 actions");
      }
      return repeat_row(kInferiorProbs);
    case BehaviorKind::kUniform:
      return Policy::uniform(ns, na);
    case BehaviorKind::kExpert:
      return value_iteration(mdp, 1e-10).policy;
    case BehaviorKind::kCustom: {
      if (custom_probs.size() != na) {
        throw InvalidArgument("custom behavior needs one probability per action");
      }
      double total = 0.0;
      for (double p : custom_probs) {
        if (!(p >= 0.0)) throw InvalidArgument("custom probabilities must be nonnegative");
        total += p;
      }
      if (std::fabs(total - 1.0) > Policy::kRowTolerance) {
        throw InvalidArgument("custom probabilities must sum to 1");
      }
      return repeat_row(custom_probs);
    }
  }
  throw InvalidArgument("unknown behavior kind");
}

std::optional<Restart> parse_restart(const std::string& name) {
  if (name == "fixed" || name == "fixed-start") return Restart::kFixedStart;
  if (name == "random" || name == "random-restart") return Restart::kRandomRestart;
  return std::nullopt;
}

std::string to_string(Restart restart) {
  return restart == Restart::kFixedStart ? "fixed-start" : "random-restart";
}

Dataset collect(const TabularMdp& mdp, const Policy& behavior,
                std::size_t n_transitions, std::size_t episode_cap,
                Restart restart, std::uint64_t rng_seed,
                std::span<const StateIndex> restart_states) {
  check_shape(mdp, behavior);
  if (n_transitions == 0) throw InvalidArgument("n_transitions must be at least 1");
  if (episode_cap == 0) throw InvalidArgument("episode_cap must be at least 1");

  std::vector<StateIndex> starts(restart_states.begin(), restart_states.end());
  if (starts.empty()) {
    for (StateIndex s = 0; s < mdp.n_states(); ++s) {
      if (!mdp.is_terminal(s)) starts.push_back(s);
    }
  }
  if (restart == Restart::kRandomRestart && starts.empty()) {
    throw InvalidArgument("no admissible restart state");
  }
  if (mdp.is_terminal(mdp.start_state()) && restart == Restart::kFixedStart) {
    throw InvalidArgument("start state is terminal");
  }

  Rng rng(rng_seed);
  std::vector<Transition> ts;
  ts.reserve(n_transitions + episode_cap);
  std::vector<std::size_t> traj_starts;
  while (ts.size() < n_transitions) {
    StateIndex s = restart == Restart::kFixedStart ? mdp.start_state()
                                                   : starts[rng.index(starts.size())];
    traj_starts.push_back(ts.size());
    for (std::size_t step = 0; step < episode_cap; ++step) {
      const ActionIndex a = rng.categorical(behavior.row(s));
      const StateIndex next = rng.categorical(mdp.transition_row(s, a));
      const bool done = mdp.is_terminal(next);
      ts.push_back({s, a, mdp.reward(s, a), next, done});
      if (done) break;
      s = next;
    }
  }
  ts.resize(n_transitions);
  while (!traj_starts.empty() && traj_starts.back() >= n_transitions) traj_starts.pop_back();

  nlohmann::json prov{{"n_transitions", n_transitions},
                      {"episode_cap", episode_cap},
                      {"restart", to_string(restart)},
                      {"seed", rng_seed}};
  return Dataset(std::move(ts), std::move(traj_starts), std::move(prov));
}

Dataset bootstrap_resample(const Dataset& dataset, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  const std::size_t n = dataset.size();
  std::vector<Transition> ts;
  ts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ts.push_back(dataset.transitions()[rng.index(n)]);
  std::vector<std::size_t> starts(n);
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  nlohmann::json prov{{"bootstrap_of", dataset.provenance()}, {"seed", rng_seed}};
  return Dataset(std::move(ts), std::move(starts), std::move(prov));
}

// ---------------------------------------------------------------------------
// Filters

Dataset missing_action_filter(const Dataset& dataset,
                              std::span<const StateIndex> region,
                              ActionIndex action) {
  std::vector<StateIndex> sorted(region.begin(), region.end());
  std::sort(sorted.begin(), sorted.end());
  auto removed = [&](const Transition& t) {
    return t.a == action && std::binary_search(sorted.begin(), sorted.end(), t.s);
  };

  std::vector<Transition> ts;
  std::vector<std::size_t> starts;
  for (std::size_t k = 0; k < dataset.trajectory_count(); ++k) {
    bool open = false;
    for (const Transition& t : dataset.trajectory(k)) {
      if (removed(t)) {
        open = false;
        continue;
      }
      if (!open) {
        starts.push_back(ts.size());
        open = true;
      }
      ts.push_back(t);
    }
  }
  nlohmann::json prov = dataset.provenance();
  prov["filters"].push_back({{"missing_action", action}, {"region_size", sorted.size()}});
  return Dataset(std::move(ts), std::move(starts), std::move(prov));
}

std::optional<Band> parse_band(const std::string& name) {
  if (name == "top") return Band::kTop;
  if (name == "median") return Band::kMedian;
  if (name == "bottom") return Band::kBottom;
  return std::nullopt;
}

std::string to_string(Band band) {
  switch (band) {
    case Band::kTop: return "top";
    case Band::kMedian: return "median";
    case Band::kBottom: return "bottom";
  }
  return "unknown";
}

std::size_t band_size(double fraction, std::size_t total) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("fraction must lie in (0, 1]");
  }
  // The relative slack absorbs representation error such as 0.05 * 100.
  const double exact = fraction * static_cast<double>(total);
  const auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(k, std::min<std::size_t>(1, total), total);
}

Dataset percentile_filter(const Dataset& dataset, Band band, double fraction) {
  const std::size_t total = dataset.trajectory_count();
  if (total == 0) throw InvalidArgument("percentile filter needs at least one trajectory");
  const std::size_t k = band_size(fraction, total);

  const auto summaries = dataset.summaries();
  std::vector<std::size_t> rank(total);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t x, std::size_t y) {
    return summaries[x].undiscounted_return > summaries[y].undiscounted_return;
  });

  std::size_t first = 0;
  switch (band) {
    case Band::kTop: first = 0; break;
    case Band::kBottom: first = total - k; break;
    case Band::kMedian: {
      const std::size_t centre = total / 2;
      first = centre >= k / 2 ? centre - k / 2 : 0;
      first = std::min(first, total - k);
      break;
    }
  }
  std::vector<std::size_t> keep(rank.begin() + static_cast<std::ptrdiff_t>(first),
                                rank.begin() + static_cast<std::ptrdiff_t>(first + k));
  std::sort(keep.begin(), keep.end());

  std::vector<Transition> ts;
  std::vector<std::size_t> starts;
  for (std::size_t idx : keep) {
    starts.push_back(ts.size());
    const auto traj = dataset.trajectory(idx);
    ts.insert(ts.end(), traj.begin(), traj.end());
  }
  nlohmann::json prov = dataset.provenance();
  prov["filters"].push_back({{"percentile", to_string(band)}, {"fraction", fraction}});
  return Dataset(std::move(ts), std::move(starts), std::move(prov));
}

// ---------------------------------------------------------------------------
// Empirical estimates

SupportMask empirical_support(const Dataset& dataset, std::size_t n_states,
                              std::size_t n_actions) {
  std::vector<std::uint8_t> allowed(n_states * n_actions, 0);
  for (const Transition& t : dataset.transitions()) {
    if (t.s >= n_states || t.a >= n_actions) {
      throw InvalidArgument("dataset index out of range for support mask");
    }
    allowed[t.s * n_actions + t.a] = 1;
  }
  return SupportMask(n_states, n_actions, std::move(allowed));
}

BehaviorEstimate::BehaviorEstimate(const Dataset& dataset, std::size_t n_states,
                                   std::size_t n_actions)
    : n_states_(n_states),
      n_actions_(n_actions),
      counts_(n_states * n_actions, 0),
      state_counts_(n_states, 0) {
  for (const Transition& t : dataset.transitions()) {
    if (t.s >= n_states || t.a >= n_actions) {
      throw InvalidArgument("dataset index out of range for behavior estimate");
    }
    ++counts_[t.s * n_actions + t.a];
    ++state_counts_[t.s];
  }
}

double BehaviorEstimate::prob(StateIndex s, ActionIndex a, Smoothing smoothing) const {
  if (state_counts_[s] == 0) {
    if (smoothing == Smoothing::kNone) {
      throw DegenerateSupport(s, "behavior estimate queried at an unvisited state");
    }
    return 1.0 / static_cast<double>(n_actions_);
  }
  return static_cast<double>(count(s, a)) / static_cast<double>(state_counts_[s]);
}

Policy BehaviorEstimate::policy(Smoothing smoothing) const {
  std::vector<double> probs(n_states_ * n_actions_);
  for (StateIndex s = 0; s < n_states_; ++s) {
    for (ActionIndex a = 0; a < n_actions_; ++a) {
      probs[s * n_actions_ + a] = prob(s, a, smoothing);
    }
  }
  return Policy(n_states_, n_actions_, std::move(probs));
}

Policy empirical_behavior_policy(const Dataset& dataset, std::size_t n_states,
                                 std::size_t n_actions, Smoothing smoothing) {
  return BehaviorEstimate(dataset, n_states, n_actions).policy(smoothing);
}

TabularMdp empirical_mdp(const Dataset& dataset, const TabularMdp& template_mdp,
                         const EmpiricalModelOptions& options) {
  const std::size_t ns = template_mdp.n_states();
  const std::size_t na = template_mdp.n_actions();
  std::vector<double> next_counts(ns * na * ns, 0.0);
  std::vector<double> reward_sums(ns * na, 0.0);
  std::vector<std::size_t> pair_counts(ns * na, 0);
  for (const Transition& t : dataset.transitions()) {
    if (t.s >= ns || t.a >= na || t.s_next >= ns) {
      throw InvalidArgument("dataset index out of range for the template MDP");
    }
    const std::size_t pair = t.s * na + t.a;
    next_counts[pair * ns + t.s_next] += 1.0;
    reward_sums[pair] += t.r;
    ++pair_counts[pair];
  }

  const double pessimistic =
      options.unobserved_reward.value_or(template_mdp.reward_range().first);
  std::vector<double> transition(ns * na * ns, 0.0);
  std::vector<double> reward(ns * na, 0.0);
  for (StateIndex s = 0; s < ns; ++s) {
    for (ActionIndex a = 0; a < na; ++a) {
      const std::size_t pair = s * na + a;
      double* row = transition.data() + pair * ns;
      if (template_mdp.is_terminal(s)) {
        row[s] = 1.0;
        continue;
      }
      if (pair_counts[pair] == 0) {
        row[s] = 1.0;
        reward[pair] = pessimistic;
        continue;
      }
      const double n = static_cast<double>(pair_counts[pair]);
      for (StateIndex t = 0; t < ns; ++t) row[t] = next_counts[pair * ns + t] / n;
      reward[pair] = reward_sums[pair] / n;
    }
  }
  std::vector<std::uint8_t> terminal(template_mdp.terminal_mask().begin(),
                                     template_mdp.terminal_mask().end());
  return TabularMdp(ns, na, std::move(transition), std::move(reward),
                    template_mdp.discount(), std::move(terminal),
                    template_mdp.start_state());
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_jsonl(const Dataset& dataset, std::size_t n_states,
                 std::size_t n_actions, std::ostream& out) {
  nlohmann::json header{{"n_states", n_states},
                        {"n_actions", n_actions},
                        {"n_transitions", dataset.size()},
                        {"trajectory_starts", dataset.trajectory_starts()},
                        {"provenance", dataset.provenance()}};
  out << nlohmann::json{{"header", header}}.dump() << '\n';
  for (const Transition& t : dataset.transitions()) {
    out << "{\"s\":" << t.s << ",\"a\":" << t.a << ",\"r\":" << format_double(t.r)
        << ",\"s_next\":" << t.s_next << ",\"done\":" << (t.done ? "true" : "false")
        << "}\n";
  }
}

void write_jsonl(const Dataset& dataset, std::size_t n_states,
                 std::size_t n_actions, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  write_jsonl(dataset, n_states, n_actions, out);
}

LoadedDataset read_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("dataset file is empty");
  LoadedDataset out;
  try {
    const auto first = nlohmann::json::parse(line);
    const auto& header = first.at("header");
    out.n_states = header.at("n_states").get<std::size_t>();
    out.n_actions = header.at("n_actions").get<std::size_t>();
    auto starts = header.at("trajectory_starts").get<std::vector<std::size_t>>();
    std::vector<Transition> ts;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      ts.push_back({j.at("s").get<StateIndex>(), j.at("a").get<ActionIndex>(),
                    j.at("r").get<double>(), j.at("s_next").get<StateIndex>(),
                    j.at("done").get<bool>()});
    }
    if (header.contains("n_transitions") &&
        header["n_transitions"].get<std::size_t>() != ts.size()) {
      throw InvalidArgument("dataset header announces a different transition count");
    }
    out.dataset = Dataset(std::move(ts), std::move(starts),
                          header.value("provenance", nlohmann::json::object()));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed dataset file: ") + e.what());
  }
  out.dataset.validate(out.n_states, out.n_actions);
  return out;
}

LoadedDataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open dataset '" + path + "'");
  return read_jsonl(in);
}

void write_csv(const Dataset& dataset, std::ostream& out) {
  out << "s,a,r,s_next,done\n";
  for (const Transition& t : dataset.transitions()) {
    out << t.s << ',' << t.a << ',' << format_double(t.r) << ',' << t.s_next << ','
        << (t.done ? 1 : 0) << '\n';
  }
}

}  // namespace cpi::data
