#include "cpi/envs.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>

namespace cpi::envs {

namespace {

constexpr std::array<int, kNumActions> kRowDelta = {-1, 1, 0, 0};
constexpr std::array<int, kNumActions> kColDelta = {0, 0, 1, -1};

}  // namespace

std::optional<ActionIndex> parse_action(const std::string& name) {
  for (ActionIndex a = 0; a < kNumActions; ++a) {
    if (name == kActionNames[a]) return a;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// GridSpec

void GridSpec::validate() const {
  if (width <= 0 || height <= 0) throw InvalidSpec("grid dimensions must be positive");
  auto inside = [&](Cell c) {
    return c.row >= 0 && c.row < height && c.col >= 0 && c.col < width;
  };
  if (!inside(start) || !inside(goal)) throw InvalidSpec("start/goal outside the grid");
  if (start == goal) throw InvalidSpec("start and goal coincide");
  for (const Cell& w : walls) {
    if (!inside(w)) throw InvalidSpec("wall outside the grid");
    if (w == start || w == goal) throw InvalidSpec("start or goal is a wall");
  }
  if (!GridLayout(*this).bfs_distance(start, goal)) {
    throw InvalidSpec("goal is not reachable from start");
  }
}

GridSpec GridSpec::grid7x7() {
  GridSpec spec;
  spec.width = 7;
  spec.height = 7;
  spec.start = {6, 0};
  spec.goal = {0, 6};
  return spec;
}

GridSpec GridSpec::four_room() {
  // '#' wall, '.' open; doorways at (2,5), (9,5), (5,1), (6,8).
  static constexpr std::array<const char*, 11> kMap = {
      ".....#.....",  //
      ".....#.....",  //
      "...........",  //
      ".....#.....",  //
      ".....#.....",  //
      "#.####.....",  //
      ".....###.##",  //
      ".....#.....",  //
      ".....#.....",  //
      "...........",  //
      ".....#.....",  //
  };
  GridSpec spec;
  spec.width = 11;
  spec.height = 11;
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) {
      if (kMap[r][c] == '#') spec.walls.push_back({r, c});
    }
  }
  spec.start = {10, 0};
  spec.goal = {0, 10};
  return spec;
}

void to_json(nlohmann::json& j, const Cell& c) { j = nlohmann::json::array({c.row, c.col}); }

void from_json(const nlohmann::json& j, Cell& c) {
  if (!j.is_array() || j.size() != 2) {
    throw InvalidSpec("a cell must be a [row, col] pair");
  }
  c.row = j.at(0).get<int>();
  c.col = j.at(1).get<int>();
}

void to_json(nlohmann::json& j, const GridSpec& spec) {
  j = nlohmann::json{{"width", spec.width},
                     {"height", spec.height},
                     {"walls", spec.walls},
                     {"start", spec.start},
                     {"goal", spec.goal},
                     {"step_reward", spec.step_reward},
                     {"goal_reward", spec.goal_reward}};
}

void from_json(const nlohmann::json& j, GridSpec& spec) {
  try {
    spec.width = j.at("width").get<int>();
    spec.height = j.at("height").get<int>();
    spec.walls = j.value("walls", std::vector<Cell>{});
    spec.start = j.at("start").get<Cell>();
    spec.goal = j.at("goal").get<Cell>();
    spec.step_reward = j.value("step_reward", -1.0);
    spec.goal_reward = j.value("goal_reward", 100.0);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidSpec(std::string("malformed grid spec: ") + e.what());
  }
}

GridSpec load_grid_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidSpec("cannot open grid spec '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidSpec("grid spec '" + path + "' is not valid JSON: " + e.what());
  }
  GridSpec spec = j.get<GridSpec>();
  spec.validate();
  return spec;
}

void save_grid_spec(const GridSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << nlohmann::json(spec).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// GridLayout

GridLayout::GridLayout(const GridSpec& spec)
    : spec_(spec),
      index_(static_cast<std::size_t>(std::max(spec.width, 0) *
                                      std::max(spec.height, 0)),
             0) {
  for (const Cell& w : spec_.walls) {
    if (in_bounds(w)) index_[w.row * spec_.width + w.col] = -1;
  }
  for (int r = 0; r < spec_.height; ++r) {
    for (int c = 0; c < spec_.width; ++c) {
      long& slot = index_[r * spec_.width + c];
      if (slot == -1) continue;
      slot = static_cast<long>(cells_.size());
      cells_.push_back({r, c});
    }
  }
}

bool GridLayout::in_bounds(Cell c) const {
  return c.row >= 0 && c.row < spec_.height && c.col >= 0 && c.col < spec_.width;
}

bool GridLayout::is_wall(Cell c) const {
  return in_bounds(c) && index_[c.row * spec_.width + c.col] < 0;
}

std::optional<StateIndex> GridLayout::state_of(Cell c) const {
  if (!in_bounds(c)) return std::nullopt;
  const long i = index_[c.row * spec_.width + c.col];
  if (i < 0) return std::nullopt;
  return static_cast<StateIndex>(i);
}

Cell GridLayout::move(Cell from, ActionIndex a) const {
  const Cell to{from.row + kRowDelta[a], from.col + kColDelta[a]};
  if (!in_bounds(to) || is_wall(to)) return from;
  return to;
}

std::optional<int> GridLayout::bfs_distance(Cell from, Cell to) const {
  if (!state_of(from) || !state_of(to)) return std::nullopt;
  std::vector<int> dist(cells_.size(), -1);
  std::deque<StateIndex> frontier;
  dist[*state_of(from)] = 0;
  frontier.push_back(*state_of(from));
  while (!frontier.empty()) {
    const StateIndex s = frontier.front();
    frontier.pop_front();
    if (cells_[s] == to) return dist[s];
    for (ActionIndex a = 0; a < kNumActions; ++a) {
      const StateIndex t = *state_of(move(cells_[s], a));
      if (dist[t] < 0) {
        dist[t] = dist[s] + 1;
        frontier.push_back(t);
      }
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Builders

TabularMdp build_gridworld(const GridSpec& spec, double discount) {
  spec.validate();
  const GridLayout layout(spec);
  const std::size_t ns = layout.n_states();
  const std::size_t na = kNumActions;
  const StateIndex terminal = layout.terminal_state();

  std::vector<double> transition(ns * na * ns, 0.0);
  std::vector<double> reward(ns * na, 0.0);
  std::vector<std::uint8_t> terminal_mask(ns, 0);
  terminal_mask[terminal] = 1;

  for (StateIndex s = 0; s < ns; ++s) {
    for (ActionIndex a = 0; a < na; ++a) {
      double* row = transition.data() + (s * na + a) * ns;
      if (s == terminal) {
        row[terminal] = 1.0;
        continue;
      }
      const Cell to = layout.move(layout.cell_of(s), a);
      if (to == spec.goal) {
        row[terminal] = 1.0;
        reward[s * na + a] = spec.goal_reward +
                             (kGoalStepPaysStepReward ? spec.step_reward : 0.0);
      } else {
        row[*layout.state_of(to)] = 1.0;
        reward[s * na + a] = spec.step_reward;
      }
    }
  }
  return TabularMdp(ns, na, std::move(transition), std::move(reward), discount,
                    std::move(terminal_mask), layout.start_state());
}

std::array<Region, 4> four_room_regions(const GridSpec& spec) {
  const GridLayout layout(spec);
  auto is_door = [&](Cell c) {
    auto wall = [&](int dr, int dc) { return layout.is_wall({c.row + dr, c.col + dc}); };
    return (wall(-1, 0) && wall(1, 0)) || (wall(0, -1) && wall(0, 1));
  };

  std::vector<int> component(layout.n_cells(), -1);
  std::vector<std::vector<StateIndex>> members;
  for (StateIndex s = 0; s < layout.n_cells(); ++s) {
    if (component[s] >= 0 || is_door(layout.cell_of(s))) continue;
    const int id = static_cast<int>(members.size());
    members.emplace_back();
    std::deque<StateIndex> frontier{s};
    component[s] = id;
    while (!frontier.empty()) {
      const StateIndex u = frontier.front();
      frontier.pop_front();
      members[id].push_back(u);
      for (ActionIndex a = 0; a < kNumActions; ++a) {
        const Cell next = layout.move(layout.cell_of(u), a);
        const StateIndex v = *layout.state_of(next);
        if (component[v] < 0 && !is_door(next)) {
          component[v] = id;
          frontier.push_back(v);
        }
      }
    }
  }
  if (members.size() != 4) {
    throw InvalidSpec("layout has " + std::to_string(members.size()) +
                      " rooms, expected 4");
  }

  std::array<Region, 4> rooms;
  std::array<bool, 4> filled{};
  for (auto& states : members) {
    std::sort(states.begin(), states.end());
    // Row-major indexing makes states.front() the room's top-left cell.
    const Cell first = layout.cell_of(states.front());
    const bool upper = 2 * first.row < spec.height;
    const bool left = 2 * first.col < spec.width;
    const std::size_t slot = (upper ? 0 : 2) + (left ? 0 : 1);
    if (filled[slot]) throw InvalidSpec("two rooms share a quadrant");
    filled[slot] = true;
    static constexpr std::array<const char*, 4> kNames = {
        "upper-left", "upper-right", "lower-left", "lower-right"};
    rooms[slot] = Region{kNames[slot], std::move(states)};
  }
  return rooms;
}

FourRoom build_four_room(double discount) {
  GridSpec spec = GridSpec::four_room();
  TabularMdp mdp = build_gridworld(spec, discount);
  auto rooms = four_room_regions(spec);
  return FourRoom{std::move(spec), std::move(mdp), std::move(rooms)};
}

std::vector<StateIndex> region_states(const TabularMdp& mdp, const Region& region) {
  std::vector<StateIndex> out;
  for (StateIndex s : region.states) {
    if (s < mdp.n_states() && !mdp.is_terminal(s)) out.push_back(s);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Region whole_grid_region(const GridSpec& spec) {
  const GridLayout layout(spec);
  Region r{"all", {}};
  r.states.resize(layout.n_cells());
  for (StateIndex s = 0; s < layout.n_cells(); ++s) r.states[s] = s;
  return r;
}

}  // namespace cpi::envs
