#pragma once

// Deterministic gridworld builders.
//
// State indexing: every non-wall cell gets a state in row-major order
// (row 0 is the top row), followed by one absorbing terminal state. The goal
// cell keeps its own index but is never occupied: stepping onto it pays
// goal_reward and lands in the terminal.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "cpi/mdp.hpp"

namespace cpi::envs {

enum Action : ActionIndex { kUp = 0, kDown = 1, kRight = 2, kLeft = 3 };
inline constexpr std::size_t kNumActions = 4;
inline constexpr std::array<const char*, kNumActions> kActionNames = {
    "up", "down", "right", "left"};

std::optional<ActionIndex> parse_action(const std::string& name);

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// The step INTO the goal pays goal_reward only (not goal_reward plus
/// step_reward).
inline constexpr bool kGoalStepPaysStepReward = false;

struct GridSpec {
  int width = 0;
  int height = 0;
  std::vector<Cell> walls;
  Cell start;
  Cell goal;
  double step_reward = -1.0;
  double goal_reward = 100.0;

  /// Throws InvalidSpec on bad dimensions, overlapping start/goal/walls or an
  /// unreachable goal.
  void validate() const;

  /// Wall-free 7x7, start bottom-left, goal upper-right.
  static GridSpec grid7x7();
  /// Classic 11x11 four-room layout: a vertical wall at column 5 and two
  /// half-walls (row 5 on the left, row 6 on the right), one doorway each.
  static GridSpec four_room();
};

void to_json(nlohmann::json& j, const Cell& c);
void from_json(const nlohmann::json& j, Cell& c);
void to_json(nlohmann::json& j, const GridSpec& spec);
void from_json(const nlohmann::json& j, GridSpec& spec);

GridSpec load_grid_spec(const std::string& path);
void save_grid_spec(const GridSpec& spec, const std::string& path);

/// Cell <-> state bookkeeping for one built grid.
class GridLayout {
 public:
  explicit GridLayout(const GridSpec& spec);

  const GridSpec& spec() const { return spec_; }
  std::size_t n_cells() const { return cells_.size(); }
  /// n_cells + 1 (the absorbing terminal).
  std::size_t n_states() const { return cells_.size() + 1; }
  StateIndex terminal_state() const { return cells_.size(); }
  StateIndex start_state() const { return state_of(spec_.start).value(); }
  StateIndex goal_state() const { return state_of(spec_.goal).value(); }

  bool in_bounds(Cell c) const;
  bool is_wall(Cell c) const;
  std::optional<StateIndex> state_of(Cell c) const;
  Cell cell_of(StateIndex s) const { return cells_.at(s); }
  /// Destination cell of a move (bumps keep the cell).
  Cell move(Cell from, ActionIndex a) const;
  /// Shortest number of moves from start to goal, or nullopt.
  std::optional<int> bfs_distance(Cell from, Cell to) const;

 private:
  GridSpec spec_;
  std::vector<Cell> cells_;
  std::vector<long> index_;  // per grid cell, -1 for walls
};

/// Deterministic MDP for the grid. Throws InvalidSpec when invalid.
TabularMdp build_gridworld(const GridSpec& spec, double discount);

/// A named set of states.
struct Region {
  std::string name;
  std::vector<StateIndex> states;  // sorted, unique
};

struct FourRoom {
  GridSpec spec;
  TabularMdp mdp;
  /// upper-left, upper-right, lower-left, lower-right.
  std::array<Region, 4> rooms;
};

FourRoom build_four_room(double discount);

/// The four rooms of a four-room-style spec: connected components of the
/// open cells once doorways are removed, named by the quadrant of their
/// top-left cell. Doorways are open cells with walls on two opposite sides.
std::array<Region, 4> four_room_regions(const GridSpec& spec);

/// Sorted, de-duplicated state indices of `region`, restricted to valid
/// non-terminal states of `mdp`.
std::vector<StateIndex> region_states(const TabularMdp& mdp,
                                      const Region& region);

/// Region of all open cells.
Region whole_grid_region(const GridSpec& spec);

}  // namespace cpi::envs
