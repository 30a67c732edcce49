#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "cpi/envs.hpp"
#include "cpi/mdp.hpp"
#include "support.hpp"

using namespace cpi;
using namespace cpi::envs;

namespace {

void check_deterministic(const TabularMdp& mdp) {
  for (StateIndex s = 0; s < mdp.n_states(); ++s) {
    for (ActionIndex a = 0; a < mdp.n_actions(); ++a) {
      const auto row = mdp.transition_row(s, a);
      CHECK(std::count(row.begin(), row.end(), 1.0) == 1);
      CHECK(std::count(row.begin(), row.end(), 0.0) == static_cast<long>(row.size()) - 1);
    }
  }
}

}  // namespace

TEST_CASE("7x7 grid layout and optimum") {
  const auto spec = GridSpec::grid7x7();
  const auto mdp = build_gridworld(spec, 0.9);
  CHECK(mdp.n_states() == 50);
  CHECK(mdp.n_actions() == 4);
  check_deterministic(mdp);
  const GridLayout layout(spec);
  CHECK(mdp.start_state() == layout.start_state());
  CHECK(layout.cell_of(mdp.start_state()) == Cell{6, 0});
  std::size_t terminals = 0;
  for (StateIndex s = 0; s < mdp.n_states(); ++s) terminals += mdp.is_terminal(s);
  CHECK(terminals == 1);
  CHECK(mdp.is_terminal(layout.terminal_state()));

  CHECK(testing::grid_bfs(spec, spec.start, spec.goal).value() == 12);
  CHECK(testing::shortest_path_return(spec) == 89.0);
  const auto opt = value_iteration(mdp, 1e-12);
  CHECK(opt.v(mdp.start_state()) == doctest::Approx(24.519165569900007).epsilon(1e-12));
}

TEST_CASE("moves, bumps and the goal step") {
  const auto spec = GridSpec::grid7x7();
  const GridLayout layout(spec);
  const auto mdp = build_gridworld(spec, 0.9);
  CHECK(layout.move({6, 0}, kUp) == Cell{5, 0});
  CHECK(layout.move({6, 0}, kDown) == Cell{6, 0});
  CHECK(layout.move({6, 0}, kLeft) == Cell{6, 0});
  CHECK(layout.move({6, 0}, kRight) == Cell{6, 1});
  const StateIndex below_goal = layout.state_of({1, 6}).value();
  CHECK(mdp.reward(below_goal, kUp) == 100.0);
  CHECK(mdp.transition_row(below_goal, kUp)[layout.terminal_state()] == 1.0);
  CHECK(mdp.reward(below_goal, kDown) == -1.0);
}

TEST_CASE("two-cell corridor") {
  GridSpec spec;
  spec.width = 2;
  spec.height = 1;
  spec.start = {0, 0};
  spec.goal = {0, 1};
  const auto mdp = build_gridworld(spec, 0.9);
  CHECK(mdp.n_states() == 3);
  const auto opt = value_iteration(mdp, 1e-12);
  CHECK(opt.v(0) == doctest::Approx(100.0));
  CHECK(opt.policy.greedy_action(0) == kRight);
}

TEST_CASE("four-room layout") {
  const auto fr = build_four_room(0.9);
  check_deterministic(fr.mdp);
  CHECK(fr.spec.width == 11);
  CHECK(fr.spec.height == 11);
  CHECK(fr.spec.walls.size() == 17);
  CHECK(testing::grid_bfs(fr.spec, fr.spec.start, fr.spec.goal).value() == 20);
  CHECK(testing::shortest_path_return(fr.spec) == 81.0);
  const auto opt = value_iteration(fr.mdp, 1e-12);
  CHECK(opt.v(fr.mdp.start_state()) == doctest::Approx(4.8593688944029205).epsilon(1e-12));

  CHECK(fr.rooms[0].name == "upper-left");
  CHECK(fr.rooms[1].name == "upper-right");
  CHECK(fr.rooms[2].name == "lower-left");
  CHECK(fr.rooms[3].name == "lower-right");
  CHECK(fr.rooms[0].states.size() == 25);
  CHECK(fr.rooms[1].states.size() == 30);
  CHECK(fr.rooms[2].states.size() == 25);
  CHECK(fr.rooms[3].states.size() == 20);

  // Rooms are disjoint, contain no doorway and no terminal.
  const GridLayout layout(fr.spec);
  std::set<StateIndex> seen;
  for (const auto& room : fr.rooms) {
    CHECK(std::is_sorted(room.states.begin(), room.states.end()));
    for (StateIndex s : room.states) {
      CHECK(seen.insert(s).second);
      CHECK_FALSE(fr.mdp.is_terminal(s));
    }
  }
  // 104 open cells = 100 room cells + 4 doorways.
  CHECK(layout.n_cells() == 104);
  CHECK(seen.size() == 100);
  CHECK(whole_grid_region(fr.spec).states.size() == layout.n_cells());
}

TEST_CASE("transposed grid has the same optimal value") {
  const auto fr = build_four_room(0.9);
  GridSpec t = fr.spec;
  std::swap(t.width, t.height);
  for (auto& w : t.walls) std::swap(w.row, w.col);
  std::swap(t.start.row, t.start.col);
  std::swap(t.goal.row, t.goal.col);
  const auto a = value_iteration(fr.mdp, 1e-12);
  const auto mdp_t = build_gridworld(t, 0.9);
  const auto b = value_iteration(mdp_t, 1e-12);
  CHECK(a.v(fr.mdp.start_state()) == doctest::Approx(b.v(mdp_t.start_state())).epsilon(1e-12));
}

TEST_CASE("grid spec JSON round trip and shipped files") {
  for (const auto& spec : {GridSpec::grid7x7(), GridSpec::four_room()}) {
    nlohmann::json j = spec;
    const GridSpec back = j.get<GridSpec>();
    CHECK(back.width == spec.width);
    CHECK(back.walls == spec.walls);
    CHECK(back.start == spec.start);
    CHECK(back.goal == spec.goal);
    CHECK(back.goal_reward == spec.goal_reward);
  }
  const auto g = load_grid_spec(std::string(CPI_DATA_DIR) + "/grid7x7.json");
  CHECK(g.walls.empty());
  CHECK(g.start == GridSpec::grid7x7().start);
  const auto f = load_grid_spec(std::string(CPI_DATA_DIR) + "/fourroom.json");
  CHECK(f.walls == GridSpec::four_room().walls);

  const auto tmp = std::filesystem::temp_directory_path() / "cpi_envs_roundtrip.json";
  save_grid_spec(f, tmp.string());
  CHECK(load_grid_spec(tmp.string()).walls == f.walls);
  std::filesystem::remove(tmp);
}

TEST_CASE("invalid grid specs") {
  auto spec = GridSpec::grid7x7();
  SUBCASE("zero width") { spec.width = 0; }
  SUBCASE("start on goal") { spec.start = spec.goal; }
  SUBCASE("wall on start") { spec.walls.push_back(spec.start); }
  SUBCASE("goal outside") { spec.goal = {7, 7}; }
  SUBCASE("goal walled off") {
    spec.walls = {{0, 5}, {1, 6}, {1, 5}};
  }
  CHECK_THROWS_AS(build_gridworld(spec, 0.9), InvalidSpec);
  CHECK_THROWS_AS(load_grid_spec("/nonexistent/grid.json"), InvalidSpec);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"width": 2})").get<GridSpec>(), InvalidSpec);
}

TEST_CASE("action names") {
  CHECK(parse_action("down").value() == kDown);
  CHECK_FALSE(parse_action("north").has_value());
}
