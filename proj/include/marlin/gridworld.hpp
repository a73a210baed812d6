#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace marlin {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
  friend auto operator<=>(const Cell&, const Cell&) = default;
};

inline int manhattan(Cell a, Cell b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

/// Discrete joint actions. Codes 0..4 are stable: they index the actor's
/// logits and the one-hot block of the critic input.
enum class GridAction : int { Wait = 0, Forward = 1, Backward = 2, Left = 3, Right = 4 };

constexpr int kNumActions = 5;
constexpr int kDefaultStepMax = 50;

inline char action_code(GridAction a) {
  return "WFBLR"[static_cast<int>(a)];
}

inline GridAction action_from_code(char c) {
  switch (c) {
    case 'W': return GridAction::Wait;
    case 'F': return GridAction::Forward;
    case 'B': return GridAction::Backward;
    case 'L': return GridAction::Left;
    case 'R': return GridAction::Right;
  }
  throw std::invalid_argument(std::string("unknown action code: ") + c);
}

/// Grid-absolute displacement. Forward is north (y decreases; origin is the
/// top-left corner of the map text), Backward south, Left west, Right east.
inline Cell action_delta(GridAction a) {
  switch (a) {
    case GridAction::Wait: return {0, 0};
    case GridAction::Forward: return {0, -1};
    case GridAction::Backward: return {0, 1};
    case GridAction::Left: return {-1, 0};
    case GridAction::Right: return {1, 0};
  }
  return {0, 0};
}

/// Static corridor map plus the per-agent start/goal configuration of one
/// scenario. Immutable after load; safe to share between rollouts.
struct GridWorld {
  int width = 0;
  int height = 0;
  std::set<Cell> walls;
  std::string scenario_id;
  std::vector<Cell> starts;
  std::vector<Cell> goals;

  int agent_count() const { return static_cast<int>(starts.size()); }

  bool in_bounds(Cell c) const {
    return c.x >= 0 && c.x < width && c.y >= 0 && c.y < height;
  }
  bool is_wall(Cell c) const { return wall_mask_[index(c)] != 0; }
  bool is_free(Cell c) const { return in_bounds(c) && !is_wall(c); }

  /// Manhattan distance start->goal for agent i (the D_i of the reward and
  /// performance formulas). Strictly positive by scenario validation.
  int initial_distance(int agent) const {
    return manhattan(starts[agent], goals[agent]);
  }

  void rebuild_mask() {
    wall_mask_.assign(static_cast<std::size_t>(width) * height, 0);
    for (const Cell& c : walls) wall_mask_[index(c)] = 1;
  }

 private:
  std::size_t index(Cell c) const {
    return static_cast<std::size_t>(c.y) * width + c.x;
  }
  std::vector<std::uint8_t> wall_mask_;
};

/// Positions of all agents at one timestep.
struct JointState {
  std::vector<Cell> positions;
  int step_index = 0;
  friend bool operator==(const JointState&, const JointState&) = default;
};

/// 4-tuple the actor observes: own position and own goal.
struct Observation {
  int x = 0;
  int y = 0;
  int goal_x = 0;
  int goal_y = 0;
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct StepResult {
  JointState next_state;
  std::vector<double> rewards;
  std::vector<std::uint8_t> collisions;
  bool done = false;
};

/// w weights the distance term against the per-step collision penalty rho.
struct RewardParams {
  double weight = 1.0;
  double collision_penalty = 0.5;
};

inline JointState initial_state(const GridWorld& world) {
  return JointState{world.starts, 0};
}

inline bool all_at_goals(const GridWorld& world, const JointState& state) {
  for (int i = 0; i < world.agent_count(); ++i) {
    if (state.positions[i] != world.goals[i]) return false;
  }
  return true;
}

inline Observation observe(const GridWorld& world, const JointState& state, int agent) {
  const Cell p = state.positions[agent];
  const Cell g = world.goals[agent];
  return Observation{p.x, p.y, g.x, g.y};
}

/// Per-agent, per-step reward: w * max(0, 1 - d/D) - rho * [collision].
inline double reward(const GridWorld& world, const JointState& state, int agent,
                     bool collision, const RewardParams& params = {}) {
  const double d = manhattan(state.positions[agent], world.goals[agent]);
  const double total = world.initial_distance(agent);
  // d = 0 is a full score even on degenerate start-at-goal configurations
  double r = params.weight * (d == 0.0 ? 1.0 : std::max(0.0, 1.0 - d / total));
  if (collision) r -= params.collision_penalty;
  return r;
}

/// Mean over agents of max(0, 1 - d/D). Equals 1 exactly when every agent
/// stands on its goal.
inline double performance(const GridWorld& world, const JointState& state) {
  double sum = 0.0;
  const int n = world.agent_count();
  for (int i = 0; i < n; ++i) {
    const double d = manhattan(state.positions[i], world.goals[i]);
    const double total = world.initial_distance(i);
    sum += d == 0.0 ? 1.0 : std::max(0.0, 1.0 - d / total);
  }
  return sum / n;
}

/// Simultaneous joint transition. Moves are blocked (agent stays, collision
/// flag set) on: wall or boundary target, two agents targeting one cell,
/// a pairwise swap, or targeting the cell of an agent that is itself waiting
/// or blocked. Blocking settles to a fixed point, so a chain of followers
/// moves when its head moves and a rotation of movers resolves as a whole.
inline StepResult step(const GridWorld& world, const JointState& state,
                       const std::vector<GridAction>& actions,
                       const RewardParams& params = {},
                       int step_max = kDefaultStepMax) {
  const int n = world.agent_count();
  std::vector<Cell> targets(n);
  std::vector<std::uint8_t> moving(n, 0);
  std::vector<std::uint8_t> collided(n, 0);

  for (int i = 0; i < n; ++i) {
    const Cell delta = action_delta(actions[i]);
    if (delta == Cell{0, 0}) {
      targets[i] = state.positions[i];
      continue;
    }
    const Cell t{state.positions[i].x + delta.x, state.positions[i].y + delta.y};
    if (!world.is_free(t)) {
      targets[i] = state.positions[i];
      collided[i] = 1;
    } else {
      targets[i] = t;
      moving[i] = 1;
    }
  }

  // Swap and duplicate-target conflicts are judged on the original intents:
  // both participants block, even if one of them is also blocked for another
  // reason. Judging them on surviving movers would wrongly let one agent of
  // a head-on pair through once the other is cancelled.
  std::vector<std::uint8_t> cancel(n, 0);
  for (int i = 0; i < n; ++i) {
    if (!moving[i]) continue;
    for (int j = i + 1; j < n; ++j) {
      if (!moving[j]) continue;
      const bool swap = targets[i] == state.positions[j] && targets[j] == state.positions[i];
      const bool shared = targets[i] == targets[j];
      if (swap || shared) cancel[i] = cancel[j] = 1;
    }
  }
  for (int i = 0; i < n; ++i) {
    if (cancel[i]) {
      moving[i] = 0;
      targets[i] = state.positions[i];
      collided[i] = 1;
    }
  }

  // Survivors have pairwise-distinct targets; the only remaining conflict is
  // moving onto a cell whose occupant is not vacating it. Cancelling one
  // mover can strand the next, so settle to a fixed point.
  bool changed = true;
  while (changed) {
    changed = false;
    for (int i = 0; i < n; ++i) {
      if (!moving[i]) continue;
      for (int j = 0; j < n; ++j) {
        if (j != i && !moving[j] && state.positions[j] == targets[i]) {
          moving[i] = 0;
          targets[i] = state.positions[i];
          collided[i] = 1;
          changed = true;
          break;
        }
      }
    }
  }

  StepResult result;
  result.next_state.positions = targets;
  result.next_state.step_index = state.step_index + 1;
  result.collisions = collided;
  result.done = all_at_goals(world, result.next_state) ||
                result.next_state.step_index >= step_max;
  result.rewards.resize(n);
  for (int i = 0; i < n; ++i) {
    result.rewards[i] = reward(world, result.next_state, i, collided[i] != 0, params);
  }
  return result;
}

/// Free-cell distance by breadth-first search; -1 when unreachable.
inline int bfs_distance(const GridWorld& world, Cell from, Cell to) {
  if (!world.is_free(from) || !world.is_free(to)) return -1;
  std::vector<int> dist(static_cast<std::size_t>(world.width) * world.height, -1);
  auto at = [&](Cell c) -> int& {
    return dist[static_cast<std::size_t>(c.y) * world.width + c.x];
  };
  std::deque<Cell> queue{from};
  at(from) = 0;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    if (c == to) return at(c);
    for (const Cell d : {Cell{0, -1}, Cell{0, 1}, Cell{-1, 0}, Cell{1, 0}}) {
      const Cell next{c.x + d.x, c.y + d.y};
      if (world.is_free(next) && at(next) < 0) {
        at(next) = at(c) + 1;
        queue.push_back(next);
      }
    }
  }
  return -1;
}

/// Grid block with agents drawn at their positions in `state` (or at their
/// starts when no state is given). Rendering the initial state reproduces
/// the grid block of the map file exactly.
inline std::string render_map(const GridWorld& world, const JointState& state) {
  std::string out;
  out.reserve(static_cast<std::size_t>(world.height) * (world.width + 1));
  for (int y = 0; y < world.height; ++y) {
    for (int x = 0; x < world.width; ++x) {
      char c = world.is_wall({x, y}) ? '#' : '.';
      for (int i = 0; i < world.agent_count(); ++i) {
        if (state.positions[i] == Cell{x, y}) c = static_cast<char>('0' + i);
      }
      out.push_back(c);
    }
    out.push_back('\n');
  }
  return out;
}

inline std::string render_map(const GridWorld& world) {
  return render_map(world, initial_state(world));
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline Cell parse_cell(const std::string& text, const char* what) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) {
    throw ParseError(std::string(what) + ": expected 'x,y', got '" + text + "'");
  }
  try {
    const int x = std::stoi(trim(text.substr(0, comma)));
    const int y = std::stoi(trim(text.substr(comma + 1)));
    return {x, y};
  } catch (const std::exception&) {
    throw ParseError(std::string(what) + ": expected 'x,y', got '" + text + "'");
  }
}

}  // namespace detail

/// Parses and validates one scenario map.
///
/// Format: a grid block ('#' wall, '.' free, digit k = start of agent k),
/// a blank line, then metadata lines 'goal.k = x,y' (one per agent) and
/// 'name = <scenario_id>'. Grid rows must have equal length.
inline GridWorld load_scenario(const std::string& map_text) {
  std::vector<std::string> grid_rows;
  std::vector<std::string> meta_lines;
  bool in_grid = true;
  std::istringstream in(map_text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (in_grid) {
      if (detail::trim(line).empty()) {
        if (!grid_rows.empty()) in_grid = false;
        continue;
      }
      grid_rows.push_back(line);
    } else {
      if (!detail::trim(line).empty()) meta_lines.push_back(line);
    }
  }
  if (grid_rows.empty()) throw ParseError("map has no grid block");

  GridWorld world;
  world.height = static_cast<int>(grid_rows.size());
  world.width = static_cast<int>(grid_rows.front().size());
  std::vector<std::pair<int, Cell>> starts;
  for (int y = 0; y < world.height; ++y) {
    const std::string& row = grid_rows[y];
    if (static_cast<int>(row.size()) != world.width) {
      throw ParseError("grid rows have unequal length");
    }
    for (int x = 0; x < world.width; ++x) {
      const char c = row[x];
      if (c == '#') {
        world.walls.insert({x, y});
      } else if (c == '.') {
        // free
      } else if (std::isdigit(static_cast<unsigned char>(c))) {
        starts.emplace_back(c - '0', Cell{x, y});
      } else {
        throw ParseError(std::string("unexpected map character '") + c + "'");
      }
    }
  }

  std::sort(starts.begin(), starts.end());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (starts[i].first != static_cast<int>(i)) {
      throw ParseError("agent start markers must be 0..n-1, each exactly once");
    }
    world.starts.push_back(starts[i].second);
  }
  if (world.starts.empty()) throw ParseError("map declares no agents");

  world.goals.resize(world.starts.size(), Cell{-1, -1});
  std::vector<bool> goal_seen(world.starts.size(), false);
  for (const std::string& raw : meta_lines) {
    const auto eq = raw.find('=');
    if (eq == std::string::npos) throw ParseError("metadata line missing '=': " + raw);
    const std::string key = detail::trim(raw.substr(0, eq));
    const std::string value = detail::trim(raw.substr(eq + 1));
    if (key == "name") {
      world.scenario_id = value;
    } else if (key.rfind("goal.", 0) == 0) {
      int agent = -1;
      try {
        agent = std::stoi(key.substr(5));
      } catch (const std::exception&) {
        throw ParseError("bad goal key: " + key);
      }
      if (agent < 0 || agent >= static_cast<int>(world.goals.size())) {
        throw ParseError("goal declared for unknown agent: " + key);
      }
      world.goals[agent] = detail::parse_cell(value, key.c_str());
      goal_seen[agent] = true;
    }
    // unknown keys are ignored so map variants can extend the format
  }
  if (world.scenario_id.empty()) throw ParseError("map missing 'name' metadata");
  for (std::size_t i = 0; i < goal_seen.size(); ++i) {
    if (!goal_seen[i]) {
      throw ParseError("missing goal for agent " + std::to_string(i));
    }
  }

  world.rebuild_mask();

  for (int i = 0; i < world.agent_count(); ++i) {
    if (!world.is_free(world.goals[i])) {
      throw ValidationError("goal of agent " + std::to_string(i) +
                            " is out of bounds or on a wall");
    }
    if (manhattan(world.starts[i], world.goals[i]) == 0) {
      throw ValidationError("agent " + std::to_string(i) +
                            " starts on its goal; D must be positive");
    }
    for (int j = i + 1; j < world.agent_count(); ++j) {
      if (world.starts[i] == world.starts[j]) {
        throw ValidationError("agents share a start cell");
      }
      if (world.goals[i] == world.goals[j]) {
        throw ValidationError("agents share a goal cell");
      }
    }
    if (bfs_distance(world, world.starts[i], world.goals[i]) < 0) {
      throw ValidationError("goal of agent " + std::to_string(i) +
                            " is unreachable from its start");
    }
  }
  return world;
}

}  // namespace marlin
