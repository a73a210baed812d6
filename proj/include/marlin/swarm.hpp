#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "marlin/gridworld.hpp"
#include "marlin/negotiation.hpp"
#include "marlin/rng.hpp"

namespace marlin {

enum class SwarmStatus { Walking, Negotiating, Exited };

inline const char* to_string(SwarmStatus status) {
  switch (status) {
    case SwarmStatus::Walking: return "walking";
    case SwarmStatus::Negotiating: return "negotiating";
    case SwarmStatus::Exited: return "exited";
  }
  return "?";
}

struct SwarmAgent {
  int id = 0;
  Cell position{};
  SwarmStatus status = SwarmStatus::Walking;
};

/// Inclusive cell rectangle. Zones are where head-on traffic is expected;
/// agents meeting inside one negotiate instead of random-walking.
struct ConflictZone {
  Cell lo{};
  Cell hi{};

  bool contains(Cell c) const {
    return c.x >= lo.x && c.x <= hi.x && c.y >= lo.y && c.y <= hi.y;
  }
  bool overlaps(const ConflictZone& other) const {
    return lo.x <= other.hi.x && other.lo.x <= hi.x &&
           lo.y <= other.hi.y && other.lo.y <= hi.y;
  }
};

/// A shared-exit crowd map: the base grid holds the walls and start markers,
/// every agent's goal is the single exit cell.
struct SwarmMap {
  GridWorld base;
  Cell exit{};
  std::vector<ConflictZone> zones;
};

/// Parses the swarm map format: the usual grid block (digits are agent
/// starts), then metadata `name`, `exit = x,y` and `zone.j = (x1,y1)-(x2,y2)`
/// lines. The exit must be free and reachable from every start; zones must be
/// in-bounds, non-empty and pairwise disjoint, numbered 0..k-1.
inline SwarmMap load_swarm_map(const std::string& map_text) {
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

  SwarmMap map;
  GridWorld& world = map.base;
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
  world.rebuild_mask();

  bool exit_seen = false;
  std::vector<std::pair<int, ConflictZone>> zones;
  for (const std::string& raw : meta_lines) {
    const auto eq = raw.find('=');
    if (eq == std::string::npos) throw ParseError("metadata line missing '=': " + raw);
    const std::string key = detail::trim(raw.substr(0, eq));
    const std::string value = detail::trim(raw.substr(eq + 1));
    if (key == "name") {
      world.scenario_id = value;
    } else if (key == "exit") {
      map.exit = detail::parse_cell(value, "exit");
      exit_seen = true;
    } else if (key.rfind("zone.", 0) == 0) {
      int index = -1;
      try {
        index = std::stoi(key.substr(5));
      } catch (const std::exception&) {
        throw ParseError("bad zone key: " + key);
      }
      const auto dash = value.find('-');
      if (dash == std::string::npos) throw ParseError("zone wants '(x1,y1)-(x2,y2)': " + value);
      auto corner = [&](std::string text) {
        text = detail::trim(text);
        if (text.size() < 2 || text.front() != '(' || text.back() != ')') {
          throw ParseError("zone corner wants '(x,y)': " + text);
        }
        return detail::parse_cell(text.substr(1, text.size() - 2), key.c_str());
      };
      ConflictZone zone{corner(value.substr(0, dash)), corner(value.substr(dash + 1))};
      if (zone.lo.x > zone.hi.x || zone.lo.y > zone.hi.y) {
        throw ParseError("zone corners out of order: " + value);
      }
      zones.emplace_back(index, zone);
    }
    // unknown keys are ignored so map variants can extend the format
  }
  if (world.scenario_id.empty()) throw ParseError("map missing 'name' metadata");
  if (!exit_seen) throw ParseError("map missing 'exit' metadata");
  if (!world.is_free(map.exit)) throw ValidationError("exit must be a free cell");
  for (int i = 0; i < world.agent_count(); ++i) {
    if (bfs_distance(world, world.starts[i], map.exit) < 0) {
      throw ValidationError("exit unreachable from start of agent " + std::to_string(i));
    }
  }
  std::sort(zones.begin(), zones.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < zones.size(); ++i) {
    if (zones[i].first != static_cast<int>(i)) {
      throw ParseError("zone indices must be 0..k-1, each exactly once");
    }
    const ConflictZone& zone = zones[i].second;
    if (!world.in_bounds(zone.lo) || !world.in_bounds(zone.hi)) {
      throw ValidationError("zone out of bounds");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (zone.overlaps(zones[j].second)) throw ValidationError("zones must be disjoint");
    }
    map.zones.push_back(zone);
  }
  world.goals.assign(world.starts.size(), map.exit);
  return map;
}

/// Pairs of walking agents standing in the same conflict zone: at most one
/// pair per zone per tick, and with more than two candidates the two lowest
/// ids form the pair.
inline std::vector<std::pair<int, int>> detect_conflict(
    const SwarmMap& map, const std::vector<SwarmAgent>& agents) {
  std::vector<std::pair<int, int>> pairs;
  for (const ConflictZone& zone : map.zones) {
    std::vector<int> inside;
    for (const SwarmAgent& agent : agents) {
      if (agent.status == SwarmStatus::Walking && zone.contains(agent.position)) {
        inside.push_back(agent.id);
      }
    }
    std::sort(inside.begin(), inside.end());
    if (inside.size() >= 2) pairs.emplace_back(inside[0], inside[1]);
  }
  return pairs;
}

/// Tick budget the shipped fixtures are tuned against: ten times the summed
/// individual shortest paths to the exit.
inline int liveness_bound(const SwarmMap& map, int agent_count) {
  int sum = 0;
  for (int i = 0; i < agent_count; ++i) {
    sum += bfs_distance(map.base, map.base.starts[i], map.exit);
  }
  return 10 * sum;
}

struct SwarmConfig {
  int ticks_max = 10000;
  /// A pair that has not passed within this many ticks is dissolved back to
  /// random walking (covers unsolvable sub-grids and unhelpful backends).
  int pair_ticks_max = 32;
  /// Ticks after dissolving before the same two agents may pair again;
  /// without it a freshly swapped pair re-forms and swaps straight back.
  int pair_cooldown = 8;
  NegotiationConfig negotiation{};
  std::uint64_t seed = 0;
};

/// Builds the per-pair chat backend for a zone sub-grid (local agents 0/1).
using BackendFactory =
    std::function<std::unique_ptr<ChatBackend>(const GridWorld&, int)>;

inline BackendFactory oracle_backend_factory() {
  return [](const GridWorld& zone_world, int) {
    return std::make_unique<OracleBackend>(zone_world);
  };
}

/// Crowd simulation: agents random-walk toward no place in particular and
/// leave through the shared exit; agents meeting inside a conflict zone stop
/// walking and negotiate their way past each other on the zone's sub-grid.
/// All movement, negotiated or random, resolves through the same simultaneous
/// transition as the training environment.
class SwarmSim {
 public:
  SwarmSim(SwarmMap map, BackendFactory factory, SwarmConfig cfg,
           int agent_count = -1)
      : map_(std::move(map)),
        factory_(std::move(factory)),
        cfg_(cfg),
        rng_(Rng(cfg.seed).split(0x737761726dULL)) {
    const int total = map_.base.agent_count();
    const int n = agent_count < 0 ? total : agent_count;
    if (n < 1 || n > total) throw ValidationError("agent count outside the map's start markers");
    for (int i = 0; i < n; ++i) {
      agents_.push_back(SwarmAgent{i, map_.base.starts[i], SwarmStatus::Walking});
    }
  }

  const SwarmMap& map() const { return map_; }
  const std::vector<SwarmAgent>& agents() const { return agents_; }
  int ticks() const { return ticks_; }

  bool all_exited() const {
    return std::all_of(agents_.begin(), agents_.end(), [](const SwarmAgent& a) {
      return a.status == SwarmStatus::Exited;
    });
  }

  /// One simulation tick. Identity once everyone has exited. Returns
  /// all_exited() so callers can loop on it.
  bool tick() {
    if (all_exited()) return true;

    // new pairs form where walking agents share a free zone
    for (const auto& [a, b] : detect_conflict(map_, agents_)) {
      const int zone = zone_of(agent(a).position);
      if (zone_busy(zone) || on_cooldown(a, b)) continue;
      form_pair(zone, a, b);
    }

    // negotiated moves first, then random walking in id order
    std::vector<GridAction> moves(agents_.size(), GridAction::Wait);
    for (auto& pair : pairs_) {
      try {
        const RoundResult round = pair->session->run_round();
        moves[pair->a] = round.actions[0];
        moves[pair->b] = round.actions[1];
      } catch (const BackendError&) {
        // the pair waits this tick and tries again next tick
      }
      ++pair->age;
    }
    for (SwarmAgent& agent : agents_) {
      if (agent.status == SwarmStatus::Walking) {
        moves[agent.id] = random_walk_move(agent.position);
      }
    }

    // everyone still inside moves simultaneously under the usual blocking
    std::vector<int> active;
    for (const SwarmAgent& agent : agents_) {
      if (agent.status != SwarmStatus::Exited) active.push_back(agent.id);
    }
    GridWorld view = map_.base;
    view.starts.clear();
    view.goals.clear();
    std::vector<GridAction> joint;
    for (int id : active) {
      view.starts.push_back(agents_[id].position);
      view.goals.push_back(map_.exit);
      joint.push_back(moves[id]);
    }
    const StepResult result =
        step(view, JointState{view.starts, ticks_}, joint, RewardParams{}, cfg_.ticks_max + 1);
    for (std::size_t i = 0; i < active.size(); ++i) {
      agents_[active[i]].position = result.next_state.positions[i];
    }
    ++ticks_;

    // pairs dissolve once both agents stand on the swapped goals, either
    // agent leaves the zone, or the pair ages out
    for (auto it = pairs_.begin(); it != pairs_.end();) {
      PairSession& pair = **it;
      const Cell pa = agent(pair.a).position;
      const Cell pb = agent(pair.b).position;
      const ConflictZone& zone = map_.zones[pair.zone];
      const bool passed = pa == pair.world->goals[0] && pb == pair.world->goals[1];
      if (passed || !zone.contains(pa) || !zone.contains(pb) ||
          pair.age >= cfg_.pair_ticks_max) {
        agent(pair.a).status = SwarmStatus::Walking;
        agent(pair.b).status = SwarmStatus::Walking;
        cooldown_[{pair.a, pair.b}] = ticks_ + cfg_.pair_cooldown;
        it = pairs_.erase(it);
      } else {
        pair.session->notify_state(JointState{{pa, pb}, ticks_});
        ++it;
      }
    }

    // standing on the exit leaves the crowd; exited agents occupy no cell
    for (SwarmAgent& agent : agents_) {
      if (agent.status == SwarmStatus::Exited || agent.position != map_.exit) continue;
      agent.status = SwarmStatus::Exited;
      for (auto it = pairs_.begin(); it != pairs_.end();) {
        if ((*it)->a == agent.id || (*it)->b == agent.id) {
          SwarmAgent& other = this->agent((*it)->a == agent.id ? (*it)->b : (*it)->a);
          if (other.status == SwarmStatus::Negotiating) other.status = SwarmStatus::Walking;
          it = pairs_.erase(it);
        } else {
          ++it;
        }
      }
    }
    return all_exited();
  }

  /// Runs until everyone has exited or ticks_max is hit. Optionally streams a
  /// per-tick CSV (tick 0 is the initial state; exited agents log no cell).
  std::optional<int> run(std::ostream* csv = nullptr) {
    if (csv) {
      *csv << "tick,agent,x,y,status\n";
      log_tick(*csv);
    }
    while (ticks_ < cfg_.ticks_max) {
      const bool done = tick();
      if (csv) log_tick(*csv);
      if (done) return ticks_;
    }
    return all_exited() ? std::optional<int>(ticks_) : std::nullopt;
  }

 private:
  struct PairSession {
    int a = 0;
    int b = 0;
    int zone = 0;
    int age = 0;
    std::unique_ptr<GridWorld> world;
    std::unique_ptr<ChatBackend> backend0;
    std::unique_ptr<ChatBackend> backend1;
    std::unique_ptr<NegotiationSession> session;
  };

  SwarmAgent& agent(int id) { return agents_[id]; }

  int zone_of(Cell c) const {
    for (std::size_t i = 0; i < map_.zones.size(); ++i) {
      if (map_.zones[i].contains(c)) return static_cast<int>(i);
    }
    return -1;
  }

  bool zone_busy(int zone) const {
    return std::any_of(pairs_.begin(), pairs_.end(),
                       [&](const auto& p) { return p->zone == zone; });
  }

  bool on_cooldown(int a, int b) const {
    const auto it = cooldown_.find({a, b});
    return it != cooldown_.end() && ticks_ < it->second;
  }

  /// The pair negotiates on the zone cut out of the real map, each agent
  /// aiming for the other's current cell: reaching both goals means they
  /// passed each other.
  void form_pair(int zone_index, int a, int b) {
    auto pair = std::make_unique<PairSession>();
    pair->a = a;
    pair->b = b;
    pair->zone = zone_index;
    const Cell pa = agent(a).position;
    const Cell pb = agent(b).position;
    auto world = std::make_unique<GridWorld>(map_.base);
    const ConflictZone& zone = map_.zones[zone_index];
    for (int y = 0; y < world->height; ++y) {
      for (int x = 0; x < world->width; ++x) {
        if (!zone.contains({x, y})) world->walls.insert({x, y});
      }
    }
    world->starts = {pa, pb};
    world->goals = {pb, pa};
    world->scenario_id = map_.base.scenario_id + ":zone" + std::to_string(zone_index);
    world->rebuild_mask();
    pair->world = std::move(world);
    pair->backend0 = factory_(*pair->world, 0);
    pair->backend1 = factory_(*pair->world, 1);
    pair->session = std::make_unique<NegotiationSession>(
        *pair->world, JointState{{pa, pb}, ticks_}, *pair->backend0,
        *pair->backend1, cfg_.negotiation, rng_);
    agent(a).status = SwarmStatus::Negotiating;
    agent(b).status = SwarmStatus::Negotiating;
    pairs_.push_back(std::move(pair));
  }

  /// Uniform over the moves whose target cell is free; waiting only when
  /// walled in. Blocking against other agents is left to the joint step.
  GridAction random_walk_move(Cell c) {
    static constexpr GridAction kMoves[4] = {GridAction::Forward, GridAction::Backward,
                                             GridAction::Left, GridAction::Right};
    GridAction legal[4];
    int count = 0;
    for (GridAction move : kMoves) {
      const Cell delta = action_delta(move);
      if (map_.base.is_free({c.x + delta.x, c.y + delta.y})) legal[count++] = move;
    }
    if (count == 0) return GridAction::Wait;
    return legal[rng_.uniform_int(static_cast<std::uint64_t>(count))];
  }

  void log_tick(std::ostream& out) const {
    for (const SwarmAgent& agent : agents_) {
      const bool exited = agent.status == SwarmStatus::Exited;
      out << ticks_ << ',' << agent.id << ',' << (exited ? -1 : agent.position.x)
          << ',' << (exited ? -1 : agent.position.y) << ',' << to_string(agent.status)
          << '\n';
    }
  }

  SwarmMap map_;
  BackendFactory factory_;
  SwarmConfig cfg_;
  Rng rng_;
  std::vector<SwarmAgent> agents_;
  std::vector<std::unique_ptr<PairSession>> pairs_;
  std::map<std::pair<int, int>, int> cooldown_;
  int ticks_ = 0;
};

}  // namespace marlin
