#pragma once

#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "marlin/gridworld.hpp"

namespace marlin {

/// Minimal-length sequence of joint actions, one tuple per simultaneous step.
struct JointPlanMoves {
  std::vector<std::vector<GridAction>> steps;
};

namespace detail {
inline std::string encode_positions(const std::vector<Cell>& positions) {
  std::string key;
  key.reserve(positions.size() * 2);
  for (const Cell& c : positions) {
    key.push_back(static_cast<char>(c.x));
    key.push_back(static_cast<char>(c.y));
  }
  return key;
}
}  // namespace detail

/// Exhaustive breadth-first search over joint states using the environment's
/// own transition. Joint actions are enumerated in lexicographic order over
/// (agent 0, agent 1, ...) with W first, so the first plan found is
/// deterministic and prefers waiting among equals. Returns nullopt if the
/// goal joint state is not reachable within `cap` steps.
inline std::optional<JointPlanMoves> joint_bfs(const GridWorld& world,
                                               const std::vector<Cell>& from,
                                               int cap = 64) {
  const int n = world.agent_count();
  int joint_count = 1;
  for (int i = 0; i < n; ++i) joint_count *= kNumActions;

  struct Visit {
    int parent;
    int action_code;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Visit> seen;
  std::vector<std::vector<Cell>> states;
  std::vector<int> depth;

  auto push = [&](const std::vector<Cell>& pos, int parent, int code, int d) {
    const std::string key = detail::encode_positions(pos);
    if (seen.count(key)) return false;
    seen.emplace(key, Visit{parent, code});
    states.push_back(pos);
    depth.push_back(d);
    return true;
  };

  push(from, -1, -1, 0);
  auto at_goals = [&](const std::vector<Cell>& pos) {
    for (int i = 0; i < n; ++i) {
      if (pos[i] != world.goals[i]) return false;
    }
    return true;
  };

  std::vector<GridAction> actions(n);
  for (std::size_t head = 0; head < states.size(); ++head) {
    if (at_goals(states[head])) {
      // reconstruct
      JointPlanMoves plan;
      int idx = static_cast<int>(head);
      std::vector<int> codes;
      while (idx > 0) {
        const Visit& v = seen.at(detail::encode_positions(states[idx]));
        codes.push_back(v.action_code);
        idx = v.parent;
      }
      for (auto it = codes.rbegin(); it != codes.rend(); ++it) {
        int c = *it;
        std::vector<GridAction> joint(n);
        for (int i = n - 1; i >= 0; --i) {
          joint[i] = static_cast<GridAction>(c % kNumActions);
          c /= kNumActions;
        }
        plan.steps.push_back(joint);
      }
      return plan;
    }
    if (depth[head] >= cap) continue;
    JointState state{states[head], 0};
    for (int code = 0; code < joint_count; ++code) {
      int c = code;
      for (int i = n - 1; i >= 0; --i) {
        actions[i] = static_cast<GridAction>(c % kNumActions);
        c /= kNumActions;
      }
      const StepResult result = step(world, state, actions, RewardParams{}, cap + 1);
      push(result.next_state.positions, static_cast<int>(head), code, depth[head] + 1);
    }
  }
  return std::nullopt;
}

}  // namespace marlin
