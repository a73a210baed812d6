#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "marlin/gridworld.hpp"
#include "marlin/negotiation.hpp"

namespace marlin {

struct CacheError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Canonical per-state key: scenario id plus the sorted (position, goal)
/// tuples, so equal configurations key equally regardless of construction
/// order, and different goals never collide.
struct StateKey {
  std::string value;
  auto operator<=>(const StateKey&) const = default;
};

inline StateKey state_key(const GridWorld& world, const JointState& state) {
  std::vector<std::array<int, 4>> tuples;
  tuples.reserve(state.positions.size());
  for (std::size_t i = 0; i < state.positions.size(); ++i) {
    tuples.push_back({state.positions[i].x, state.positions[i].y,
                      world.goals[i].x, world.goals[i].y});
  }
  std::sort(tuples.begin(), tuples.end());
  std::ostringstream out;
  out << world.scenario_id;
  for (const auto& t : tuples) {
    out << ";(" << t[0] << ',' << t[1] << ")->(" << t[2] << ',' << t[3] << ')';
  }
  return StateKey{out.str()};
}

/// Best plan seen for a key plus every performance ever measured there,
/// accepted or not; the sample list feeds the per-state LLM average.
struct CacheEntry {
  Plan plan;
  std::vector<double> llm_perf_samples;
};

/// Replace-if-strictly-better store of negotiated plans. Single-writer by
/// contract: the trainer owns its cache file.
class PlanCache {
 public:
  std::optional<Plan> load_plan(const StateKey& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second.plan;
  }

  /// True when the plan was adopted as the key's best. The performance is
  /// recorded as a sample either way.
  bool store_plan(const StateKey& key, const Plan& plan) {
    if (!(plan.performance >= 0.0 && plan.performance <= 1.0)) {
      throw std::invalid_argument("plan performance outside [0,1]");
    }
    auto it = entries_.find(key);
    if (it == entries_.end()) {
      entries_.emplace(key, CacheEntry{plan, {plan.performance}});
      return true;
    }
    it->second.llm_perf_samples.push_back(plan.performance);
    if (plan.performance > it->second.plan.performance) {
      it->second.plan = plan;
      return true;
    }
    return false;
  }

  std::optional<double> llm_mean_perf(const StateKey& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end() || it->second.llm_perf_samples.empty()) return std::nullopt;
    double sum = 0.0;
    for (double s : it->second.llm_perf_samples) sum += s;
    return sum / static_cast<double>(it->second.llm_perf_samples.size());
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<StateKey, CacheEntry>& entries() const { return entries_; }

  /// Versioned structured text; doubles are stored as IEEE-754 bit words so
  /// save -> load -> save is byte-identical.
  void save(std::ostream& out) const {
    out << "marlin-plan-cache v1\n";
    out << "entries " << entries_.size() << '\n';
    for (const auto& [key, entry] : entries_) {
      out << "key " << key.value << '\n';
      const Plan& plan = entry.plan;
      out << "origin " << plan.origin.positions.size() << ' ' << plan.origin.step_index;
      for (const Cell& c : plan.origin.positions) out << ' ' << c.x << ' ' << c.y;
      out << '\n';
      out << "moves " << plan.moves.size() << '\n';
      for (const auto& joint : plan.moves) {
        for (GridAction a : joint) out << action_code(a);
        out << '\n';
      }
      out << "performance " << std::hex << std::bit_cast<std::uint64_t>(plan.performance)
          << std::dec << '\n';
      out << "transcript " << plan.transcript_ref << '\n';
      out << "samples " << entry.llm_perf_samples.size();
      out << std::hex;
      for (double s : entry.llm_perf_samples) out << ' ' << std::bit_cast<std::uint64_t>(s);
      out << std::dec << '\n';
    }
  }

  static PlanCache load(std::istream& in) {
    PlanCache cache;
    std::string header;
    std::getline(in, header);
    if (header != "marlin-plan-cache v1") {
      throw CacheError("unrecognized plan cache header: " + header);
    }
    std::string tag;
    std::size_t count = 0;
    if (!(in >> tag >> count) || tag != "entries") throw CacheError("missing entry count");
    in.ignore();
    for (std::size_t e = 0; e < count; ++e) {
      std::string line;
      if (!std::getline(in, line) || line.rfind("key ", 0) != 0) {
        throw CacheError("missing cache key");
      }
      StateKey key{line.substr(4)};
      CacheEntry entry;

      std::size_t agents = 0;
      if (!(in >> tag >> agents) || tag != "origin") throw CacheError("missing origin");
      in >> entry.plan.origin.step_index;
      entry.plan.origin.positions.resize(agents);
      for (Cell& c : entry.plan.origin.positions) in >> c.x >> c.y;

      std::size_t steps = 0;
      if (!(in >> tag >> steps) || tag != "moves") throw CacheError("missing moves");
      in.ignore();
      entry.plan.moves.resize(steps);
      for (auto& joint : entry.plan.moves) {
        if (!std::getline(in, line) || line.size() != agents) {
          throw CacheError("bad move row");
        }
        joint.resize(agents);
        for (std::size_t i = 0; i < agents; ++i) joint[i] = action_from_code(line[i]);
      }

      std::uint64_t word = 0;
      if (!(in >> tag >> std::hex >> word >> std::dec) || tag != "performance") {
        throw CacheError("missing performance");
      }
      entry.plan.performance = std::bit_cast<double>(word);

      in >> tag;
      if (tag != "transcript") throw CacheError("missing transcript ref");
      std::getline(in, line);
      entry.plan.transcript_ref = line.empty() ? line : line.substr(1);

      std::size_t samples = 0;
      if (!(in >> tag >> samples) || tag != "samples") throw CacheError("missing samples");
      entry.llm_perf_samples.resize(samples);
      in >> std::hex;
      for (double& s : entry.llm_perf_samples) {
        in >> word;
        s = std::bit_cast<double>(word);
      }
      in >> std::dec;
      if (!in) throw CacheError("truncated plan cache");
      in.ignore();
      cache.entries_.emplace(std::move(key), std::move(entry));
    }
    return cache;
  }

 private:
  std::map<StateKey, CacheEntry> entries_;
};

}  // namespace marlin
