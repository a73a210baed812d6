#pragma once

#include <cctype>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "marlin/gridworld.hpp"
#include "marlin/joint_bfs.hpp"
#include "marlin/rng.hpp"

namespace marlin {

enum class ChatRole { System, Self, Other };

/// One message as seen from a particular agent's side of the conversation:
/// its own words are Self, the other agent's (and injected notices) Other.
struct ChatMessage {
  ChatRole role = ChatRole::System;
  std::string content;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat record of everything said. speaker -1 is the engine (system prompt
/// and position updates); counted marks messages that consumed a
/// message_limit slot (malformed replies do not).
struct TranscriptEntry {
  int round = 0;
  int turn = 0;
  int speaker = -1;
  bool counted = false;
  std::string content;
};

/// Transport or protocol failure talking to a backend. The negotiation
/// engine attaches whatever transcript existed when the failure happened.
struct BackendError : std::runtime_error {
  explicit BackendError(const std::string& what) : std::runtime_error(what) {}
  std::vector<TranscriptEntry> partial_transcript;
};

/// Produces the next reply for one agent given that agent's view of the
/// conversation so far. Implementations must be usable as one-per-agent.
class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual std::string reply(const std::vector<ChatMessage>& conversation) = 0;
};

enum class LeaderRule { Deterministic, Random };

struct NegotiationConfig {
  int message_limit = 10;      // counted (well-formed) messages per round
  int max_format_retries = 3;  // malformed replies tolerated per round
  LeaderRule leader_rule = LeaderRule::Deterministic;
  int move_cap = kDefaultStepMax;
};

/// Negotiated action sequence from a fixed origin state, with the
/// performance measured by simulating it.
struct Plan {
  JointState origin;
  std::vector<std::vector<GridAction>> moves;  // [step][agent]
  double performance = 0.0;
  std::string transcript_ref;  // log handle, empty when not persisted
};

inline int select_leader(int agent_count, LeaderRule rule, Rng& rng) {
  if (agent_count == 1) return 0;
  if (rule == LeaderRule::Deterministic) return 0;
  return static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(agent_count)));
}

inline const char* action_token(GridAction a) {
  switch (a) {
    case GridAction::Wait: return "@WAIT";
    case GridAction::Forward: return "@NORTH";
    case GridAction::Backward: return "@SOUTH";
    case GridAction::Left: return "@WEST";
    case GridAction::Right: return "@EAST";
  }
  return "@WAIT";
}

/// Inverse of action_token; also the move-block grammar's token table.
inline std::optional<GridAction> action_from_token(const std::string& token) {
  if (token == "@WAIT") return GridAction::Wait;
  if (token == "@NORTH") return GridAction::Forward;
  if (token == "@SOUTH") return GridAction::Backward;
  if (token == "@WEST") return GridAction::Left;
  if (token == "@EAST") return GridAction::Right;
  return std::nullopt;
}

/// The canonical in-grammar rendering of a joint move.
inline std::string render_move_block(const std::vector<GridAction>& moves) {
  std::string out;
  for (std::size_t i = 0; i < moves.size(); ++i) {
    out += "MOVE " + std::to_string(i) + ": " + action_token(moves[i]) + "\n";
  }
  return out;
}

/// Extracts the final complete move block `MOVE <agent>: @<DIRECTION>` for
/// every agent, ignoring surrounding prose. Within an unfinished block a
/// repeated agent line overwrites the earlier one; a completed block is
/// superseded by any later complete block.
inline std::vector<GridAction> parse_moves(const std::string& message, int agent_count = 2) {
  std::vector<std::optional<GridAction>> current(agent_count);
  std::optional<std::vector<GridAction>> last_block;
  int filled = 0;

  std::size_t pos = 0;
  while ((pos = message.find("MOVE", pos)) != std::string::npos) {
    std::size_t p = pos + 4;
    pos = p;
    while (p < message.size() && message[p] == ' ') ++p;
    std::size_t digits = p;
    while (digits < message.size() && std::isdigit(static_cast<unsigned char>(message[digits]))) {
      ++digits;
    }
    if (digits == p) continue;
    const int agent = std::stoi(message.substr(p, digits - p));
    p = digits;
    while (p < message.size() && message[p] == ' ') ++p;
    if (p >= message.size() || message[p] != ':') continue;
    ++p;
    while (p < message.size() && message[p] == ' ') ++p;
    if (p >= message.size() || message[p] != '@') continue;
    std::size_t end = p + 1;
    while (end < message.size() && std::isupper(static_cast<unsigned char>(message[end]))) ++end;
    const std::string token = message.substr(p, end - p);
    const auto action = action_from_token(token);
    if (!action) throw FormatError("unknown action token: " + token);
    if (agent < 0 || agent >= agent_count) {
      throw FormatError("move line for unknown agent " + std::to_string(agent));
    }
    if (!current[agent]) ++filled;
    current[agent] = *action;
    if (filled == agent_count) {
      std::vector<GridAction> block(agent_count);
      for (int i = 0; i < agent_count; ++i) block[i] = *current[i];
      last_block = block;
      current.assign(agent_count, std::nullopt);
      filled = 0;
    }
  }
  if (!last_block) {
    throw FormatError(filled > 0 ? "move block is missing an agent" : "no move block found");
  }
  return *last_block;
}

/// True when AGREE appears as a standalone word (DISAGREE does not count).
inline bool contains_agree_token(const std::string& message) {
  std::size_t pos = 0;
  while ((pos = message.find("AGREE", pos)) != std::string::npos) {
    const bool left_ok =
        pos == 0 || !std::isalpha(static_cast<unsigned char>(message[pos - 1]));
    const std::size_t after = pos + 5;
    const bool right_ok = after >= message.size() ||
                          !std::isalpha(static_cast<unsigned char>(message[after]));
    if (left_ok && right_ok) return true;
    pos = after;
  }
  return false;
}

/// Both agents receive the same prompt text except for the leading
/// "You are agent k" binding.
inline std::string build_system_prompt(const GridWorld& world, const JointState& state,
                                       int agent) {
  std::ostringstream out;
  out << "You are agent " << agent << ".\n";
  out << "Two agents move on a grid and must reach their goals without collisions.\n";
  out << "Rows run north to south; moving north decreases y. Cells are (x,y) with (0,0) "
         "top left.\n";
  out << "Map (" << world.width << "x" << world.height
      << "; '#' wall, '.' free, digits are agent positions):\n";
  out << render_map(world, state);
  for (int i = 0; i < world.agent_count(); ++i) {
    const Cell p = state.positions[i];
    const Cell g = world.goals[i];
    out << "Agent " << i << " is at (" << p.x << "," << p.y << ") and must reach ("
        << g.x << "," << g.y << ").\n";
  }
  out << "Each step every agent moves one cell or waits. Action vocabulary: "
         "@NORTH, @SOUTH, @EAST, @WEST, @WAIT.\n";
  out << "Negotiate one joint step at a time. State a top-level plan (TLP) first, "
         "then propose moves for both agents, ending your message with lines:\n";
  out << "MOVE 0: @DIRECTION\n";
  out << "MOVE 1: @DIRECTION\n";
  out << "To accept the other agent's proposal, reply with the word AGREE followed "
         "by the same MOVE lines.\n";
  return out.str();
}

inline std::string position_update_message(const GridWorld& world, const JointState& state) {
  std::ostringstream out;
  out << "Positions updated after the last joint step. Map:\n";
  out << render_map(world, state);
  for (int i = 0; i < world.agent_count(); ++i) {
    const Cell p = state.positions[i];
    out << "Agent " << i << " is at (" << p.x << "," << p.y << ").\n";
  }
  out << "Negotiate the next joint step.\n";
  return out.str();
}

struct RoundResult {
  std::vector<GridAction> actions;
  bool agreed = false;
};

/// One dyadic negotiation session: holds both agents' conversation views and
/// the flat transcript, and runs proposal/critique rounds over them. Strictly
/// sequential; reusable across rounds so later rounds keep the full history.
class NegotiationSession {
 public:
  NegotiationSession(const GridWorld& world, const JointState& state,
                     ChatBackend& backend0, ChatBackend& backend1,
                     NegotiationConfig cfg, Rng& rng)
      : world_(world), state_(state), cfg_(cfg), rng_(rng),
        backends_{&backend0, &backend1} {
    for (int i = 0; i < 2; ++i) {
      views_[i].push_back(ChatMessage{ChatRole::System, build_system_prompt(world, state, i)});
    }
    // one transcript entry for the shared prompt; the binding line is per-agent
    transcript_.push_back(TranscriptEntry{0, 0, -1, false, build_system_prompt(world, state, 0)});
  }

  /// Runs one proposal/critique round. Ends on an AGREE reply carrying a
  /// parseable move block, on the message limit, or when the format-retry
  /// budget is spent; adopts the last parseable move block, else joint wait.
  RoundResult run_round() {
    ++round_;
    int speaker = select_leader(2, cfg_.leader_rule, rng_);
    int counted = 0;
    int malformed = 0;
    std::optional<std::vector<GridAction>> last_block;
    bool agreed = false;

    while (counted < cfg_.message_limit) {
      std::string text;
      try {
        text = backends_[speaker]->reply(views_[speaker]);
      } catch (BackendError& err) {
        err.partial_transcript = transcript_;
        throw;
      }
      std::optional<std::vector<GridAction>> block;
      try {
        block = parse_moves(text, 2);
      } catch (const FormatError&) {
        block = std::nullopt;
      }
      if (block) {
        ++counted;
        record(speaker, true, text);
        views_[speaker].push_back(ChatMessage{ChatRole::Self, text});
        views_[1 - speaker].push_back(ChatMessage{ChatRole::Other, text});
        last_block = block;
        if (counted >= 2 && contains_agree_token(text)) {
          agreed = true;
          break;
        }
        speaker = 1 - speaker;
      } else {
        ++malformed;
        record(speaker, false, text);
        views_[speaker].push_back(ChatMessage{ChatRole::Self, text});
        if (malformed > cfg_.max_format_retries) break;
        views_[speaker].push_back(ChatMessage{
            ChatRole::Other,
            "Your last message had no parseable move block. Repeat your message, "
            "ending with lines 'MOVE 0: @DIRECTION' and 'MOVE 1: @DIRECTION' using "
            "@NORTH, @SOUTH, @EAST, @WEST or @WAIT."});
      }
    }

    RoundResult result;
    result.agreed = agreed;
    result.actions = last_block ? *last_block
                                : std::vector<GridAction>(2, GridAction::Wait);
    return result;
  }

  /// Tells both agents where everyone ended up after a simulated step.
  void notify_state(const JointState& state) {
    state_ = state;
    const std::string text = position_update_message(world_, state);
    for (auto& view : views_) view.push_back(ChatMessage{ChatRole::Other, text});
    transcript_.push_back(TranscriptEntry{round_, turn_++, -1, false, text});
  }

  const std::vector<TranscriptEntry>& transcript() const { return transcript_; }

 private:
  void record(int speaker, bool counted, const std::string& text) {
    transcript_.push_back(TranscriptEntry{round_, turn_++, speaker, counted, text});
  }

  const GridWorld& world_;
  JointState state_;
  NegotiationConfig cfg_;
  Rng& rng_;
  ChatBackend* backends_[2];
  std::vector<ChatMessage> views_[2];
  std::vector<TranscriptEntry> transcript_;
  int round_ = 0;
  int turn_ = 1;
};

/// Single fresh round from `state`; the standalone form of the protocol.
inline std::pair<RoundResult, std::vector<TranscriptEntry>> negotiate_round(
    const GridWorld& world, const JointState& state, ChatBackend& backend0,
    ChatBackend& backend1, const NegotiationConfig& cfg, Rng& rng) {
  NegotiationSession session(world, state, backend0, backend1, cfg, rng);
  const RoundResult result = session.run_round();
  return {result, session.transcript()};
}

/// Full-plan construction: negotiate a round, simulate it, tell the agents
/// where they ended up, repeat until every agent stands on its goal or
/// move_cap joint steps were taken. performance is measured on the final
/// simulated state.
inline Plan make_plan(const GridWorld& world, const JointState& state, ChatBackend& backend0,
                      ChatBackend& backend1, const NegotiationConfig& cfg, Rng& rng,
                      std::vector<TranscriptEntry>* transcript_out = nullptr) {
  Plan plan;
  plan.origin = state;
  if (all_at_goals(world, state)) {
    plan.performance = 1.0;
    return plan;
  }
  NegotiationSession session(world, state, backend0, backend1, cfg, rng);
  JointState current = state;
  while (static_cast<int>(plan.moves.size()) < cfg.move_cap) {
    const RoundResult round = session.run_round();
    const StepResult result = step(world, current, round.actions, RewardParams{},
                                   cfg.move_cap + 1);
    plan.moves.push_back(round.actions);
    current = result.next_state;
    if (all_at_goals(world, current)) break;
    if (static_cast<int>(plan.moves.size()) < cfg.move_cap) session.notify_state(current);
  }
  plan.performance = performance(world, current);
  if (transcript_out) *transcript_out = session.transcript();
  return plan;
}

// ------------------------------------------------------------- backends

/// Replays a fixed list of replies in order; deterministic by construction.
class ScriptedBackend : public ChatBackend {
 public:
  explicit ScriptedBackend(std::vector<std::string> replies)
      : replies_(std::move(replies)) {}

  /// Fixture files hold replies separated by lines containing exactly "---".
  static ScriptedBackend from_stream(std::istream& in) {
    std::vector<std::string> replies;
    std::string reply, line;
    while (std::getline(in, line)) {
      if (line == "---") {
        replies.push_back(reply);
        reply.clear();
      } else {
        reply += line;
        reply += '\n';
      }
    }
    if (!reply.empty()) replies.push_back(reply);
    return ScriptedBackend(std::move(replies));
  }

  std::string reply(const std::vector<ChatMessage>&) override {
    if (next_ >= replies_.size()) throw BackendError("scripted backend: replies exhausted");
    return replies_[next_++];
  }

 private:
  std::vector<std::string> replies_;
  std::size_t next_ = 0;
};

/// Perfect in-grammar negotiator: recovers the live positions from the last
/// map render in the conversation, solves the joint shortest path, proposes
/// its first step, and agrees with any proposal matching it. A deterministic
/// test stand-in for a hosted model, not a claim about one.
class OracleBackend : public ChatBackend {
 public:
  explicit OracleBackend(GridWorld world) : world_(std::move(world)) {}

  std::string reply(const std::vector<ChatMessage>& conversation) override {
    const std::vector<Cell> positions = last_rendered_positions(conversation);
    const auto plan = joint_bfs(world_, positions);
    std::vector<GridAction> joint(world_.agent_count(), GridAction::Wait);
    if (plan && !plan->steps.empty()) joint = plan->steps.front();

    if (!conversation.empty() && conversation.back().role == ChatRole::Other) {
      try {
        if (parse_moves(conversation.back().content, world_.agent_count()) == joint) {
          return "AGREE\n" + render_move_block(joint);
        }
      } catch (const FormatError&) {
        // not a proposal; fall through and propose
      }
    }
    return "TLP: follow the shortest collision-free joint route.\n" +
           render_move_block(joint);
  }

 private:
  /// Last grid block (height lines of width map characters) anywhere in the
  /// conversation; falls back to the world's start positions.
  std::vector<Cell> last_rendered_positions(const std::vector<ChatMessage>& conversation) const {
    std::vector<Cell> positions = world_.starts;
    for (const ChatMessage& m : conversation) {
      std::vector<std::string> lines;
      std::istringstream in(m.content);
      std::string line;
      while (std::getline(in, line)) lines.push_back(line);
      for (std::size_t i = 0; i + world_.height <= lines.size(); ++i) {
        bool grid = true;
        for (int y = 0; y < world_.height && grid; ++y) {
          const std::string& row = lines[i + y];
          if (static_cast<int>(row.size()) != world_.width) grid = false;
          for (char c : row) {
            if (c != '#' && c != '.' && !std::isdigit(static_cast<unsigned char>(c))) {
              grid = false;
            }
          }
        }
        if (!grid) continue;
        std::vector<Cell> found(world_.agent_count(), Cell{-1, -1});
        int seen = 0;
        for (int y = 0; y < world_.height; ++y) {
          for (int x = 0; x < world_.width; ++x) {
            const char c = lines[i + y][x];
            if (std::isdigit(static_cast<unsigned char>(c))) {
              const int agent = c - '0';
              if (agent < world_.agent_count() && found[agent].x < 0) {
                found[agent] = Cell{x, y};
                ++seen;
              }
            }
          }
        }
        if (seen == world_.agent_count()) positions = found;
      }
    }
    return positions;
  }

  GridWorld world_;
};

// ------------------------------------------------------- transcript files

namespace detail {

inline std::string escape_line(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out.push_back(c);
    }
  }
  return out;
}

inline std::string unescape_line(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      out.push_back(s[i + 1] == 'n' ? '\n' : s[i + 1]);
      ++i;
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

}  // namespace detail

/// Line-delimited transcript log: session|round|turn|role|counted|content.
inline void save_transcript(std::ostream& out, const std::string& session_id,
                            const std::vector<TranscriptEntry>& entries) {
  for (const TranscriptEntry& e : entries) {
    const std::string role =
        e.speaker < 0 ? (e.turn == 0 ? "system" : "env") : "agent" + std::to_string(e.speaker);
    out << session_id << '|' << e.round << '|' << e.turn << '|' << role << '|'
        << (e.counted ? 1 : 0) << '|' << detail::escape_line(e.content) << '\n';
  }
}

inline std::vector<TranscriptEntry> load_transcript(std::istream& in) {
  std::vector<TranscriptEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TranscriptEntry e;
    std::size_t field = 0;
    std::string parts[6];
    std::size_t start = 0;
    for (int k = 0; k < 5; ++k) {
      const std::size_t bar = line.find('|', start);
      if (bar == std::string::npos) throw FormatError("bad transcript line: " + line);
      parts[field++] = line.substr(start, bar - start);
      start = bar + 1;
    }
    parts[field] = line.substr(start);
    e.round = std::stoi(parts[1]);
    e.turn = std::stoi(parts[2]);
    if (parts[3] == "system" || parts[3] == "env") {
      e.speaker = -1;
    } else if (parts[3].rfind("agent", 0) == 0) {
      e.speaker = std::stoi(parts[3].substr(5));
    } else {
      throw FormatError("bad transcript role: " + parts[3]);
    }
    e.counted = parts[4] == "1";
    e.content = detail::unescape_line(parts[5]);
    entries.push_back(e);
  }
  return entries;
}

/// Per-agent reply scripts recovered from a transcript; feeding these to
/// ScriptedBackends replays the negotiation bit-exactly.
inline std::vector<std::vector<std::string>> transcript_scripts(
    const std::vector<TranscriptEntry>& entries, int agent_count = 2) {
  std::vector<std::vector<std::string>> scripts(agent_count);
  for (const TranscriptEntry& e : entries) {
    if (e.speaker >= 0 && e.speaker < agent_count) scripts[e.speaker].push_back(e.content);
  }
  return scripts;
}

}  // namespace marlin
