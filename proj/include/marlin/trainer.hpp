#pragma once

#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "marlin/gridworld.hpp"
#include "marlin/mappo.hpp"
#include "marlin/negotiation.hpp"
#include "marlin/plan_cache.hpp"
#include "marlin/rng.hpp"

namespace marlin {

/// marlin: the full hybrid loop. mappo: ADS only, no negotiation. llm-only:
/// IAN only and the policy is never updated (pure negotiation baseline).
enum class TrainMode { Marlin, Mappo, LlmOnly };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Marlin: return "marlin";
    case TrainMode::Mappo: return "mappo";
    case TrainMode::LlmOnly: return "llm-only";
  }
  return "marlin";
}

inline std::optional<TrainMode> train_mode_from_string(const std::string& s) {
  if (s == "marlin") return TrainMode::Marlin;
  if (s == "mappo") return TrainMode::Mappo;
  if (s == "llm-only") return TrainMode::LlmOnly;
  return std::nullopt;
}

struct TrainerConfig {
  int m = 10;                 // half-length of the initialization phase
  int episode_max = 1600;
  int step_max = kDefaultStepMax;
  double toggle_prob = 0.1;   // midpoint generator switch chance
  int perf_buffer_len = 5;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Marlin;
  int eval_start = 100;       // greedy evaluation after this many episodes,
  int eval_every = 250;       // then every eval_every episodes
  PpoConfig ppo{};
  AdamConfig adam{};
  NegotiationConfig negotiation{};
};

/// Rolling window of the last perf_buffer_len episode performances.
class PerfBuffer {
 public:
  explicit PerfBuffer(int cap) : cap_(cap > 0 ? cap : 1) {}

  void push(double p) {
    if (static_cast<int>(values_.size()) == cap_) values_.erase(values_.begin());
    values_.push_back(p);
  }

  std::optional<double> mean() const {
    if (values_.empty()) return std::nullopt;
    double sum = 0.0;
    for (double v : values_) sum += v;
    return sum / static_cast<double>(values_.size());
  }

  int size() const { return static_cast<int>(values_.size()); }

 private:
  int cap_;
  std::vector<double> values_;
};

/// Step-0 generator choice: phase schedule first, then the cached-plan and
/// rolling-average rules. A missing LLM average prefers IAN to gather data;
/// a missing plan performance counts as 0.
inline GeneratorKind select_generator(int episode, int m, std::optional<double> p_plan,
                                      std::optional<double> p_bar,
                                      std::optional<double> p_llm_bar) {
  if (episode < m) return GeneratorKind::ADS;
  if (episode < 2 * m) return GeneratorKind::IAN;
  if (p_plan.value_or(0.0) == 1.0) return GeneratorKind::IAN;
  if (!p_llm_bar) return GeneratorKind::IAN;
  if (p_bar && *p_bar < *p_llm_bar) return GeneratorKind::IAN;
  return GeneratorKind::ADS;
}

/// Exactly at the midpoint step the active generator flips with probability
/// toggle_prob; everywhere else it is the identity.
inline GeneratorKind maybe_toggle(int step, int step_max, GeneratorKind g,
                                  double toggle_prob, Rng& rng) {
  if (step != step_max / 2) return g;
  if (rng.uniform() <= toggle_prob) {
    return g == GeneratorKind::ADS ? GeneratorKind::IAN : GeneratorKind::ADS;
  }
  return g;
}

struct EpisodeRecord {
  int episode = 0;
  double performance = 0.0;
  GeneratorKind start_generator = GeneratorKind::ADS;
  int collisions = 0;
  int steps = 0;
  int ads_steps = 0;
  int ian_steps = 0;
  bool backend_failure = false;
};

struct EvalRecord {
  int after_episode = 0;  // training episodes completed before this rollout
  double performance = 0.0;
};

struct EpisodeOutcome {
  EpisodeRecord record;
  Trajectory trajectory;
  std::vector<std::vector<TranscriptEntry>> transcripts;  // one per negotiation
};

namespace detail {

/// Policy evaluation of externally chosen (negotiated) actions: the log
/// probability the current actor assigns them and the critic value with the
/// other agent's taken action, mirroring what g_ads records for its samples.
inline std::vector<AgentSample> evaluate_joint(const GridWorld& world, const JointState& state,
                                               const ActorCritic& model,
                                               const std::vector<GridAction>& joint) {
  const int n = world.agent_count();
  std::vector<AgentSample> out(n);
  std::vector<Observation> obs(n);
  for (int i = 0; i < n; ++i) {
    obs[i] = observe(world, state, i);
    const auto logits = forward(model.actor, obs_vector(obs[i]));
    out[i].action = joint[i];
    out[i].log_prob = log_softmax_at(logits, static_cast<int>(joint[i]));
  }
  for (int i = 0; i < n; ++i) {
    const int other = 1 - i;
    out[i].value = forward(model.critic,
                           critic_input(obs[i], obs[other], joint[other]))[0];
  }
  return out;
}

}  // namespace detail

/// One training episode. The buffer is read for the rolling average but not
/// written: the caller appends the returned performance afterwards, so an
/// episode never sees its own score.
inline EpisodeOutcome train_episode(const GridWorld& world, ActorCritic& model,
                                    PlanCache& cache, ChatBackend& backend0,
                                    ChatBackend& backend1, const TrainerConfig& cfg,
                                    int episode, const PerfBuffer& buffer, Rng& rng) {
  EpisodeOutcome out;
  out.record.episode = episode;
  out.trajectory.agents.resize(world.agent_count());

  JointState state = initial_state(world);
  // an episode that begins solved has nothing to generate or learn from
  if (all_at_goals(world, state)) {
    out.record.performance = 1.0;
    return out;
  }

  GeneratorKind g = GeneratorKind::ADS;
  if (cfg.mode == TrainMode::Marlin) {
    const StateKey key = state_key(world, state);
    const auto cached = cache.load_plan(key);
    const std::optional<double> p_plan =
        cached ? std::optional<double>(cached->performance) : std::nullopt;
    g = select_generator(episode, cfg.m, p_plan, buffer.mean(), cache.llm_mean_perf(key));
  } else if (cfg.mode == TrainMode::LlmOnly) {
    g = GeneratorKind::IAN;
  }
  out.record.start_generator = g;

  std::optional<Plan> plan;
  std::size_t cursor = 0;
  std::vector<Cell> predicted;  // where the consumed plan says we should be
  bool ian_blocked = false;     // a backend failure silences IAN this episode

  // Acquire a plan for the live state: reuse the cached one unless it is
  // missing or scores below the rolling average, in which case negotiate a
  // fresh plan and store it (replace-if-better).
  const auto acquire_plan = [&]() -> bool {
    const StateKey key = state_key(world, state);
    const auto cached = cache.load_plan(key);
    const auto p_bar = buffer.mean();
    if (cached && !(p_bar && cached->performance < *p_bar)) {
      plan = *cached;
    } else {
      try {
        std::vector<TranscriptEntry> transcript;
        Plan fresh = make_plan(world, state, backend0, backend1, cfg.negotiation, rng,
                               &transcript);
        out.transcripts.push_back(std::move(transcript));
        cache.store_plan(key, fresh);
        plan = std::move(fresh);
      } catch (const BackendError&) {
        plan.reset();
        return false;
      }
    }
    cursor = 0;
    predicted = state.positions;
    return true;
  };

  while (true) {
    if (cfg.mode == TrainMode::Marlin && !ian_blocked) {
      g = maybe_toggle(state.step_index, cfg.step_max, g, cfg.toggle_prob, rng);
    }

    GeneratorKind used = g;
    if (g == GeneratorKind::IAN) {
      const bool stale = !plan || cursor >= plan->moves.size() || predicted != state.positions;
      if (stale && !acquire_plan()) {
        ian_blocked = true;
        out.record.backend_failure = true;
        g = GeneratorKind::ADS;
        used = GeneratorKind::ADS;
      }
      if (used == GeneratorKind::IAN && (!plan || cursor >= plan->moves.size())) {
        used = GeneratorKind::ADS;  // degenerate empty plan: sample this step
      }
    }

    std::vector<AgentSample> samples;
    if (used == GeneratorKind::IAN) {
      samples = detail::evaluate_joint(world, state, model, plan->moves[cursor]);
      ++cursor;
    } else {
      samples = g_ads(world, state, model, rng);
    }

    std::vector<GridAction> joint(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) joint[i] = samples[i].action;
    const StepResult result = step(world, state, joint, RewardParams{}, cfg.step_max);

    for (int i = 0; i < world.agent_count(); ++i) {
      out.trajectory.agents[i].push_back(TrajStep{observe(world, state, i), joint[i],
                                                  samples[i].log_prob, samples[i].value,
                                                  result.rewards[i], result.done});
      out.record.collisions += result.collisions[i];
    }
    out.trajectory.generator.push_back(used);
    if (used == GeneratorKind::IAN) {
      ++out.record.ian_steps;
      predicted = result.next_state.positions;
    } else {
      ++out.record.ads_steps;
    }

    state = result.next_state;
    ++out.record.steps;
    if (result.done) break;
  }

  out.record.performance = performance(world, state);
  if (cfg.mode != TrainMode::LlmOnly && out.trajectory.length() > 0) {
    ppo_update(model, out.trajectory, cfg.ppo, rng);
  }
  return out;
}

/// Greedy (argmax) rollout of the current policy; no exploration, no
/// learning, nothing recorded into the rolling buffer.
inline double eval_episode(const GridWorld& world, const ActorCritic& model, int step_max) {
  JointState state = initial_state(world);
  while (true) {
    const StepResult result =
        step(world, state, g_greedy(world, state, model), RewardParams{}, step_max);
    state = result.next_state;
    if (result.done) break;
  }
  return performance(world, state);
}

struct TrainingRecord {
  std::vector<EpisodeRecord> episodes;
  std::vector<EvalRecord> evals;
  // (episode, negotiation session) for every negotiation that ran
  std::vector<std::pair<int, std::vector<TranscriptEntry>>> transcripts;
};

struct TrainingResult {
  TrainingRecord record;
  ActorCritic model;
  PlanCache cache;
};

/// The outer loop: episodes, the rolling buffer, and the greedy-evaluation
/// cadence (after eval_start episodes, then every eval_every). Deterministic
/// given the seed and deterministic backends.
inline TrainingResult run_training(const GridWorld& world, const TrainerConfig& cfg,
                                   ChatBackend& backend0, ChatBackend& backend1) {
  TrainingResult result;
  result.model = ActorCritic::init(cfg.seed, cfg.adam);
  Rng rng = Rng(cfg.seed).split(0x6d61726c696eULL);
  PerfBuffer buffer(cfg.perf_buffer_len);

  for (int episode = 0; episode < cfg.episode_max; ++episode) {
    EpisodeOutcome out = train_episode(world, result.model, result.cache, backend0,
                                       backend1, cfg, episode, buffer, rng);
    buffer.push(out.record.performance);
    result.record.episodes.push_back(out.record);
    for (auto& transcript : out.transcripts) {
      result.record.transcripts.emplace_back(episode, std::move(transcript));
    }
    const int completed = episode + 1;
    if (completed >= cfg.eval_start && (completed - cfg.eval_start) % cfg.eval_every == 0) {
      result.record.evals.push_back(
          EvalRecord{completed, eval_episode(world, result.model, cfg.step_max)});
    }
  }
  return result;
}

inline void write_episode_csv(std::ostream& out, const TrainingRecord& record) {
  out << "episode,performance,generator,collisions\n";
  out << std::setprecision(17);
  for (const EpisodeRecord& e : record.episodes) {
    out << e.episode << ',' << e.performance << ',' << to_string(e.start_generator) << ','
        << e.collisions << '\n';
  }
}

inline void write_eval_csv(std::ostream& out, const TrainingRecord& record) {
  out << "episode,performance\n";
  out << std::setprecision(17);
  for (const EvalRecord& e : record.evals) {
    out << e.after_episode << ',' << e.performance << '\n';
  }
}

}  // namespace marlin
