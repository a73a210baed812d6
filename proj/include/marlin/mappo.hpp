#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "marlin/gridworld.hpp"
#include "marlin/nn.hpp"
#include "marlin/rng.hpp"

namespace marlin {

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Which generator produced a step: sampling the policy (ADS) or the
/// negotiation protocol (IAN).
enum class GeneratorKind { ADS, IAN };

inline const char* to_string(GeneratorKind g) {
  return g == GeneratorKind::ADS ? "ADS" : "IAN";
}

constexpr int kActorInputDim = 4;
constexpr int kCriticInputDim = 13;  // own obs + other obs + one-hot other action

/// Shared-parameter actor plus centralized critic, each with its own Adam
/// state. The critic sees joint information and exists only for training.
struct ActorCritic {
  MlpParams actor;
  MlpParams critic;
  AdamState actor_opt;
  AdamState critic_opt;

  static ActorCritic init(std::uint64_t seed, AdamConfig opt = {}) {
    ActorCritic m;
    m.actor = mlp_init({kActorInputDim, 256, 256, kNumActions}, seed);
    m.critic = mlp_init({kCriticInputDim, 16, 1}, seed ^ 0x632be59bd9b4e019ULL);
    m.actor_opt = AdamState::init(m.actor, opt);
    m.critic_opt = AdamState::init(m.critic, opt);
    return m;
  }
};

struct PpoConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  int epochs = 4;
  int minibatch = 64;
  double ent_coef = 0.01;
  double value_coef = 0.5;
};

struct TrajStep {
  Observation obs;
  GridAction action = GridAction::Wait;
  double log_prob = 0;
  double value = 0;
  double reward = 0;
  bool done = false;
};

/// One episode of experience. Both generators fill the same structure; the
/// per-step tag records which one acted, and ppo_update never branches on it.
struct Trajectory {
  std::vector<std::vector<TrajStep>> agents;     // [agent][t], equal lengths
  std::vector<GeneratorKind> generator;          // [t]

  int length() const { return agents.empty() ? 0 : static_cast<int>(agents[0].size()); }
  int agent_count() const { return static_cast<int>(agents.size()); }
};

inline std::vector<double> obs_vector(const Observation& o) {
  return {static_cast<double>(o.x), static_cast<double>(o.y),
          static_cast<double>(o.goal_x), static_cast<double>(o.goal_y)};
}

/// [own(4), other(4), one_hot(other_action)(5)] in this order.
inline std::vector<double> critic_input(const Observation& own, const Observation& other,
                                        GridAction other_action) {
  std::vector<double> v;
  v.reserve(kCriticInputDim);
  for (double x : obs_vector(own)) v.push_back(x);
  for (double x : obs_vector(other)) v.push_back(x);
  for (int a = 0; a < kNumActions; ++a) {
    v.push_back(a == static_cast<int>(other_action) ? 1.0 : 0.0);
  }
  return v;
}

struct AgentSample {
  GridAction action = GridAction::Wait;
  double log_prob = 0;
  double value = 0;
};

/// Action-distribution-sampling generator: each agent samples its own actor
/// head; values are evaluated afterwards so every critic input carries the
/// other agent's sampled action.
inline std::vector<AgentSample> g_ads(const GridWorld& world, const JointState& state,
                                      const ActorCritic& model, Rng& rng) {
  const int n = world.agent_count();
  std::vector<AgentSample> out(n);
  std::vector<Observation> obs(n);
  for (int i = 0; i < n; ++i) {
    obs[i] = observe(world, state, i);
    const auto logits = forward(model.actor, obs_vector(obs[i]));
    const auto [action, lp] = categorical_sample(logits, rng);
    out[i].action = static_cast<GridAction>(action);
    out[i].log_prob = lp;
  }
  for (int i = 0; i < n; ++i) {
    const int other = 1 - i;
    out[i].value = forward(model.critic,
                           critic_input(obs[i], obs[other], out[other].action))[0];
  }
  return out;
}

/// Greedy (argmax) joint action; used for evaluation episodes.
inline std::vector<GridAction> g_greedy(const GridWorld& world, const JointState& state,
                                        const ActorCritic& model) {
  std::vector<GridAction> out(world.agent_count());
  for (int i = 0; i < world.agent_count(); ++i) {
    const auto logits = forward(model.actor, obs_vector(observe(world, state, i)));
    out[i] = static_cast<GridAction>(argmax(logits));
  }
  return out;
}

struct GaeResult {
  std::vector<std::vector<double>> advantages;  // [agent][t], normalized
  std::vector<std::vector<double>> returns;     // [agent][t] = raw_adv + value
};

/// Standard GAE with bootstrap value 0 after a terminal step; advantages are
/// normalized over the whole batch (all agents, all steps) with a std guard.
inline GaeResult compute_gae(const Trajectory& traj, double gamma, double lambda) {
  GaeResult out;
  const int n = traj.agent_count();
  out.advantages.resize(n);
  out.returns.resize(n);
  for (int i = 0; i < n; ++i) {
    const auto& steps = traj.agents[i];
    const int T = static_cast<int>(steps.size());
    out.advantages[i].resize(T);
    out.returns[i].resize(T);
    double carry = 0;
    for (int t = T - 1; t >= 0; --t) {
      const double v_next = (steps[t].done || t + 1 == T) ? 0.0 : steps[t + 1].value;
      const double delta = steps[t].reward + gamma * v_next - steps[t].value;
      carry = steps[t].done ? delta : delta + gamma * lambda * carry;
      out.advantages[i][t] = carry;
      out.returns[i][t] = carry + steps[t].value;
    }
  }
  // normalize advantages across the batch
  double mean = 0;
  int count = 0;
  for (const auto& a : out.advantages) {
    for (double v : a) {
      mean += v;
      ++count;
    }
  }
  mean /= count;
  double var = 0;
  for (const auto& a : out.advantages) {
    for (double v : a) var += (v - mean) * (v - mean);
  }
  const double sd = std::max(std::sqrt(var / count), 1e-8);
  for (auto& a : out.advantages) {
    for (double& v : a) v = (v - mean) / sd;
  }
  return out;
}

/// Clipped-surrogate PPO update over the episode trajectory: `epochs` passes
/// of shuffled minibatches maximizing min(r*A, clip(r)*A) + entropy bonus,
/// critic regressed to GAE returns. IAN steps participate identically; their
/// stored log_prob is the policy's own log-probability of the negotiated
/// action, so the first-epoch ratio is exactly 1 there too.
///
/// Throws NonFiniteLoss and restores the pre-call model if any minibatch
/// loss goes non-finite.
inline void ppo_update(ActorCritic& model, const Trajectory& traj, const PpoConfig& cfg,
                       Rng& rng) {
  const int n = traj.agent_count();
  const int T = traj.length();
  if (T == 0) return;
  const GaeResult gae = compute_gae(traj, cfg.gamma, cfg.lambda);

  struct Sample {
    int agent;
    int t;
  };
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(n) * T);
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < T; ++t) samples.push_back({i, t});
  }

  const ActorCritic snapshot = model;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0u);

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      rng.shuffle(order);
      for (std::size_t lo = 0; lo < order.size(); lo += cfg.minibatch) {
        const std::size_t hi = std::min(order.size(), lo + cfg.minibatch);
        Gradients actor_grad = Gradients::zeros_like(model.actor);
        Gradients critic_grad = Gradients::zeros_like(model.critic);
        double loss = 0;
        for (std::size_t k = lo; k < hi; ++k) {
          const auto [i, t] = samples[order[k]];
          const TrajStep& step = traj.agents[i][t];
          const TrajStep& other = traj.agents[1 - i][t];
          const double adv = gae.advantages[i][t];
          const double ret = gae.returns[i][t];

          // policy term
          const ForwardCache actor_cache = forward_cache(model.actor, obs_vector(step.obs));
          const std::vector<double>& logits = actor_cache.output;
          const int a = static_cast<int>(step.action);
          const double lp_new = log_softmax_at(logits, a);
          const double ratio = std::exp(lp_new - step.log_prob);
          const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
          const double unclipped_obj = ratio * adv;
          const double clipped_obj = clipped * adv;
          const std::vector<double> p = softmax(logits);
          double entropy = 0;
          for (double q : p) {
            if (q > 0) entropy -= q * std::log(q);
          }
          loss += -std::min(unclipped_obj, clipped_obj) - cfg.ent_coef * entropy;

          std::vector<double> d_logits(kNumActions, 0.0);
          if (unclipped_obj <= clipped_obj) {
            // d(ratio)/d(logit_j) = ratio * (onehot_j - p_j)
            for (int j = 0; j < kNumActions; ++j) {
              d_logits[j] -= adv * ratio * ((j == a ? 1.0 : 0.0) - p[j]);
            }
          }
          for (int j = 0; j < kNumActions; ++j) {
            // dH/d(logit_j) = -p_j (log p_j + H)
            d_logits[j] += cfg.ent_coef * p[j] * (std::log(std::max(p[j], 1e-300)) + entropy);
          }
          backward(model.actor, actor_cache, d_logits, actor_grad);

          // value term: 0.5 * c_v * (V - R)^2
          const ForwardCache critic_cache =
              forward_cache(model.critic, critic_input(step.obs, other.obs, other.action));
          const double v = critic_cache.output[0];
          loss += 0.5 * cfg.value_coef * (v - ret) * (v - ret);
          backward(model.critic, critic_cache, {cfg.value_coef * (v - ret)}, critic_grad);
        }
        if (!std::isfinite(loss)) throw NonFiniteLoss("ppo_update: non-finite minibatch loss");
        const double inv = 1.0 / static_cast<double>(hi - lo);
        actor_grad.scale(inv);
        critic_grad.scale(inv);
        adam_step(model.actor, actor_grad, model.actor_opt);
        adam_step(model.critic, critic_grad, model.critic_opt);
      }
    }
  } catch (...) {
    model = snapshot;
    throw;
  }
}

inline void save_actor_critic(std::ostream& out, const ActorCritic& model) {
  out << "marlin-checkpoint v1\n";
  save_params(out, model.actor);
  save_adam(out, model.actor_opt);
  save_params(out, model.critic);
  save_adam(out, model.critic_opt);
}

inline ActorCritic load_actor_critic(std::istream& in) {
  std::string word, version;
  in >> word >> version;
  if (word != "marlin-checkpoint" || version != "v1") {
    throw CheckpointError("unrecognized checkpoint header");
  }
  ActorCritic model;
  model.actor = load_params(in);
  model.actor_opt = load_adam(in, model.actor);
  model.critic = load_params(in);
  model.critic_opt = load_adam(in, model.critic);
  if (model.actor.input_dim() != kActorInputDim ||
      model.actor.output_dim() != kNumActions ||
      model.critic.input_dim() != kCriticInputDim) {
    throw CheckpointError("checkpoint has unexpected network shapes");
  }
  return model;
}

/// Line-delimited trajectory log, one record per (step, agent).
inline void append_trajectory_log(std::ostream& out, int episode, const Trajectory& traj) {
  for (int t = 0; t < traj.length(); ++t) {
    for (int i = 0; i < traj.agent_count(); ++i) {
      const TrajStep& s = traj.agents[i][t];
      out << episode << ',' << t << ',' << i << ',' << s.obs.x << ',' << s.obs.y << ','
          << s.obs.goal_x << ',' << s.obs.goal_y << ',' << action_code(s.action) << ','
          << s.log_prob << ',' << s.value << ',' << s.reward << ','
          << to_string(traj.generator[t]) << '\n';
    }
  }
}

}  // namespace marlin
