#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "marlin/experiment.hpp"
#include "marlin/negotiation.hpp"
#include "marlin/remote_backend.hpp"
#include "marlin/swarm.hpp"
#include "marlin/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw std::runtime_error("cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::unique_ptr<marlin::ChatBackend> make_backend(const std::string& kind,
                                                  const marlin::GridWorld& world,
                                                  const std::string& script_path) {
  if (kind == "oracle") return std::make_unique<marlin::OracleBackend>(world);
  if (kind == "scripted") {
    if (script_path.empty()) {
      throw std::runtime_error("scripted backend wants --script0/--script1 reply files");
    }
    std::ifstream in(script_path);
    if (!in.good()) throw std::runtime_error("cannot read " + script_path);
    return std::make_unique<marlin::ScriptedBackend>(marlin::ScriptedBackend::from_stream(in));
  }
  if (kind == "remote") {
    auto cfg = marlin::RemoteBackendConfig::from_env();
    if (cfg.url.empty()) {
      throw std::runtime_error("remote backend wants MARLIN_CHAT_URL (and optionally "
                               "MARLIN_API_KEY, MARLIN_CHAT_MODEL) in the environment");
    }
    return std::make_unique<marlin::RemoteBackend>(cfg);
  }
  throw std::runtime_error("unknown backend: " + kind);
}

/// Bare scenario names resolve against the maps directory; anything that
/// looks like a path is used as-is.
std::string resolve_map(const std::string& scenario, const std::string& maps_dir) {
  if (scenario.find('/') != std::string::npos || scenario.size() > 4 &&
      scenario.compare(scenario.size() - 4, 4, ".map") == 0) {
    return scenario;
  }
  return maps_dir + "/" + scenario + ".map";
}

int cmd_train(const std::string& scenario, const std::string& mode_name,
              const std::string& backend, int episodes, std::uint64_t seed,
              const std::string& out_dir, int m, int step_max, const std::string& script0,
              const std::string& script1, std::string cache_path) {
  const marlin::GridWorld world = marlin::load_scenario(slurp(scenario));
  marlin::TrainerConfig cfg;
  const auto mode = marlin::train_mode_from_string(mode_name);
  if (!mode) throw std::runtime_error("unknown mode: " + mode_name);
  cfg.mode = *mode;
  cfg.episode_max = episodes;
  cfg.seed = seed;
  if (m > 0) cfg.m = m;
  if (step_max > 0) cfg.step_max = step_max;

  auto b0 = make_backend(backend, world, script0);
  auto b1 = make_backend(backend, world, script1);
  const marlin::TrainingResult result = marlin::run_training(world, cfg, *b0, *b1);

  fs::create_directories(out_dir);
  {
    std::ofstream out(fs::path(out_dir) / "episodes.csv");
    marlin::write_episode_csv(out, result.record);
  }
  {
    std::ofstream out(fs::path(out_dir) / "evals.csv");
    marlin::write_eval_csv(out, result.record);
  }
  {
    std::ofstream out(fs::path(out_dir) / "model.ckpt");
    marlin::save_actor_critic(out, result.model);
  }
  if (cache_path.empty()) cache_path = (fs::path(out_dir) / "cache.txt").string();
  {
    std::ofstream out(cache_path);
    result.cache.save(out);
  }
  {
    std::ofstream out(fs::path(out_dir) / "transcripts.log");
    for (const auto& [episode, entries] : result.record.transcripts) {
      marlin::save_transcript(out, world.scenario_id + "#ep" + std::to_string(episode),
                              entries);
    }
  }

  double mean_perf = 0.0;
  for (const auto& e : result.record.episodes) mean_perf += e.performance;
  if (!result.record.episodes.empty()) {
    mean_perf /= static_cast<double>(result.record.episodes.size());
  }
  std::cout << "trained " << result.record.episodes.size() << " episodes on "
            << world.scenario_id << " (mode " << to_string(cfg.mode) << ", backend "
            << backend << ", seed " << seed << ")\n";
  std::cout << "mean performance " << mean_perf;
  if (!result.record.evals.empty()) {
    std::cout << ", final greedy eval " << result.record.evals.back().performance;
  }
  std::cout << "\noutputs in " << out_dir
            << ": episodes.csv evals.csv model.ckpt transcripts.log; cache at "
            << cache_path << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& scenario, int episodes,
             int step_max) {
  const marlin::GridWorld world = marlin::load_scenario(slurp(scenario));
  std::ifstream in(checkpoint);
  if (!in.good()) throw std::runtime_error("cannot read " + checkpoint);
  const marlin::ActorCritic model = marlin::load_actor_critic(in);
  std::cout << "episode,performance\n";
  double mean = 0.0;
  for (int i = 0; i < episodes; ++i) {
    const double perf = marlin::eval_episode(world, model, step_max);
    mean += perf;
    std::cout << i << ',' << perf << '\n';
  }
  if (episodes > 0) {
    std::cerr << "greedy mean over " << episodes << " episodes: " << mean / episodes << '\n';
  }
  return 0;
}

int cmd_replay(const std::string& transcript_path, const std::string& scenario,
               const std::string& session) {
  const marlin::GridWorld world = marlin::load_scenario(slurp(scenario));

  // logs may hold many sessions; pick one by its id prefix
  std::vector<std::string> session_ids;
  std::ostringstream selected;
  std::istringstream lines(slurp(transcript_path));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto bar = line.find('|');
    if (bar == std::string::npos) throw std::runtime_error("bad transcript line: " + line);
    const std::string id = line.substr(0, bar);
    if (session_ids.empty() || session_ids.back() != id) session_ids.push_back(id);
    if (session.empty() || id == session) selected << line << '\n';
  }
  if (session.empty() && session_ids.size() > 1) {
    std::ostringstream msg;
    msg << "log holds " << session_ids.size() << " sessions, pick one with --session:";
    for (const std::string& id : session_ids) msg << ' ' << id;
    throw std::runtime_error(msg.str());
  }
  std::istringstream in(selected.str());
  const auto entries = marlin::load_transcript(in);
  if (entries.empty()) throw std::runtime_error("no transcript entries for session");
  for (const auto& e : entries) {
    const std::string role =
        e.speaker < 0 ? (e.turn == 0 ? "system" : "env") : "agent " + std::to_string(e.speaker);
    std::cout << "[round " << e.round << " turn " << e.turn << "] " << role << ":\n"
              << e.content << "\n\n";
  }

  const auto scripts = marlin::transcript_scripts(entries);
  marlin::ScriptedBackend b0(scripts[0]);
  marlin::ScriptedBackend b1(scripts[1]);
  marlin::Rng rng(0);
  const marlin::Plan plan = marlin::make_plan(world, marlin::initial_state(world), b0, b1,
                                              marlin::NegotiationConfig{}, rng);
  std::cout << "replayed plan: " << plan.moves.size() << " joint steps, performance "
            << plan.performance << '\n';
  for (std::size_t s = 0; s < plan.moves.size(); ++s) {
    std::cout << "  step " << s << ':';
    for (const marlin::GridAction a : plan.moves[s]) std::cout << ' ' << marlin::action_code(a);
    std::cout << '\n';
  }
  return 0;
}

int cmd_swarm(const std::string& map_path, int agents, const std::string& backend,
              int ticks_max, std::uint64_t seed, const std::string& out_path) {
  const marlin::SwarmMap map = marlin::load_swarm_map(slurp(map_path));
  marlin::SwarmConfig cfg;
  cfg.ticks_max = ticks_max;
  cfg.seed = seed;
  marlin::BackendFactory factory;
  if (backend == "oracle") {
    factory = marlin::oracle_backend_factory();
  } else if (backend == "remote") {
    auto remote_cfg = marlin::RemoteBackendConfig::from_env();
    if (remote_cfg.url.empty()) {
      throw std::runtime_error("remote backend wants MARLIN_CHAT_URL in the environment");
    }
    factory = [remote_cfg](const marlin::GridWorld&, int) {
      return std::make_unique<marlin::RemoteBackend>(remote_cfg);
    };
  } else {
    throw std::runtime_error("swarm backend must be oracle or remote, got: " + backend);
  }

  marlin::SwarmSim sim(map, factory, cfg, agents);
  const int n = static_cast<int>(sim.agents().size());
  std::optional<int> ticks;
  if (out_path.empty()) {
    ticks = sim.run(&std::cout);
  } else {
    std::ofstream csv(out_path);
    ticks = sim.run(&csv);
  }
  std::ostream& info = out_path.empty() ? std::cerr : std::cout;
  if (ticks) {
    info << "all " << n << " agents exited at tick " << *ticks << " (liveness bound "
         << marlin::liveness_bound(map, n) << ")\n";
    return 0;
  }
  int inside = 0;
  for (const auto& agent : sim.agents()) {
    if (agent.status != marlin::SwarmStatus::Exited) ++inside;
  }
  info << "ticks-max " << ticks_max << " reached with " << inside << " agents still inside\n";
  return 2;
}

int cmd_experiment(const std::string& spec_path, const std::string& out_dir,
                   const std::string& maps_dir) {
  const marlin::ExperimentSpec spec = marlin::parse_experiment_spec(slurp(spec_path));
  if (spec.backend != "oracle" && spec.backend != "remote") {
    throw std::runtime_error("experiment backend must be oracle or remote, got: " +
                             spec.backend);
  }

  const marlin::CellRunner runner = [&](const std::string& scenario, marlin::TrainMode mode,
                                        std::uint64_t seed) {
    const marlin::GridWorld world =
        marlin::load_scenario(slurp(resolve_map(scenario, maps_dir)));
    marlin::TrainerConfig cfg = spec.trainer;
    cfg.mode = mode;
    cfg.seed = seed;
    auto b0 = make_backend(spec.backend, world, "");
    auto b1 = make_backend(spec.backend, world, "");
    std::cerr << "running " << scenario << " / " << to_string(mode) << " / seed " << seed
              << "...\n";
    return marlin::run_training(world, cfg, *b0, *b1).record;
  };

  const marlin::ExperimentResult result = marlin::run_experiment(spec, runner, out_dir);
  const std::size_t cells = spec.scenarios.size() * spec.modes.size() * spec.seeds.size();
  std::cout << "ran " << cells - result.failures.size() << "/" << cells << " cells; outputs in "
            << out_dir << " (curves/, plots/, summary.csv, report.md)\n";
  for (const auto& failure : result.failures) {
    std::cout << "failed: " << failure.cell.scenario << " / " << to_string(failure.cell.mode)
              << " / seed " << failure.cell.seed << ": " << failure.reason << '\n';
  }
  return result.failures.empty() ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MARLIN: MAPPO training with negotiation-guided exploration on corridor "
               "gridworlds"};
  app.require_subcommand(1);

  // train
  std::string scenario, mode = "marlin", backend = "oracle", out_dir = "run_out";
  std::string script0, script1, cache_path;
  int episodes = 1600, m = 0, step_max = 0;
  std::uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "Train a policy on a scenario");
  train->add_option("--scenario", scenario, "map file")->required();
  train->add_option("--mode", mode, "marlin|mappo|llm-only");
  train->add_option("--backend", backend, "oracle|scripted|remote");
  train->add_option("--episodes", episodes, "training episodes");
  train->add_option("--seed", seed, "run seed");
  train->add_option("--out", out_dir, "output directory");
  train->add_option("--m", m, "initialization half-length override");
  train->add_option("--step-max", step_max, "episode step cap override");
  train->add_option("--script0", script0, "agent-0 replies file (scripted backend)");
  train->add_option("--script1", script1, "agent-1 replies file (scripted backend)");
  train->add_option("--cache", cache_path, "plan cache output path");

  // eval
  std::string checkpoint;
  int eval_episodes = 1, eval_step_max = marlin::kDefaultStepMax;
  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint file")->required();
  eval->add_option("--scenario", scenario, "map file")->required();
  eval->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval->add_option("--step-max", eval_step_max, "episode step cap");

  // replay
  std::string transcript_path;
  auto* replay = app.add_subcommand("replay", "Print and re-run a negotiation transcript");
  replay->add_option("--transcript", transcript_path, "transcript log file")->required();
  replay->add_option("--scenario", scenario, "map file")->required();
  std::string session_id;
  replay->add_option("--session", session_id, "session id when the log holds several");

  // swarm
  std::string swarm_map, swarm_out;
  int agents = -1, ticks_max = 10000;
  auto* swarm = app.add_subcommand("swarm", "Crowd simulation with negotiated passing");
  swarm->add_option("--map", swarm_map, "swarm map file")->required();
  swarm->add_option("--agents", agents, "agent count (default: all start markers)");
  swarm->add_option("--backend", backend, "oracle|remote");
  swarm->add_option("--ticks-max", ticks_max, "tick budget");
  swarm->add_option("--seed", seed, "run seed");
  swarm->add_option("--out", swarm_out, "per-tick CSV path (default: stdout)");

  // experiment
  std::string spec_path, maps_dir = "maps";
  auto* experiment = app.add_subcommand("experiment", "Seed sweep with paired comparisons");
  experiment->add_option("--spec", spec_path, "experiment document")->required();
  experiment->add_option("--out", out_dir, "output directory")->default_val("experiment_out");
  experiment->add_option("--maps-dir", maps_dir, "directory for bare scenario names");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(scenario, mode, backend, episodes, seed, out_dir, m, step_max,
                       script0, script1, cache_path);
    }
    if (eval->parsed()) return cmd_eval(checkpoint, scenario, eval_episodes, eval_step_max);
    if (replay->parsed()) return cmd_replay(transcript_path, scenario, session_id);
    if (swarm->parsed()) return cmd_swarm(swarm_map, agents, backend, ticks_max, seed, swarm_out);
    if (experiment->parsed()) return cmd_experiment(spec_path, out_dir, maps_dir);
  } catch (const std::exception& error) {
    std::cerr << "error: " << error.what() << '\n';
    return 1;
  }
  return 1;
}
