#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "marlin/negotiation.hpp"
#include "marlin/remote_backend.hpp"
#include "oracles.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string map_path(const std::string& name) {
  return std::string(MARLIN_SOURCE_DIR) + "/maps/" + name + ".map";
}

marlin::GridWorld load_map(const std::string& name) {
  return marlin::load_scenario(read_file(map_path(name)));
}

marlin::ScriptedBackend load_script(const std::string& name) {
  std::ifstream in(std::string(MARLIN_SOURCE_DIR) + "/tests/fixtures/negotiation/" + name);
  REQUIRE(in.good());
  return marlin::ScriptedBackend::from_stream(in);
}

int count_occurrences(const std::string& text, const std::string& needle) {
  int count = 0;
  std::size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

std::vector<marlin::GridAction> actions(std::initializer_list<marlin::GridAction> list) {
  return {list};
}

using marlin::GridAction;

struct ThrowingBackend : marlin::ChatBackend {
  std::string reply(const std::vector<marlin::ChatMessage>&) override {
    throw marlin::BackendError("transport down");
  }
};

}  // namespace

TEST_CASE("leader selection is deterministic by default, uniform when random") {
  marlin::Rng rng(11);
  for (int i = 0; i < 10; ++i) {
    CHECK(marlin::select_leader(2, marlin::LeaderRule::Deterministic, rng) == 0);
  }
  int ones = 0;
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) {
    const int leader = marlin::select_leader(2, marlin::LeaderRule::Random, rng);
    REQUIRE((leader == 0 || leader == 1));
    ones += leader;
  }
  const double frac = static_cast<double>(ones) / trials;
  CHECK(frac > 0.47);
  CHECK(frac < 0.53);
  CHECK(marlin::select_leader(1, marlin::LeaderRule::Random, rng) == 0);
}

TEST_CASE("system prompt embeds the map and differs only in the agent binding") {
  const auto world = load_map("single_slot");
  const auto state = marlin::initial_state(world);
  const std::string p0 = marlin::build_system_prompt(world, state, 0);
  const std::string p1 = marlin::build_system_prompt(world, state, 1);

  for (const char* token : {"@NORTH", "@SOUTH", "@EAST", "@WEST", "@WAIT"}) {
    INFO(token);
    CHECK(count_occurrences(p0, token) == 1);
  }
  CHECK(p0.find(marlin::render_map(world, state)) != std::string::npos);
  CHECK(p0.find("(0,1) and must reach (4,1)") != std::string::npos);
  CHECK(p0.find("(4,1) and must reach (0,1)") != std::string::npos);

  std::string rebound = p0;
  const std::string b0 = "You are agent 0.";
  const std::string b1 = "You are agent 1.";
  REQUIRE(rebound.find(b0) == 0);
  rebound.replace(rebound.find(b0), b0.size(), b1);
  CHECK(rebound == p1);
}

TEST_CASE("move grammar round-trips every joint action") {
  const GridAction all[] = {GridAction::Wait, GridAction::Forward, GridAction::Backward,
                            GridAction::Left, GridAction::Right};
  for (GridAction a : all) {
    for (GridAction b : all) {
      const std::vector<GridAction> joint{a, b};
      CHECK(marlin::parse_moves(marlin::render_move_block(joint)) == joint);
    }
  }
}

TEST_CASE("move parser rejects unknown tokens and incomplete blocks") {
  CHECK_THROWS_AS(marlin::parse_moves("MOVE 0: @UP\nMOVE 1: @WAIT\n"), marlin::FormatError);
  CHECK_THROWS_AS(marlin::parse_moves("MOVE 0: @WAIT\n"), marlin::FormatError);
  CHECK_THROWS_AS(marlin::parse_moves("no moves here at all"), marlin::FormatError);
  CHECK_THROWS_AS(marlin::parse_moves("move 0: @wait\nmove 1: @wait\n"), marlin::FormatError);
  CHECK_THROWS_AS(marlin::parse_moves("MOVE 7: @WAIT\nMOVE 0: @WAIT\n"), marlin::FormatError);
}

TEST_CASE("move parser takes the last complete block and tolerates prose") {
  const auto parsed = marlin::parse_moves(
      "I think we should be careful here.\n"
      "MOVE 0: @NORTH\nMOVE 1: @SOUTH\n"
      "Actually, safer is:\nMOVE 0: @WAIT\nMOVE 1: @EAST\nThanks!\n");
  CHECK(parsed == actions({GridAction::Wait, GridAction::Right}));

  // repeated agent line before the block completes: the later line wins
  const auto overwritten =
      marlin::parse_moves("MOVE 0: @NORTH\nMOVE 0: @SOUTH\nMOVE 1: @WAIT\n");
  CHECK(overwritten == actions({GridAction::Backward, GridAction::Wait}));
}

TEST_CASE("agreement token must stand alone") {
  CHECK(marlin::contains_agree_token("AGREE"));
  CHECK(marlin::contains_agree_token("I AGREE, do it.\nMOVE 0: @WAIT\n"));
  CHECK_FALSE(marlin::contains_agree_token("I DISAGREE with that plan"));
  CHECK_FALSE(marlin::contains_agree_token("AGREEMENT pending"));
  CHECK_FALSE(marlin::contains_agree_token("no token here"));
}

TEST_CASE("agree-fast fixture adopts the proposal with a two-message round") {
  const auto world = load_map("single_slot");
  auto a0 = load_script("agree_fast_a0.txt");
  auto a1 = load_script("agree_fast_a1.txt");
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, marlin::NegotiationConfig{}, rng);

  CHECK(round.agreed);
  CHECK(round.actions == actions({GridAction::Right, GridAction::Wait}));
  REQUIRE(transcript.size() == 3);  // system + proposal + agreement
  CHECK(transcript[0].speaker == -1);
  CHECK(transcript[1].speaker == 0);
  CHECK(transcript[2].speaker == 1);
  CHECK(transcript[1].counted);
  CHECK(transcript[2].counted);
}

TEST_CASE("limit-out fixture adopts the last parseable proposal") {
  const auto world = load_map("single_slot");
  auto a0 = load_script("limit_out_a0.txt");
  auto a1 = load_script("limit_out_a1.txt");
  marlin::NegotiationConfig cfg;
  cfg.message_limit = 4;
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, cfg, rng);

  CHECK_FALSE(round.agreed);
  CHECK(round.actions == actions({GridAction::Wait, GridAction::Right}));
  int counted = 0;
  for (const auto& e : transcript) counted += e.counted ? 1 : 0;
  CHECK(counted == 4);
  CHECK(transcript.size() == 5);  // system + 4 counted, no retries
}

TEST_CASE("malformed-then-corrected fixture retries the same speaker") {
  const auto world = load_map("single_slot");
  auto a0 = load_script("malformed_corrected_a0.txt");
  auto a1 = load_script("malformed_corrected_a1.txt");
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, marlin::NegotiationConfig{}, rng);

  CHECK(round.agreed);
  CHECK(round.actions == actions({GridAction::Right, GridAction::Wait}));
  REQUIRE(transcript.size() == 4);  // system + malformed + corrected + agreement
  CHECK(transcript[1].speaker == 0);
  CHECK_FALSE(transcript[1].counted);
  CHECK(transcript[2].speaker == 0);
  CHECK(transcript[2].counted);
  CHECK(transcript[3].speaker == 1);
  CHECK(transcript[3].counted);
}

TEST_CASE("double-move-block fixture adopts the final block") {
  const auto world = load_map("single_slot");
  auto a0 = load_script("double_block_a0.txt");
  auto a1 = load_script("double_block_a1.txt");
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, marlin::NegotiationConfig{}, rng);

  CHECK(round.agreed);
  CHECK(round.actions == actions({GridAction::Wait, GridAction::Left}));
  CHECK(transcript.size() == 3);
}

TEST_CASE("exhausting the format-retry budget ends the round with a joint wait") {
  const auto world = load_map("single_slot");
  marlin::NegotiationConfig cfg;
  marlin::ScriptedBackend a0(std::vector<std::string>(
      cfg.max_format_retries + 1, "thinking out loud with no move lines"));
  marlin::ScriptedBackend a1({"AGREE\nMOVE 0: @WAIT\nMOVE 1: @WAIT\n"});
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, cfg, rng);

  CHECK_FALSE(round.agreed);
  CHECK(round.actions == actions({GridAction::Wait, GridAction::Wait}));
  // system + (max_format_retries + 1) malformed replies, follower never speaks
  REQUIRE(transcript.size() == static_cast<std::size_t>(cfg.max_format_retries) + 2);
  for (std::size_t i = 1; i < transcript.size(); ++i) {
    CHECK(transcript[i].speaker == 0);
    CHECK_FALSE(transcript[i].counted);
  }
}

TEST_CASE("retry exhaustion after a parseable proposal adopts that proposal") {
  const auto world = load_map("single_slot");
  marlin::NegotiationConfig cfg;
  marlin::ScriptedBackend a0({"MOVE 0: @EAST\nMOVE 1: @WAIT\n"});
  marlin::ScriptedBackend a1(
      std::vector<std::string>(cfg.max_format_retries + 1, "hmm, let me think"));
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, cfg, rng);

  CHECK_FALSE(round.agreed);
  CHECK(round.actions == actions({GridAction::Right, GridAction::Wait}));
}

TEST_CASE("a bare AGREE without a move block is malformed and gets retried") {
  const auto world = load_map("single_slot");
  marlin::ScriptedBackend a0({"MOVE 0: @EAST\nMOVE 1: @WAIT\n"});
  marlin::ScriptedBackend a1({"AGREE", "AGREE\nMOVE 0: @EAST\nMOVE 1: @WAIT\n"});
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, marlin::NegotiationConfig{}, rng);

  CHECK(round.agreed);
  CHECK(round.actions == actions({GridAction::Right, GridAction::Wait}));
  REQUIRE(transcript.size() == 4);
  CHECK_FALSE(transcript[2].counted);
}

TEST_CASE("DISAGREE does not end the round") {
  const auto world = load_map("single_slot");
  marlin::ScriptedBackend a0({"MOVE 0: @EAST\nMOVE 1: @WAIT\n",
                              "AGREE\nMOVE 0: @WAIT\nMOVE 1: @WEST\n"});
  marlin::ScriptedBackend a1({"I DISAGREE.\nMOVE 0: @WAIT\nMOVE 1: @WEST\n"});
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, marlin::NegotiationConfig{}, rng);

  CHECK(round.agreed);
  CHECK(round.actions == actions({GridAction::Wait, GridAction::Left}));
  CHECK(transcript.size() == 4);
}

TEST_CASE("round transcripts never exceed the message and retry budgets") {
  const auto world = load_map("single_slot");
  marlin::NegotiationConfig cfg;
  cfg.message_limit = 3;
  cfg.max_format_retries = 2;
  // interleave garbage and proposals; both agents misbehave
  marlin::ScriptedBackend a0({"???", "MOVE 0: @EAST\nMOVE 1: @WAIT\n",
                              "MOVE 0: @EAST\nMOVE 1: @WEST\n"});
  marlin::ScriptedBackend a1({"!!!", "MOVE 0: @WAIT\nMOVE 1: @WEST\n"});
  marlin::Rng rng(0);
  const auto [round, transcript] = marlin::negotiate_round(
      world, marlin::initial_state(world), a0, a1, cfg, rng);

  CHECK(transcript.size() <=
        static_cast<std::size_t>(cfg.message_limit + cfg.max_format_retries + 1));
  CHECK(round.actions == actions({GridAction::Right, GridAction::Left}));
}

TEST_CASE("backend failure mid-round propagates with the partial transcript") {
  const auto world = load_map("single_slot");
  marlin::ScriptedBackend a0({"MOVE 0: @EAST\nMOVE 1: @WAIT\n"});
  ThrowingBackend a1;
  marlin::Rng rng(0);
  try {
    marlin::negotiate_round(world, marlin::initial_state(world), a0, a1,
                            marlin::NegotiationConfig{}, rng);
    FAIL("expected BackendError");
  } catch (const marlin::BackendError& err) {
    REQUIRE(err.partial_transcript.size() == 2);  // system + first proposal
    CHECK(err.partial_transcript[1].speaker == 0);
  }
}

TEST_CASE("oracle-backed plans are optimal on every fixture map") {
  for (const char* name : {"single_slot", "symmetrical_two_slot", "asymmetrical_two_slot",
                           "two_path", "maze_like"}) {
    INFO(name);
    const auto world = load_map(name);
    const auto fixture = oracle::parse_map(read_file(map_path(name)));
    marlin::OracleBackend a0(world);
    marlin::OracleBackend a1(world);
    marlin::Rng rng(0);
    const auto plan = marlin::make_plan(world, marlin::initial_state(world), a0, a1,
                                        marlin::NegotiationConfig{}, rng);
    CHECK(plan.performance == 1.0);
    const int optimal = oracle::joint_min_steps(fixture);
    REQUIRE(optimal > 0);
    CHECK(static_cast<int>(plan.moves.size()) == optimal);
  }
}

TEST_CASE("oracle rounds agree on the second message") {
  const auto world = load_map("single_slot");
  marlin::OracleBackend a0(world);
  marlin::OracleBackend a1(world);
  marlin::Rng rng(0);
  std::vector<marlin::TranscriptEntry> transcript;
  const auto plan = marlin::make_plan(world, marlin::initial_state(world), a0, a1,
                                      marlin::NegotiationConfig{}, rng, &transcript);
  int counted = 0;
  int injected = 0;
  for (const auto& e : transcript) {
    if (e.speaker >= 0) {
      CHECK(e.counted);
      ++counted;
    } else {
      ++injected;
    }
  }
  CHECK(counted == 2 * static_cast<int>(plan.moves.size()));
  // one system prompt plus one position update between consecutive rounds
  CHECK(injected == static_cast<int>(plan.moves.size()));
}

TEST_CASE("plan performance matches simulating its moves") {
  const auto world = load_map("maze_like");
  marlin::OracleBackend a0(world);
  marlin::OracleBackend a1(world);
  marlin::Rng rng(0);
  const auto plan = marlin::make_plan(world, marlin::initial_state(world), a0, a1,
                                      marlin::NegotiationConfig{}, rng);
  marlin::JointState state = plan.origin;
  for (const auto& joint : plan.moves) {
    state = marlin::step(world, state, joint, marlin::RewardParams{}, 1000).next_state;
  }
  CHECK(marlin::performance(world, state) == plan.performance);
  CHECK(marlin::all_at_goals(world, state));
}

TEST_CASE("an all-wait negotiation scores zero at the move cap") {
  const auto world = load_map("single_slot");
  marlin::NegotiationConfig cfg;
  cfg.move_cap = 4;
  marlin::ScriptedBackend a0(std::vector<std::string>(
      cfg.move_cap, "TLP: hold position.\nMOVE 0: @WAIT\nMOVE 1: @WAIT\n"));
  marlin::ScriptedBackend a1(std::vector<std::string>(
      cfg.move_cap, "AGREE\nMOVE 0: @WAIT\nMOVE 1: @WAIT\n"));
  marlin::Rng rng(0);
  const auto plan = marlin::make_plan(world, marlin::initial_state(world), a0, a1, cfg, rng);
  CHECK(static_cast<int>(plan.moves.size()) == cfg.move_cap);
  CHECK(plan.performance == 0.0);
}

TEST_CASE("a state already at the goals yields an empty plan without chatter") {
  const auto world = load_map("single_slot");
  marlin::ScriptedBackend a0(std::vector<std::string>{});
  marlin::ScriptedBackend a1(std::vector<std::string>{});
  marlin::JointState state;
  state.positions = world.goals;
  state.step_index = 0;
  marlin::Rng rng(0);
  const auto plan = marlin::make_plan(world, state, a0, a1, marlin::NegotiationConfig{}, rng);
  CHECK(plan.moves.empty());
  CHECK(plan.performance == 1.0);
}

TEST_CASE("planning is deterministic for deterministic backends") {
  const auto world = load_map("two_path");
  std::vector<marlin::TranscriptEntry> t1, t2;
  marlin::Rng rng1(5), rng2(5);
  marlin::OracleBackend a0(world), a1(world), b0(world), b1(world);
  const auto p1 = marlin::make_plan(world, marlin::initial_state(world), a0, a1,
                                    marlin::NegotiationConfig{}, rng1, &t1);
  const auto p2 = marlin::make_plan(world, marlin::initial_state(world), b0, b1,
                                    marlin::NegotiationConfig{}, rng2, &t2);
  CHECK(p1.moves == p2.moves);
  CHECK(p1.performance == p2.performance);
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].content == t2[i].content);
}

TEST_CASE("transcripts survive save/load and replay to the same plan") {
  const auto world = load_map("single_slot");
  marlin::OracleBackend a0(world), a1(world);
  marlin::Rng rng(3);
  std::vector<marlin::TranscriptEntry> transcript;
  const auto plan = marlin::make_plan(world, marlin::initial_state(world), a0, a1,
                                      marlin::NegotiationConfig{}, rng, &transcript);

  std::stringstream file;
  marlin::save_transcript(file, "single_slot#0", transcript);
  const auto loaded = marlin::load_transcript(file);
  REQUIRE(loaded.size() == transcript.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].round == transcript[i].round);
    CHECK(loaded[i].turn == transcript[i].turn);
    CHECK(loaded[i].speaker == transcript[i].speaker);
    CHECK(loaded[i].counted == transcript[i].counted);
    CHECK(loaded[i].content == transcript[i].content);
  }

  const auto scripts = marlin::transcript_scripts(loaded);
  marlin::ScriptedBackend r0(scripts[0]);
  marlin::ScriptedBackend r1(scripts[1]);
  marlin::Rng rng2(3);
  const auto replayed = marlin::make_plan(world, marlin::initial_state(world), r0, r1,
                                          marlin::NegotiationConfig{}, rng2);
  CHECK(replayed.moves == plan.moves);
  CHECK(replayed.performance == plan.performance);
}

TEST_CASE("remote backend speaks the chat-completions protocol") {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string seen_auth;
  std::string seen_body;
  server.Post("/v1/chat/completions",
              [&](const httplib::Request& req, httplib::Response& res) {
                ++hits;
                seen_auth = req.get_header_value("Authorization");
                seen_body = req.body;
                res.set_content(
                    nlohmann::json{
                        {"choices",
                         {{{"message", {{"role", "assistant"},
                                        {"content", "MOVE 0: @WAIT\nMOVE 1: @WAIT\n"}}}}}}}
                        .dump(),
                    "application/json");
              });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  marlin::RemoteBackendConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.api_key = "sekrit";
  cfg.model = "test-model";
  marlin::RemoteBackend backend(cfg);
  const std::string reply = backend.reply({{marlin::ChatRole::System, "sys"},
                                           {marlin::ChatRole::Other, "them"},
                                           {marlin::ChatRole::Self, "me"}});
  CHECK(reply == "MOVE 0: @WAIT\nMOVE 1: @WAIT\n");
  CHECK(hits == 1);
  CHECK(seen_auth == "Bearer sekrit");
  const auto body = nlohmann::json::parse(seen_body);
  CHECK(body["model"] == "test-model");
  REQUIRE(body["messages"].size() == 3);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["role"] == "user");
  CHECK(body["messages"][2]["role"] == "assistant");
  CHECK(body["messages"][1]["content"] == "them");

  server.stop();
  runner.join();
}

TEST_CASE("remote backend retries server errors and fails fast on client errors") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/chat", [&](const httplib::Request&, httplib::Response& res) {
    if (++hits == 1) {
      res.status = 503;
      return;
    }
    res.set_content(
        nlohmann::json{{"choices",
                        {{{"message", {{"role", "assistant"}, {"content", "ok"}}}}}}}
            .dump(),
        "application/json");
  });
  std::atomic<int> teapot_hits{0};
  server.Post("/teapot", [&](const httplib::Request&, httplib::Response& res) {
    ++teapot_hits;
    res.status = 404;
    res.set_content("nope", "text/plain");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  marlin::RemoteBackendConfig cfg;
  cfg.url = base + "/chat";
  marlin::RemoteBackend backend(cfg);
  CHECK(backend.reply({{marlin::ChatRole::System, "s"}}) == "ok");
  CHECK(hits == 2);

  marlin::RemoteBackendConfig bad = cfg;
  bad.url = base + "/teapot";
  marlin::RemoteBackend teapot(bad);
  CHECK_THROWS_AS(teapot.reply({{marlin::ChatRole::System, "s"}}), marlin::BackendError);
  CHECK(teapot_hits == 1);

  marlin::RemoteBackendConfig down = cfg;
  down.url = "http://127.0.0.1:1/nothing";
  down.max_retries = 1;
  marlin::RemoteBackend unreachable(down);
  CHECK_THROWS_AS(unreachable.reply({{marlin::ChatRole::System, "s"}}),
                  marlin::BackendError);

  server.stop();
  runner.join();
}

TEST_CASE("scripted backends raise a backend error when their script runs dry") {
  marlin::ScriptedBackend backend({"only line"});
  CHECK(backend.reply({}) == "only line");
  CHECK_THROWS_AS(backend.reply({}), marlin::BackendError);
}
