#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "teamform/env.hpp"
#include "teamform/nets.hpp"

using namespace teamform;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

WorldConfig quiet_config() {
  WorldConfig cfg;
  cfg.hazard_count = 0;
  return cfg;
}

// Positions an entity directly; tests craft exact scenarios this way.
void place(WorldState& s, int idx, int x, int y) {
  s.entities[idx].x = x;
  s.entities[idx].y = y;
}

}  // namespace

TEST_CASE("reset is deterministic for a fixed seed") {
  WorldConfig cfg;
  World<double> w1(cfg), w2(cfg);
  std::mt19937_64 r1(42), r2(42);
  auto o1 = w1.reset(r1), o2 = w2.reset(r2);
  REQUIRE(w1.state().agent_count == w2.state().agent_count);
  for (int e = 0; e < w1.state().entity_count(); ++e) {
    REQUIRE(w1.state().entities[e].x == w2.state().entities[e].x);
    REQUIRE(w1.state().entities[e].y == w2.state().entities[e].y);
    REQUIRE(w1.state().entities[e].kind == w2.state().entities[e].kind);
  }
  REQUIRE(o1.entities.features.vals() == o2.entities.features.vals());
  REQUIRE(o1.mask == o2.mask);
}

TEST_CASE("reset places leaders first and respects the drawn population") {
  WorldConfig cfg;
  World<double> w(cfg);
  std::mt19937_64 rng(7);
  auto obs = w.reset(rng, 5);
  REQUIRE(w.state().agent_count == 5);
  std::vector<Role> expect{Role::leader, Role::leader, Role::follower, Role::follower,
                           Role::follower};
  for (int a = 0; a < 5; ++a) REQUIRE(obs.entities.roles[a] == expect[a]);
  // All entities on distinct cells.
  std::set<std::pair<int, int>> cells;
  for (auto& e : w.state().entities) cells.insert({e.x, e.y});
  REQUIRE(int(cells.size()) == w.state().entity_count());
  // Self-observability along the diagonal.
  for (int a = 0; a < 5; ++a) REQUIRE(obs.mask(a, a) == 1);
  REQUIRE_NOTHROW(obs.entities.validate());
}

TEST_CASE("all-stay step only pays the step penalty") {
  auto cfg = quiet_config();
  World<double> w(cfg);
  std::mt19937_64 rng(3);
  w.reset(rng, 4);
  auto before = w.state().entities;
  auto res = w.step(std::vector<int>(4, int(Action::stay)));
  REQUIRE(res.reward == Approx(-0.01));
  REQUIRE(!res.terminal);
  for (int e = 0; e < w.state().entity_count(); ++e) {
    REQUIRE(w.state().entities[e].x == before[e].x);
    REQUIRE(w.state().entities[e].y == before[e].y);
  }
}

TEST_CASE("capturing the last target pays capture plus completion and terminates") {
  WorldConfig cfg = quiet_config();
  cfg.target_count = 1;
  cfg.agents_min = 3;
  cfg.agents_max = 3;
  cfg.leader_count = 1;
  World<double> w(cfg);
  std::mt19937_64 rng(5);
  w.reset(rng, 3);
  // Leader 0 and follower 1 flank the target; follower 2 is far away.
  place(w.state(), 0, 2, 2);
  place(w.state(), 1, 3, 3);
  place(w.state(), 3, 3, 2);  // the target
  place(w.state(), 2, 7, 7);
  Grouping g;
  g.teams = {{0, {1}}};
  w.set_grouping(g);

  auto res = w.step({int(Action::interact), int(Action::interact), int(Action::stay)});
  REQUIRE(res.terminal);
  REQUIRE(res.reward == Approx(1.0 + 5.0 - 0.01));
  REQUIRE(!w.state().entities[3].alive);
  REQUIRE(w.state().targets_remaining == 0);
}

TEST_CASE("capture requires a same-team follower") {
  WorldConfig cfg = quiet_config();
  cfg.target_count = 1;
  cfg.agents_min = 4;
  cfg.agents_max = 4;
  cfg.leader_count = 2;
  World<double> w(cfg);
  std::mt19937_64 rng(5);
  w.reset(rng, 4);
  place(w.state(), 0, 2, 2);  // leader 0
  place(w.state(), 1, 7, 7);  // leader 1
  place(w.state(), 2, 3, 3);  // follower on leader 1's team
  place(w.state(), 3, 6, 6);
  place(w.state(), 4, 3, 2);  // target
  Grouping g;
  g.teams = {{0, {3}}, {1, {2}}};
  w.set_grouping(g);

  // Leader 0 and follower 2 are both adjacent and interacting, but follower 2
  // belongs to leader 1's team: no capture.
  auto res = w.step({int(Action::interact), int(Action::stay), int(Action::interact),
                     int(Action::stay)});
  REQUIRE(!res.terminal);
  REQUIRE(res.reward == Approx(-0.01));
  REQUIRE(w.state().entities[4].alive);
}

TEST_CASE("contested cell goes to the lower-index agent") {
  WorldConfig cfg = quiet_config();
  cfg.agents_min = 3;
  cfg.agents_max = 3;
  cfg.leader_count = 1;
  World<double> w(cfg);
  std::mt19937_64 rng(9);
  w.reset(rng, 3);
  place(w.state(), 0, 0, 0);
  place(w.state(), 1, 2, 0);
  place(w.state(), 2, 5, 5);
  // Keep non-agents clear of the contested lane.
  for (int e = 3; e < w.state().entity_count(); ++e) place(w.state(), e, 7, 6 - (e - 3));

  w.step({int(Action::right), int(Action::left), int(Action::stay)});
  REQUIRE(w.state().entities[0].x == 1);
  REQUIRE(w.state().entities[0].y == 0);
  REQUIRE(w.state().entities[1].x == 2);  // blocked, stays put
  REQUIRE(w.state().entities[1].y == 0);
}

TEST_CASE("hazards patrol deterministically and eliminate co-located agents") {
  WorldConfig cfg;
  cfg.agents_min = 3;
  cfg.agents_max = 3;
  cfg.leader_count = 1;
  cfg.hazard_count = 1;
  World<double> w(cfg);
  std::mt19937_64 rng(11);
  w.reset(rng, 3);
  int hz = w.state().entity_count() - 1;
  REQUIRE(w.state().entities[hz].kind == EntityKind::hazard);
  // Park follower 1 exactly where the hazard will move next.
  auto& hazard = w.state().entities[hz];
  int next_x = hazard.x + hazard.patrol_dir;
  if (next_x > hazard.patrol_hi || next_x < hazard.patrol_lo)
    next_x = hazard.x - hazard.patrol_dir;
  place(w.state(), 0, 0, (hazard.y + 4) % cfg.grid_side);
  place(w.state(), 2, 1, (hazard.y + 4) % cfg.grid_side);
  place(w.state(), 1, next_x, hazard.y);

  auto res = w.step(std::vector<int>(3, int(Action::stay)));
  REQUIRE(res.alive == std::vector<uint8_t>{1, 0, 1});
  REQUIRE(!w.state().entities[1].alive);
  // Dead agents are invisible to others but keep their own diagonal.
  auto mask = w.current_mask();
  REQUIRE(mask(0, 1) == 0);
  REQUIRE(mask(1, 1) == 1);
  // Dead entity features are zeroed.
  auto em = w.entity_matrix();
  for (int j = 0; j < WorldConfig::feature_dim; ++j) REQUIRE(em.features.at(1, j) == 0.0);
}

TEST_CASE("observation mask follows the Chebyshev radius rule") {
  WorldState s;
  s.agent_count = 1;
  s.leader_count = 1;
  s.entities.resize(2);
  s.entities[0] = {EntityKind::leader, 0, 0, true};
  s.entities[1] = {EntityKind::target, 2, 1, true};

  REQUIRE(observation_mask(s, 2)(0, 1) == 1);  // distance max(2,1) = 2
  REQUIRE(observation_mask(s, 1)(0, 1) == 0);
  REQUIRE(observation_mask(s, 0)(0, 0) == 1);  // self only
  REQUIRE(observation_mask(s, 0)(0, 1) == 0);

  WorldConfig cfg;
  World<double> w(cfg);
  std::mt19937_64 rng(13);
  w.reset(rng, 4);
  auto full = observation_mask(w.state(), cfg.grid_side);  // radius >= grid: all alive visible
  for (int a = 0; a < 4; ++a)
    for (int e = 0; e < w.state().entity_count(); ++e) REQUIRE(full(a, e) == 1);
}

TEST_CASE("feature width is invariant across population sizes") {
  WorldConfig cfg;
  cfg.agents_min = 3;
  cfg.agents_max = 8;
  cfg.leader_count = 2;
  World<double> w(cfg);
  std::mt19937_64 rng(17);

  NetConfig net;
  ParameterStore<double> store;
  std::mt19937_64 prng(1);
  auto nets = init_networks(store, net, prng);

  for (int count = 3; count <= 8; ++count) {
    auto obs = w.reset(rng, count);
    REQUIRE(obs.entities.features.shape[1] == WorldConfig::feature_dim);
    // Networks accept any population without reshaping.
    auto hidden = Tensor<double>::zeros({count, net.h_dim});
    MaskSet ms;
    ms.observability = obs.mask;
    ms.in_mask = obs.mask;
    ms.out_mask = BinaryMatrix::zeros(obs.mask.rows, obs.mask.cols);
    ms.in_full = BinaryMatrix::ones(obs.mask.rows, obs.mask.cols);
    ms.out_full = BinaryMatrix::zeros(obs.mask.rows, obs.mask.cols);
    std::vector<int> slots(count, 0);
    auto res = utility_forward(augment(obs.entities), ms, hidden, slots, nets.utility, net);
    REQUIRE(res.q.shape == std::vector<int>{count, net.action_count});
  }
}

TEST_CASE("random-policy mean return is reproducible across seeds within two percent") {
  WorldConfig cfg;
  auto run = [&](uint64_t seed) {
    // Inline uniform-random rollouts; grouping irrelevant without captures
    // being scored? No: captures need teams, so use a fixed balanced grouping.
    World<double> w(cfg);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> act(0, WorldConfig::action_count - 1);
    double total = 0;
    const int episodes = 1000;
    for (int e = 0; e < episodes; ++e) {
      w.reset(rng);
      const int A = w.state().agent_count, L = w.state().leader_count;
      Grouping g;
      for (int l = 0; l < L; ++l) g.teams.emplace_back(l, std::vector<int>{});
      for (int f = L; f < A; ++f) g.teams[(f - L) % L].second.push_back(f);
      for (auto& [l, fs] : g.teams) std::sort(fs.begin(), fs.end());
      w.set_grouping(g);
      std::vector<uint8_t> alive(A, 1);
      while (true) {
        std::vector<int> actions(A, 0);
        for (int a = 0; a < A; ++a)
          if (alive[a]) actions[a] = act(rng);
        auto res = w.step(actions);
        total += res.reward;
        alive = res.alive;
        if (res.terminal) break;
      }
    }
    return total / episodes;
  };
  double m1 = run(1001), m2 = run(9090);
  INFO("means " << m1 << " vs " << m2);
  REQUIRE(std::abs(m1 - m2) <= 0.02 * std::max(std::abs(m1), std::abs(m2)));
}

TEST_CASE("configuration validation and key-value files") {
  SECTION("grid too small to place all entities") {
    WorldConfig cfg;
    cfg.grid_side = 3;
    cfg.agents_max = 8;
    REQUIRE_THROWS_WITH(cfg.validate(), ContainsSubstring("grid too small"));
  }
  SECTION("round-trip through a scenario file") {
    namespace fs = std::filesystem;
    auto path = (fs::temp_directory_path() / "teamform_scenario_test.cfg").string();
    std::ofstream os(path);
    os << "# scenario\n"
       << "grid_side = 6\n"
       << "agents_min = 3\n"
       << "agents_max = 4\n"
       << "leaders = 2\n"
       << "targets = 2\n"
       << "hazards = 0\n"
       << "episode_limit = 25\n"
       << "obs_radius = 2\n"
       << "step_penalty = -0.02\n";
    os.close();
    auto kv = parse_key_value_file(path);
    WorldConfig cfg;
    apply_world_config(kv, cfg);
    REQUIRE(kv.empty());
    REQUIRE(cfg.grid_side == 6);
    REQUIRE(cfg.agents_max == 4);
    REQUIRE(cfg.episode_limit == 25);
    REQUIRE(cfg.rewards.step_penalty == Approx(-0.02));
    REQUIRE_NOTHROW(cfg.validate());
    fs::remove(path);
  }
}
