#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "teamform/training.hpp"

using namespace teamform;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using teamform::testing::make_episode;
using teamform::testing::tiny_net_config;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

TrainConfig tiny_train_config(const std::string& out_dir) {
  TrainConfig cfg;
  cfg.world.grid_side = 6;
  cfg.world.agents_min = 3;
  cfg.world.agents_max = 4;
  cfg.world.leader_count = 2;
  cfg.world.target_count = 1;
  cfg.world.hazard_count = 1;
  cfg.world.episode_limit = 15;
  cfg.world.obs_radius = 2;
  cfg.net.h_dim = 16;
  cfg.net.emb_dim = 8;
  cfg.net.mix_hidden = 16;
  cfg.net.heads = 4;
  cfg.total_steps = 400;
  cfg.batch_size = 4;
  cfg.buffer_capacity = 16;
  cfg.eval_interval = 200;
  cfg.eval_episodes = 4;
  cfg.target_sync_interval = 5;
  cfg.seed = 3;
  cfg.out_dir = out_dir;
  return cfg;
}

PreferenceMatrix uniform_prefs(int agents, int leaders) {
  PreferenceMatrix p;
  p.agents = agents;
  p.leaders = leaders;
  p.scores.assign(size_t(agents) * agents, 0.0);
  // Distinct generic scores: agent i ranks j by closeness of index.
  for (int i = 0; i < agents; ++i)
    for (int j = 0; j < agents; ++j)
      if (i != j) p.at(i, j) = 1.0 / (1.0 + std::abs(i - j)) + 0.01 * j;
  return p;
}

}  // namespace

TEST_CASE("replay buffer keeps whole episodes in a ring") {
  NetConfig cfg = tiny_net_config();
  std::mt19937_64 rng(1);
  ReplayBuffer<double> buffer(3);
  for (int e = 0; e < 5; ++e) {
    auto ep = make_episode(3, 1, 4, 2, cfg, rng, false);
    ep.episode_id = e;
    buffer.add(std::move(ep));
  }
  REQUIRE(buffer.size() == 3);
  // Oldest two evicted: remaining ids are 3, 4, 2 in ring order.
  std::set<long long> ids;
  for (size_t i = 0; i < buffer.size(); ++i) ids.insert(buffer.at(i).episode_id);
  REQUIRE(ids == std::set<long long>{2, 3, 4});

  std::mt19937_64 srng(7);
  auto batch = buffer.sample(3, srng);
  std::set<const Episode<double>*> distinct(batch.begin(), batch.end());
  REQUIRE(distinct.size() == 3);
  REQUIRE_THROWS_WITH(buffer.sample(4, srng), ContainsSubstring("cannot sample"));

  // Transitions view exposes the stored step data.
  auto view = transition(buffer.at(0), 1);
  REQUIRE(view.step_index == 1);
  REQUIRE(view.reward == buffer.at(0).rewards[1]);
  REQUIRE(&view.next_state == &buffer.at(0).states[2]);
}

TEST_CASE("epsilon schedule anneals linearly then floors") {
  TrainConfig cfg;
  cfg.total_steps = 50000;
  cfg.epsilon_start = 1.0;
  cfg.epsilon_end = 0.05;
  cfg.epsilon_anneal_frac = 0.2;
  REQUIRE(epsilon_at(cfg, 0) == Approx(1.0));
  REQUIRE(epsilon_at(cfg, 5000) == Approx(0.525));  // halfway through the anneal
  REQUIRE(epsilon_at(cfg, 10000) == Approx(0.05));
  REQUIRE(epsilon_at(cfg, 40000) == Approx(0.05));
}

TEST_CASE("fully exploratory actions are uniform over the action set") {
  WorldConfig wcfg;
  wcfg.hazard_count = 0;
  World<float> world(wcfg);
  NetConfig net;
  ParameterStore<float> store;
  std::mt19937_64 prng(5);
  auto nets = init_networks(store, net, prng);

  std::mt19937_64 rng(11);
  std::vector<long> counts(WorldConfig::action_count, 0);
  long draws = 0;
  while (draws < 10000) {
    auto ep = collect_episode(world, nets, 1.0, "oom", rng);
    for (int t = 0; t < ep.length() && draws < 10000; ++t)
      for (int a = 0; a < ep.agent_count && draws < 10000; ++a)
        if (ep.alive[t][a]) {
          counts[ep.actions[t][a]] += 1;
          ++draws;
        }
  }
  const double expected = double(draws) / WorldConfig::action_count;
  double chi2 = 0;
  for (long c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // Chi-square with 5 degrees of freedom, alpha = 0.01 -> 15.086.
  INFO("chi2 " << chi2);
  REQUIRE(chi2 < 15.086);
}

TEST_CASE("greedy collection is deterministic for fixed seeds") {
  WorldConfig wcfg;
  wcfg.agents_min = 3;
  wcfg.agents_max = 4;
  NetConfig net;
  auto run = [&] {
    ParameterStore<float> store;
    std::mt19937_64 prng(9);
    auto nets = init_networks(store, net, prng);
    World<float> world(wcfg);
    std::mt19937_64 rng(21);
    std::vector<Episode<float>> eps;
    for (int e = 0; e < 3; ++e) eps.push_back(collect_episode(world, nets, 0.0, "oom", rng));
    return eps;
  };
  auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (size_t e = 0; e < a.size(); ++e) {
    REQUIRE(a[e].actions == b[e].actions);
    REQUIRE(a[e].rewards == b[e].rewards);
    REQUIRE(a[e].terminated == b[e].terminated);
    for (size_t s = 0; s < a[e].states.size(); ++s) {
      REQUIRE(a[e].states[s].features.vals() == b[e].states[s].features.vals());
      REQUIRE(a[e].groupings[s] == b[e].groupings[s]);
    }
  }
}

TEST_CASE("match_over_alive handles deaths") {
  auto prefs = uniform_prefs(5, 2);

  SECTION("all followers dead leaves every leader with an empty team") {
    Grouping g = match_over_alive(prefs, 2, {1, 1, 0, 0, 0}, "oom");
    REQUIRE(g.teams.size() == 2);
    for (auto& [l, fs] : g.teams) REQUIRE(fs.empty());
  }
  SECTION("a dead leader's followers are reassigned to survivors") {
    Grouping g = match_over_alive(prefs, 2, {1, 0, 1, 1, 1}, "oom");
    REQUIRE(g.teams.size() == 1);
    REQUIRE(g.teams[0].first == 0);
    REQUIRE(g.teams[0].second == std::vector<int>{2, 3, 4});
  }
  SECTION("no alive leaders gives an empty grouping") {
    Grouping g = match_over_alive(prefs, 2, {0, 0, 1, 1, 1}, "som");
    REQUIRE(g.teams.empty());
  }
  SECTION("dead follower is excluded") {
    Grouping g = match_over_alive(prefs, 2, {1, 1, 1, 0, 1}, "som");
    int placed = 0;
    for (auto& [l, fs] : g.teams) {
      for (int f : fs) {
        REQUIRE(f != 3);
        ++placed;
      }
    }
    REQUIRE(placed == 2);
  }
}

TEST_CASE("an agent death triggers a re-match over survivors at the next boundary") {
  WorldConfig wcfg;
  wcfg.grid_side = 5;
  wcfg.agents_min = 4;
  wcfg.agents_max = 4;
  wcfg.leader_count = 2;
  wcfg.hazard_count = 3;
  wcfg.target_count = 1;
  wcfg.episode_limit = 30;
  NetConfig net;
  ParameterStore<float> store;
  std::mt19937_64 prng(2);
  auto nets = init_networks(store, net, prng);
  World<float> world(wcfg);

  bool death_found = false;
  for (uint64_t seed = 0; seed < 40 && !death_found; ++seed) {
    std::mt19937_64 rng(seed);
    auto ep = collect_episode(world, nets, 1.0, "oom", rng);
    for (int s = 1; s < int(ep.alive.size()); ++s) {
      int alive_now = 0, alive_before = 0;
      for (int a = 0; a < ep.agent_count; ++a) {
        alive_now += ep.alive[s][a];
        alive_before += ep.alive[s - 1][a];
      }
      if (alive_now < alive_before) {
        death_found = true;
        // Grouping at the post-death state covers exactly the alive agents,
        // except that with no alive leader left the grouping is empty.
        bool leader_alive = false;
        for (int l = 0; l < ep.leader_count; ++l) leader_alive |= ep.alive[s][l] == 1;
        std::set<int> members;
        for (auto& [l, fs] : ep.groupings[s].teams) {
          REQUIRE(ep.alive[s][l] == 1);
          members.insert(l);
          for (int f : fs) {
            REQUIRE(ep.alive[s][f] == 1);
            members.insert(f);
          }
        }
        if (!leader_alive) {
          REQUIRE(ep.groupings[s].teams.empty());
        } else {
          for (int a = 0; a < ep.agent_count; ++a)
            if (ep.alive[s][a]) REQUIRE(members.count(a) == 1);
        }
      }
    }
  }
  REQUIRE(death_found);
}

TEST_CASE("training runs, writes artifacts, and is bit-reproducible") {
  namespace fs = std::filesystem;
  auto dir1 = (fs::temp_directory_path() / "teamform_train_a").string();
  auto dir2 = (fs::temp_directory_path() / "teamform_train_b").string();
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  auto r1 = train<float>(tiny_train_config(dir1));
  auto r2 = train<float>(tiny_train_config(dir2));

  REQUIRE(!r1.metrics.empty());
  for (auto& row : r1.metrics) {
    REQUIRE(std::isfinite(row.total_loss));
    REQUIRE(std::isfinite(row.mean_return));
  }
  auto m1 = slurp(r1.metrics_path);
  REQUIRE(m1.substr(0, std::string(kMetricsHeader).size()) == kMetricsHeader);
  REQUIRE(m1 == slurp(r2.metrics_path));
  REQUIRE(slurp(r1.final_checkpoint) == slurp(r2.final_checkpoint));

  // Target sync leaves the step counter advanced and parameters usable.
  REQUIRE(r1.store.step_count() > 0);
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("oom and som runs diverge only after the first differing grouping") {
  WorldConfig wcfg;
  wcfg.agents_min = 4;
  wcfg.agents_max = 5;
  wcfg.leader_count = 2;
  NetConfig net;

  auto collect_run = [&](const std::string& algo) {
    ParameterStore<float> store;
    std::mt19937_64 prng(31);
    auto nets = init_networks(store, net, prng);
    World<float> world(wcfg);
    std::mt19937_64 rng(17);
    std::vector<Episode<float>> eps;
    for (int e = 0; e < 12; ++e) eps.push_back(collect_episode(world, nets, 0.2, algo, rng));
    return eps;
  };
  auto oom_eps = collect_run("oom");
  auto som_eps = collect_run("som");

  bool diverged = false;
  for (size_t e = 0; e < oom_eps.size() && !diverged; ++e) {
    auto& a = oom_eps[e];
    auto& b = som_eps[e];
    int n = std::min(a.length(), b.length());
    for (int s = 0; s <= n && !diverged; ++s) {
      REQUIRE(a.states[s].features.vals() == b.states[s].features.vals());
      REQUIRE(a.alive[s] == b.alive[s]);
      if (!(a.groupings[s] == b.groupings[s])) {
        diverged = true;  // everything before this point was identical
        break;
      }
      if (s < n) {
        REQUIRE(a.actions[s] == b.actions[s]);
        REQUIRE(a.rewards[s] == b.rewards[s]);
      }
    }
  }
  REQUIRE(diverged);
}

TEST_CASE("train config loads from file with overridable keys") {
  namespace fs = std::filesystem;
  auto path = (fs::temp_directory_path() / "teamform_train_cfg_test.cfg").string();
  {
    std::ofstream os(path);
    os << "algo = som\nseed = 7\ntotal_steps = 1234\nlambda = 0.25\n"
       << "grid_side = 7\nleaders = 2\nbatch_size = 8\nbuffer_capacity = 32\n";
  }
  auto cfg = load_train_config(path);
  REQUIRE(cfg.algo == "som");
  REQUIRE(cfg.seed == 7);
  REQUIRE(cfg.total_steps == 1234);
  REQUIRE(cfg.lambda == Approx(0.25));
  REQUIRE(cfg.world.grid_side == 7);
  REQUIRE_NOTHROW(cfg.validate());
  {
    std::ofstream os(path);
    os << "algo = oom\nnot_a_key = 3\n";
  }
  REQUIRE_THROWS_WITH(load_train_config(path), ContainsSubstring("not_a_key"));
  fs::remove(path);

  TrainConfig bad;
  bad.algo = "alphabetical";
  REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("algo"));
}
