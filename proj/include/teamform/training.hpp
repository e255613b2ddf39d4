#pragma once

// Off-policy training loop: episode collection with epsilon-greedy
// exploration and matching-driven team assignment, episode replay, target
// synchronization, and optimization of the combined loss.

#include <filesystem>

#include "teamform/env.hpp"
#include "teamform/losses.hpp"

namespace teamform {

struct TrainConfig {
  WorldConfig world;
  NetConfig net;
  std::string algo = "oom";  // oom | som
  uint64_t seed = 0;
  long long total_steps = 50000;
  int batch_size = 16;
  double gamma = 0.99;
  double lambda = 0.5;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_anneal_frac = 0.2;  // fraction of total steps for the linear decay
  int target_sync_interval = 200;   // optimizer steps between target copies
  int buffer_capacity = 512;        // episodes
  double learning_rate = 5e-4;
  long long eval_interval = 2500;  // environment steps between metric records
  int eval_episodes = 32;
  std::string out_dir = "runs/default";
  std::string precision = "float32";  // float32 | float64

  void validate() const {
    world.validate();
    if (algo != "oom" && algo != "som")
      throw std::invalid_argument("TrainConfig: algo must be oom or som");
    if (lambda < 0 || lambda > 1) throw std::invalid_argument("TrainConfig: lambda in [0,1]");
    if (gamma < 0 || gamma >= 1) throw std::invalid_argument("TrainConfig: gamma in [0,1)");
    if (total_steps < 1 || batch_size < 1 || buffer_capacity < batch_size)
      throw std::invalid_argument("TrainConfig: bad replay/batch sizing");
    if (epsilon_anneal_frac <= 0 || epsilon_anneal_frac > 1)
      throw std::invalid_argument("TrainConfig: epsilon_anneal_frac in (0,1]");
    if (precision != "float32" && precision != "float64")
      throw std::invalid_argument("TrainConfig: precision must be float32 or float64");
    if (net.feature_dim != WorldConfig::feature_dim ||
        net.action_count != WorldConfig::action_count)
      throw std::invalid_argument("TrainConfig: network dims must match the environment");
    if (world.leader_count > net.group_slots)
      throw std::invalid_argument("TrainConfig: more leaders than group one-hot slots");
  }
};

inline double epsilon_at(const TrainConfig& cfg, long long env_steps) {
  const double horizon = cfg.epsilon_anneal_frac * double(cfg.total_steps);
  const double frac = std::min(1.0, double(env_steps) / horizon);
  return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start);
}

// Consumes train-level keys from a parsed key-value map.
inline void apply_train_config(std::map<std::string, std::string>& kv, TrainConfig& cfg) {
  apply_world_config(kv, cfg.world);
  detail::take_string(kv, "algo", cfg.algo);
  int seed_i;
  if (detail::take_int(kv, "seed", seed_i)) cfg.seed = uint64_t(seed_i);
  int steps_i;
  if (detail::take_int(kv, "total_steps", steps_i)) cfg.total_steps = steps_i;
  detail::take_int(kv, "batch_size", cfg.batch_size);
  detail::take_double(kv, "gamma", cfg.gamma);
  detail::take_double(kv, "lambda", cfg.lambda);
  detail::take_double(kv, "epsilon_start", cfg.epsilon_start);
  detail::take_double(kv, "epsilon_end", cfg.epsilon_end);
  detail::take_double(kv, "epsilon_anneal_frac", cfg.epsilon_anneal_frac);
  detail::take_int(kv, "target_sync_interval", cfg.target_sync_interval);
  detail::take_int(kv, "buffer_capacity", cfg.buffer_capacity);
  detail::take_double(kv, "learning_rate", cfg.learning_rate);
  int eval_i;
  if (detail::take_int(kv, "eval_interval", eval_i)) cfg.eval_interval = eval_i;
  detail::take_int(kv, "eval_episodes", cfg.eval_episodes);
  detail::take_string(kv, "out_dir", cfg.out_dir);
  detail::take_string(kv, "precision", cfg.precision);
}

inline TrainConfig load_train_config(const std::string& path) {
  auto kv = parse_key_value_file(path);
  TrainConfig cfg;
  apply_train_config(kv, cfg);
  if (!kv.empty())
    throw std::runtime_error("config: unknown key '" + kv.begin()->first + "' in " + path);
  return cfg;
}

// Matching over the currently alive agents: the full score matrix is
// compacted to alive leaders then alive followers, matched with re-balanced
// capacities, and mapped back to global agent indices. No alive leaders
// yields an empty grouping; alive leaders always head (possibly empty) teams.
inline Grouping match_over_alive(const PreferenceMatrix& full, int leader_count,
                                 const std::vector<uint8_t>& alive, const std::string& algo,
                                 int* blocking_pairs = nullptr) {
  std::vector<int> leaders, followers;
  for (int a = 0; a < full.agents; ++a) {
    if (!alive[a]) continue;
    (a < leader_count ? leaders : followers).push_back(a);
  }
  if (blocking_pairs) *blocking_pairs = 0;
  Grouping result;
  if (leaders.empty()) return result;
  for (int l : leaders) result.teams.emplace_back(l, std::vector<int>{});
  if (followers.empty()) return result;

  std::vector<int> order = leaders;
  order.insert(order.end(), followers.begin(), followers.end());
  PreferenceMatrix compact;
  compact.agents = int(order.size());
  compact.leaders = int(leaders.size());
  compact.scores.resize(size_t(compact.agents) * compact.agents);
  for (int i = 0; i < compact.agents; ++i)
    for (int j = 0; j < compact.agents; ++j)
      compact.at(i, j) = full.at(order[i], order[j]);

  auto plan = balance_capacities(compact.leaders, compact.followers());
  Grouping g = algo == "som" ? som_match(compact, plan) : oom_match(compact, plan);
  if (blocking_pairs) *blocking_pairs = int(find_blocking_pairs(g, compact, plan).size());

  for (auto& [l, fs] : g.teams) {
    auto& team = result.teams[l].second;
    for (int f : fs) team.push_back(order[f]);
    std::sort(team.begin(), team.end());
  }
  return result;
}

// MaskSet carrying only observability; the complementary split is trivial.
// Used where the counterfactual branches are not evaluated.
inline MaskSet observability_only(const BinaryMatrix& obs) {
  MaskSet m;
  m.observability = obs;
  m.in_mask = obs;
  m.out_mask = BinaryMatrix::zeros(obs.rows, obs.cols);
  m.in_full = BinaryMatrix::ones(obs.rows, obs.cols);
  m.out_full = BinaryMatrix::zeros(obs.rows, obs.cols);
  return m;
}

struct CollectStats {
  int matchings = 0;
  int matchings_with_blocking = 0;
};

// Rolls one episode: matching at the episode start and after any death,
// epsilon-greedy actions over the utility branch, hidden state threaded
// through the episode, every transition stamped with the active grouping.
template <class Real>
Episode<Real> collect_episode(World<Real>& world, const Networks<Real>& nets, double epsilon,
                              const std::string& algo, std::mt19937_64& rng,
                              CollectStats* stats = nullptr, TraceWriter* trace = nullptr,
                              int forced_agent_count = -1) {
  NoGradGuard ng;
  const NetConfig& cfg = nets.cfg;
  auto obs = forced_agent_count > 0 ? world.reset(rng, forced_agent_count) : world.reset(rng);
  const int A = world.state().agent_count;
  const int L = world.state().leader_count;

  Episode<Real> ep;
  ep.agent_count = A;
  ep.leader_count = L;

  // Episode-fixed random assignment of leaders to group one-hot slots.
  std::vector<int> slots_pool(cfg.group_slots);
  std::iota(slots_pool.begin(), slots_pool.end(), 0);
  std::shuffle(slots_pool.begin(), slots_pool.end(), rng);
  ep.leader_slots.assign(slots_pool.begin(), slots_pool.begin() + L);

  auto rematch = [&](const EntityMatrix<Real>& entities, const std::vector<uint8_t>& alive) {
    auto prefs = extract_preferences(augment(entities), nets.utility.eff, nets.utility.attn, L);
    int blocking = 0;
    Grouping g = match_over_alive(prefs, L, alive, algo, &blocking);
    if (stats) {
      stats->matchings += 1;
      if (blocking > 0) stats->matchings_with_blocking += 1;
    }
    world.set_grouping(g);
    return g;
  };

  std::vector<uint8_t> alive(A, 1);
  Grouping grouping = rematch(obs.entities, alive);

  ep.states.push_back(obs.entities);
  ep.obs_masks.push_back(obs.mask);
  ep.groupings.push_back(grouping);
  ep.alive.push_back(alive);

  Tensor<Real> hidden = Tensor<Real>::zeros({A, cfg.h_dim});
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> random_action(0, WorldConfig::action_count - 1);

  while (true) {
    auto slots = agent_group_slots(A, grouping, ep.leader_slots);
    auto res = utility_forward(augment(ep.states.back()), observability_only(ep.obs_masks.back()),
                               hidden, slots, nets.utility, cfg, UtilityFlags{});
    hidden = res.new_hidden;

    std::vector<int> actions(A, 0);
    for (int a = 0; a < A; ++a) {
      if (!alive[a]) continue;
      if (epsilon > 0 && coin(rng) < epsilon) {
        actions[a] = random_action(rng);
      } else {
        int best = 0;
        for (int u = 1; u < cfg.action_count; ++u)
          if (res.q.at(a, u) > res.q.at(a, best)) best = u;
        actions[a] = best;
      }
    }

    auto step = world.step(actions);
    ep.actions.push_back(actions);
    ep.rewards.push_back(step.reward);
    if (trace) trace->write_step(world.state(), actions, step.reward, step.terminal);

    bool death = false;
    for (int a = 0; a < A; ++a)
      if (alive[a] && !step.alive[a]) death = true;
    alive = step.alive;
    if (death) {
      // Survivors re-match at the next step boundary; dead hidden rows reset.
      grouping = rematch(step.entities, alive);
      Tensor<Real> pruned = hidden.detached();
      for (int a = 0; a < A; ++a)
        if (!alive[a])
          for (int j = 0; j < cfg.h_dim; ++j) pruned.at(a, j) = Real(0);
      hidden = pruned;
    }

    ep.states.push_back(step.entities);
    ep.obs_masks.push_back(step.mask);
    ep.groupings.push_back(grouping);
    ep.alive.push_back(alive);
    if (step.terminal) {
      // True termination caps the TD target; a plain time cap bootstraps.
      ep.terminated = world.state().targets_remaining == 0;
      break;
    }
  }
  return ep;
}

struct EpisodeScore {
  double episode_return = 0;
  bool all_captured = false;
  int matchings = 0;
  int matchings_with_blocking = 0;
};

template <class Real>
EpisodeScore greedy_episode(World<Real>& world, const Networks<Real>& nets,
                            const std::string& algo, std::mt19937_64& rng,
                            int forced_agent_count = -1, TraceWriter* trace = nullptr) {
  CollectStats stats;
  auto ep = collect_episode(world, nets, 0.0, algo, rng, &stats, trace, forced_agent_count);
  EpisodeScore score;
  for (double r : ep.rewards) score.episode_return += r;
  score.all_captured = ep.terminated;
  score.matchings = stats.matchings;
  score.matchings_with_blocking = stats.matchings_with_blocking;
  return score;
}

struct Baseline {
  double mean = 0;
  double std_error = 0;
  int episodes = 0;
};

// Uniform-random policy with a random balanced team assignment; the reference
// point for learning checks.
template <class Real>
Baseline random_policy_baseline(const WorldConfig& world_cfg, int episodes, uint64_t seed) {
  World<Real> world(world_cfg);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> random_action(0, WorldConfig::action_count - 1);
  double sum = 0, sum_sq = 0;
  for (int e = 0; e < episodes; ++e) {
    world.reset(rng);
    const int A = world.state().agent_count, L = world.state().leader_count;
    std::vector<uint8_t> alive(A, 1);
    auto random_grouping = [&]() {
      std::vector<int> followers;
      std::vector<int> leaders;
      for (int a = 0; a < A; ++a)
        if (alive[a]) (a < L ? leaders : followers).push_back(a);
      Grouping g;
      for (int l : leaders) g.teams.emplace_back(l, std::vector<int>{});
      if (!leaders.empty()) {
        std::shuffle(followers.begin(), followers.end(), rng);
        for (size_t i = 0; i < followers.size(); ++i)
          g.teams[i % leaders.size()].second.push_back(followers[i]);
        for (auto& [l, fs] : g.teams) std::sort(fs.begin(), fs.end());
      }
      return g;
    };
    world.set_grouping(random_grouping());
    double ep_return = 0;
    while (true) {
      std::vector<int> actions(A, 0);
      for (int a = 0; a < A; ++a)
        if (alive[a]) actions[a] = random_action(rng);
      auto step = world.step(actions);
      ep_return += step.reward;
      bool death = false;
      for (int a = 0; a < A; ++a)
        if (alive[a] && !step.alive[a]) death = true;
      alive = step.alive;
      if (death) world.set_grouping(random_grouping());
      if (step.terminal) break;
    }
    sum += ep_return;
    sum_sq += ep_return * ep_return;
  }
  Baseline b;
  b.episodes = episodes;
  b.mean = sum / episodes;
  double var = std::max(0.0, sum_sq / episodes - b.mean * b.mean);
  b.std_error = std::sqrt(var / episodes);
  return b;
}

struct MetricsRow {
  long long step = 0;
  long long episodes = 0;
  double epsilon = 0;
  double mean_return = 0;
  double l_q = 0, l_aux = 0, l_sd = 0, total_loss = 0;
  std::string match_algo;
  uint64_t seed = 0;
};

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[320];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%llu",
                r.step, r.episodes, r.epsilon, r.mean_return, r.l_q, r.l_aux, r.l_sd,
                r.total_loss, r.match_algo.c_str(), (unsigned long long)r.seed);
  return buf;
}

constexpr const char* kMetricsHeader =
    "step,episodes,epsilon,mean_return,l_q,l_aux,l_sd,total_loss,match_algo,seed";

template <class Real>
struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::string metrics_path;
  std::string final_checkpoint;
  ParameterStore<Real> store;
  Networks<Real> nets;
};

// Alternates collection and optimization; one optimizer step per collected
// episode once the buffer holds a full batch. Metrics and a checkpoint are
// emitted every eval interval. Non-finite loss aborts with a diagnostic
// checkpoint.
template <class Real>
TrainResult<Real> train(const TrainConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  std::mt19937_64 rng(cfg.seed);
  TrainResult<Real> result;
  result.nets = init_networks(result.store, cfg.net, rng);
  ParameterStore<Real> target_store = result.store.clone_detached();
  Networks<Real> target_nets = bind_networks(target_store, cfg.net);

  World<Real> world(cfg.world);
  World<Real> eval_world(cfg.world);
  ReplayBuffer<Real> buffer(size_t(cfg.buffer_capacity));

  result.metrics_path = cfg.out_dir + "/metrics.csv";
  std::ofstream metrics(result.metrics_path);
  if (!metrics) throw std::runtime_error("train: cannot open " + result.metrics_path);
  metrics << kMetricsHeader << "\n";

  long long env_steps = 0, episodes = 0, opt_steps = 0, next_eval = cfg.eval_interval;
  LossReport last_report;

  auto evaluate = [&](long long at_step) {
    std::mt19937_64 eval_rng(cfg.seed * 0x9e3779b97f4a7c15ull + uint64_t(at_step) + 1);
    double total = 0;
    for (int e = 0; e < cfg.eval_episodes; ++e)
      total += greedy_episode(eval_world, result.nets, cfg.algo, eval_rng).episode_return;
    MetricsRow row;
    row.step = at_step;
    row.episodes = episodes;
    row.epsilon = epsilon_at(cfg, at_step);
    row.mean_return = total / cfg.eval_episodes;
    row.l_q = last_report.l_q;
    row.l_aux = last_report.l_aux;
    row.l_sd = last_report.l_sd;
    row.total_loss = last_report.total;
    row.match_algo = cfg.algo;
    row.seed = cfg.seed;
    metrics << format_metrics_row(row) << "\n";
    metrics.flush();
    result.metrics.push_back(row);
    save_checkpoint(cfg.out_dir + "/checkpoint_" + std::to_string(at_step) + ".tfrm",
                    result.store);
  };

  while (env_steps < cfg.total_steps) {
    double eps = epsilon_at(cfg, env_steps);
    Episode<Real> ep = collect_episode(world, result.nets, eps, cfg.algo, rng);
    ep.episode_id = episodes;
    env_steps += ep.length();
    episodes += 1;
    buffer.add(std::move(ep));

    if (int(buffer.size()) >= cfg.batch_size) {
      auto batch = buffer.sample(cfg.batch_size, rng);
      auto loss = total_loss(batch, result.nets, target_nets, cfg.gamma, cfg.lambda, rng);
      if (!std::isfinite(loss.report.total)) {
        save_checkpoint(cfg.out_dir + "/checkpoint_diagnostic.tfrm", result.store);
        throw std::runtime_error("train: non-finite loss at env step " +
                                 std::to_string(env_steps) +
                                 "; diagnostic checkpoint written");
      }
      backward(loss.total_tensor);
      optimizer_step(result.store, cfg.learning_rate);
      last_report = loss.report;
      opt_steps += 1;
      if (opt_steps % cfg.target_sync_interval == 0)
        target_store.copy_values_from(result.store);
    }

    if (env_steps >= next_eval) {
      evaluate(env_steps);
      while (next_eval <= env_steps) next_eval += cfg.eval_interval;
    }
  }
  if (result.metrics.empty() || result.metrics.back().step != env_steps) evaluate(env_steps);

  result.final_checkpoint = cfg.out_dir + "/checkpoint_final.tfrm";
  save_checkpoint(result.final_checkpoint, result.store);
  return result;
}

}  // namespace teamform
