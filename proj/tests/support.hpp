#pragma once

// Shared helpers for the test suites.

#include <random>

#include "teamform/grad_check.hpp"
#include "teamform/losses.hpp"
#include "teamform/nets.hpp"

namespace teamform::testing {

inline NetConfig tiny_net_config() {
  NetConfig cfg;
  cfg.feature_dim = 5;
  cfg.action_count = 3;
  cfg.h_dim = 8;
  cfg.heads = 2;
  cfg.emb_dim = 4;
  cfg.group_slots = 4;
  cfg.mix_hidden = 6;
  return cfg;
}

inline EntityMatrix<double> random_entity_state(int agents, int leaders, int entities,
                                                const NetConfig& cfg, std::mt19937_64& rng) {
  EntityMatrix<double> x;
  x.features = Tensor<double>::randu({entities, cfg.feature_dim}, rng, -1, 1);
  x.agent_count = agents;
  x.entity_count = entities;
  x.roles.resize(entities, Role::non_agent);
  for (int a = 0; a < agents; ++a) x.roles[a] = a < leaders ? Role::leader : Role::follower;
  return x;
}

// Synthetic episode with full observability and a fixed balanced grouping.
inline Episode<double> make_episode(int agents, int leaders, int entities, int steps,
                                    const NetConfig& cfg, std::mt19937_64& rng,
                                    bool terminated) {
  Episode<double> ep;
  ep.agent_count = agents;
  ep.leader_count = leaders;
  ep.terminated = terminated;
  for (int l = 0; l < leaders; ++l) ep.leader_slots.push_back(l);

  Grouping g;
  for (int l = 0; l < leaders; ++l) g.teams.emplace_back(l, std::vector<int>{});
  for (int f = leaders; f < agents; ++f)
    g.teams[(f - leaders) % leaders].second.push_back(f);
  for (auto& [l, fs] : g.teams) std::sort(fs.begin(), fs.end());

  std::uniform_real_distribution<double> rew(-1, 1);
  std::uniform_int_distribution<int> act(0, cfg.action_count - 1);
  for (int s = 0; s <= steps; ++s) {
    ep.states.push_back(random_entity_state(agents, leaders, entities, cfg, rng));
    ep.obs_masks.push_back(BinaryMatrix::ones(agents, entities));
    ep.groupings.push_back(g);
    ep.alive.push_back(std::vector<uint8_t>(agents, 1));
  }
  for (int t = 0; t < steps; ++t) {
    std::vector<int> a(agents);
    for (auto& v : a) v = act(rng);
    ep.actions.push_back(a);
    ep.rewards.push_back(rew(rng));
  }
  return ep;
}

using teamform::grad_check_robust;

}  // namespace teamform::testing
