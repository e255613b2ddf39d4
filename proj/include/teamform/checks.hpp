#pragma once

// Self-check suites behind the `check` subcommand: property sweeps over the
// matching algorithms, the mixing monotonicity and greedy-consistency
// guarantees, mask contracts, and finite-difference verification of every
// loss term. The acceptance harness reuses these directly.

#include "teamform/eval.hpp"
#include "teamform/grad_check.hpp"

namespace teamform {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace checks {

inline PreferenceMatrix random_preferences(int leaders, int followers, std::mt19937_64& rng) {
  PreferenceMatrix p;
  p.leaders = leaders;
  p.agents = leaders + followers;
  p.scores.resize(size_t(p.agents) * p.agents);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& s : p.scores) s = u(rng);
  return p;
}

// The committed instability witness: the greedy mutual-score assignment
// leaves leader 0 and follower 3 preferring each other over their matches.
inline PreferenceMatrix instability_fixture() {
  PreferenceMatrix p;
  p.agents = 4;
  p.leaders = 2;
  p.scores = {0.0,   0.0,  0.45, 0.475,  //
              0.0,   0.0,  0.4,  0.05,   //
              0.45,  0.4,  0.0,  0.0,    //
              0.475, 0.05, 0.0,  0.0};
  return p;
}

inline CheckResult stability_sweep(int instances = 1000, uint64_t seed = 2024) {
  std::mt19937_64 rng(seed);
  int enumerated = 0;
  for (int trial = 0; trial < instances; ++trial) {
    int L = 1 + int(rng() % 3), F = 2 + int(rng() % 6);
    auto prefs = random_preferences(L, F, rng);
    auto plan = balance_capacities(L, F);
    MatchStats stats;
    auto g = oom_match(prefs, plan, &stats);
    if (!find_blocking_pairs(g, prefs, plan).empty())
      return {"stability_sweep", false,
              "blocking pair found at instance " + std::to_string(trial)};
    if (stats.proposals > L * F)
      return {"stability_sweep", false, "proposal bound exceeded"};
    auto stable = enumerate_stable_matchings(prefs, plan);
    if (std::find(stable.begin(), stable.end(), g) == stable.end())
      return {"stability_sweep", false,
              "result missing from brute-force stable set at instance " +
                  std::to_string(trial)};
    ++enumerated;
  }
  return {"stability_sweep", true,
          std::to_string(enumerated) + " instances blocking-pair-free and oracle-certified"};
}

inline CheckResult som_instability(int instances = 1000, uint64_t seed = 77) {
  auto fixture = instability_fixture();
  auto plan = balance_capacities(2, 2);
  auto g = som_match(fixture, plan);
  auto blocking = find_blocking_pairs(g, fixture, plan);
  if (blocking.empty())
    return {"som_instability", false, "fixture produced no blocking pair"};

  std::mt19937_64 rng(seed);
  int with_blocking = 0;
  for (int trial = 0; trial < instances; ++trial) {
    int L = 1 + int(rng() % 3), F = 2 + int(rng() % 6);
    auto prefs = random_preferences(L, F, rng);
    auto cap = balance_capacities(L, F);
    if (!find_blocking_pairs(som_match(prefs, cap), prefs, cap).empty()) ++with_blocking;
  }
  if (with_blocking == 0)
    return {"som_instability", false, "aggregate blocking-pair rate is zero"};
  char buf[96];
  std::snprintf(buf, sizeof(buf), "fixture blocked; aggregate rate %.3f",
                double(with_blocking) / instances);
  return {"som_instability", true, buf};
}

inline CheckResult oom_order_invariance(int instances = 500, uint64_t seed = 31) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < instances; ++trial) {
    int L = 1 + int(rng() % 3), F = 2 + int(rng() % 6);
    auto prefs = random_preferences(L, F, rng);
    auto plan = balance_capacities(L, F);
    auto base = oom_match(prefs, plan);
    auto exp_prefs = prefs;
    for (auto& s : exp_prefs.scores) s = std::exp(s);
    auto lin_prefs = prefs;
    for (auto& s : lin_prefs.scores) s = 2.0 * s + 7.0;
    if (!(oom_match(exp_prefs, plan) == base) || !(oom_match(lin_prefs, plan) == base))
      return {"oom_order_invariance", false, "transform changed the grouping"};
  }
  return {"oom_order_invariance", true,
          std::to_string(instances) + " instances invariant under exp and 2x+7"};
}

inline CheckResult som_affine_invariance(int instances = 500, uint64_t seed = 32) {
  std::mt19937_64 rng(seed);
  for (int trial = 0; trial < instances; ++trial) {
    int L = 1 + int(rng() % 3), F = 2 + int(rng() % 6);
    auto prefs = random_preferences(L, F, rng);
    auto plan = balance_capacities(L, F);
    auto base = som_match(prefs, plan);
    auto shifted = prefs;
    for (auto& s : shifted.scores) s = 0.7 * s + 5.5;
    auto scaled = prefs;
    for (auto& s : scaled.scores) s = 3.0 * s - 11.0;
    if (!(som_match(shifted, plan) == base) || !(som_match(scaled, plan) == base))
      return {"som_affine_invariance", false, "affine transform changed the grouping"};
  }
  return {"som_affine_invariance", true,
          std::to_string(instances) + " instances invariant under positive affine maps"};
}

inline CheckResult mix_monotonicity(int instances = 1000, uint64_t seed = 23) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> bump(0.01, 2.0);
  for (int trial = 0; trial < instances; ++trial) {
    int A = 1 + int(rng() % 5), H = 1 + int(rng() % 6);
    MixWeights<double> w;
    w.w1 = Tensor<double>::randu({H, A}, rng, -1, 1);
    w.b1 = Tensor<double>::randu({H, 1}, rng, -1, 1);
    w.w2 = Tensor<double>::randu({H, 1}, rng, -1, 1);
    w.b2 = Tensor<double>::randu({1, 1}, rng, -1, 1);
    auto q = Tensor<double>::randu({A, 1}, rng, -2, 2, true);
    auto out = mix_forward(q, w);
    backward(out);
    for (int a = 0; a < A; ++a)
      if ((*q.grad)[a] < -1e-12)
        return {"mix_monotonicity", false, "negative partial derivative"};
    int a = int(rng() % A);
    auto bumped = q.detached();
    bumped.at(a, 0) += bump(rng);
    if (mix_forward(bumped, w).value() < out.value() - 1e-12)
      return {"mix_monotonicity", false, "raising a utility lowered the mix"};
  }
  return {"mix_monotonicity", true,
          std::to_string(instances) + " random (weights, inputs) monotone"};
}

inline CheckResult greedy_consistency(uint64_t seed = 29) {
  std::mt19937_64 rng(seed);
  int cases = 0;
  for (int A = 1; A <= 3; ++A)
    for (int U = 2; U <= 4; ++U)
      for (int trial = 0; trial < 25; ++trial) {
        auto table = Tensor<double>::randu({A, U}, rng, -1, 1);
        MixWeights<double> w;
        w.w1 = Tensor<double>::randu({5, A}, rng, -1, 1);
        w.b1 = Tensor<double>::randu({5, 1}, rng, -1, 1);
        w.w2 = Tensor<double>::randu({5, 1}, rng, -1, 1);
        w.b2 = Tensor<double>::randu({1, 1}, rng, -1, 1);
        auto value_of = [&](const std::vector<int>& joint) {
          auto q = Tensor<double>::zeros({A, 1});
          for (int a = 0; a < A; ++a) q.at(a, 0) = table.at(a, joint[a]);
          return mix_forward(q, w).value();
        };
        double best = -1e100;
        std::vector<int> joint(A, 0);
        while (true) {
          best = std::max(best, value_of(joint));
          int carry = 0;
          while (carry < A && ++joint[carry] == U) joint[carry++] = 0;
          if (carry == A) break;
        }
        auto greedy = greedy_actions(table, std::vector<uint8_t>(A, 1));
        if (std::abs(value_of(greedy) - best) > 1e-9)
          return {"greedy_consistency", false,
                  "per-agent greedy missed the joint optimum"};
        ++cases;
      }
  return {"greedy_consistency", true,
          std::to_string(cases) + " enumerable instances, greedy equals joint argmax"};
}

inline CheckResult mask_contracts(int draws = 1000) {
  for (uint64_t seed = 0; seed < uint64_t(draws); ++seed) {
    std::mt19937_64 rng(seed);
    int A = 2 + int(rng() % 4), E = A + int(rng() % 5);
    BinaryMatrix obs(A, E);
    for (int a = 0; a < A; ++a) {
      for (int e = 0; e < E; ++e) obs(a, e) = uint8_t(rng() & 1);
      obs(a, a) = 1;
    }
    auto m = sample_complementary_masks(obs, rng);
    try {
      validate_mask_set(m);
    } catch (const std::exception& ex) {
      return {"mask_contracts", false, ex.what()};
    }
    for (int a = 0; a < A; ++a)
      for (int e = 0; e < E; ++e)
        if ((m.in_full(a, e) ^ m.out_full(a, e)) != 1)
          return {"mask_contracts", false, "full masks fail to partition"};
  }
  return {"mask_contracts", true, std::to_string(draws) + " seeded draws satisfy invariants"};
}

// Finite-difference verification of every loss term on randomized small
// instances (64-bit, small network dims).
inline CheckResult loss_gradients(int instances = 20, double tolerance = 1e-4) {
  NetConfig cfg;
  cfg.feature_dim = 5;
  cfg.action_count = 3;
  cfg.h_dim = 8;
  cfg.heads = 2;
  cfg.emb_dim = 4;
  cfg.group_slots = 4;
  cfg.mix_hidden = 6;

  double worst_seen = 0;
  for (int inst = 0; inst < instances; ++inst) {
    std::mt19937_64 rng(1000 + 17 * uint64_t(inst));
    ParameterStore<double> store;
    auto nets = init_networks(store, cfg, rng);
    auto target_store = store.clone_detached();
    auto target = bind_networks(target_store, cfg);
    for (auto& [name, slot] : target_store.slots())
      for (auto& v : *slot.tensor.data) v += 1e-3 * double(int(rng() % 7) - 3);

    const int agents = 2 + inst % 3;              // 2..4 agents
    const int entities = agents + 1 + inst % 3;   // up to 6 entities
    const int leaders = 1 + (agents > 2 ? inst % 2 : 0);
    const int steps = 1 + inst % 2;
    Episode<double> ep;
    ep.agent_count = agents;
    ep.leader_count = leaders;
    ep.terminated = inst % 3 == 0;
    for (int l = 0; l < leaders; ++l) ep.leader_slots.push_back(l);
    Grouping g;
    for (int l = 0; l < leaders; ++l) g.teams.emplace_back(l, std::vector<int>{});
    for (int f = leaders; f < agents; ++f)
      g.teams[(f - leaders) % leaders].second.push_back(f);
    for (auto& [l, fs] : g.teams) std::sort(fs.begin(), fs.end());
    std::uniform_real_distribution<double> rew(-1, 1);
    for (int s = 0; s <= steps; ++s) {
      EntityMatrix<double> x;
      x.features = Tensor<double>::randu({entities, cfg.feature_dim}, rng, -1, 1);
      x.agent_count = agents;
      x.entity_count = entities;
      x.roles.resize(entities, Role::non_agent);
      for (int a = 0; a < agents; ++a)
        x.roles[a] = a < leaders ? Role::leader : Role::follower;
      ep.states.push_back(std::move(x));
      ep.obs_masks.push_back(BinaryMatrix::ones(agents, entities));
      ep.groupings.push_back(g);
      ep.alive.push_back(std::vector<uint8_t>(agents, 1));
    }
    for (int t = 0; t < steps; ++t) {
      std::vector<int> a(agents);
      for (auto& v : a) v = int(rng() % cfg.action_count);
      ep.actions.push_back(a);
      ep.rewards.push_back(rew(rng));
    }
    std::vector<const Episode<double>*> batch{&ep};
    std::vector<Tensor<double>> inputs;
    for (auto& [name, slot] : store.slots()) inputs.push_back(slot.tensor);

    const uint64_t mask_seed = 7 * uint64_t(inst) + 3;
    struct Term {
      const char* name;
      detail::LossParts parts;
      double lambda;
    };
    for (const Term& term : {Term{"q", {true, false, false}, 0.0},
                             Term{"aux", {false, true, false}, 1.0},
                             Term{"sd", {false, false, true}, 0.5},
                             Term{"total", {true, true, true}, 0.5}}) {
      auto report = grad_check_robust(
          [&](std::vector<Tensor<double>>&) {
            std::mt19937_64 mask_rng(mask_seed);
            return total_loss(batch, nets, target, 0.95, term.lambda, mask_rng, term.parts)
                .total_tensor;
          },
          inputs, 1e-5, tolerance);
      worst_seen = std::max(worst_seen, report.worst);
      if (!report.pass)
        return {"loss_gradients", false,
                std::string(term.name) + " term exceeded tolerance at instance " +
                    std::to_string(inst) + " (worst " + std::to_string(report.worst) + ")"};
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%d instances x 4 terms, worst rel err %.2e", instances,
                worst_seen);
  return {"loss_gradients", true, buf};
}

}  // namespace checks

inline std::vector<CheckResult> run_all_checks(bool quick = false) {
  const int big = quick ? 100 : 1000;
  const int mid = quick ? 50 : 500;
  const int grads = quick ? 4 : 20;
  return {
      checks::stability_sweep(big),      checks::som_instability(big),
      checks::oom_order_invariance(mid), checks::som_affine_invariance(mid),
      checks::mix_monotonicity(big),     checks::greedy_consistency(),
      checks::mask_contracts(big),       checks::loss_gradients(grads),
  };
}

}  // namespace teamform
