#pragma once

// Training objectives: TD regression on the mixed value, the auxiliary TD
// regression on the 2|A|-factor decomposition, and the similarity-diversity
// embedding objective, combined with a trade-off constant lambda.

#include "teamform/nets.hpp"
#include "teamform/replay.hpp"

namespace teamform {

struct LossReport {
  double l_q = 0;
  double l_aux = 0;
  double l_sd = 0;
  double l_td = 0;
  double total = 0;
  double lambda = 0;
};

template <class Real>
struct LossOutput {
  LossReport report;
  Tensor<Real> total_tensor;  // graph root for backward
};

inline double td_target(double reward, bool terminal, double gamma, double next_q_tot) {
  if (gamma < 0 || gamma >= 1) throw std::invalid_argument("td_target: gamma must be in [0,1)");
  return terminal ? reward : reward + gamma * next_q_tot;
}

// Sum over ordered alive pairs i != j of I(i,j) * cosine(e_i, e_j), where I is
// -1 within a team and +1 across teams; pairs involving agents outside every
// team contribute nothing. Fewer than two paired agents gives zero.
template <class Real>
Tensor<Real> sd_loss(const Tensor<Real>& embeddings, const Grouping& grouping,
                     const std::vector<uint8_t>& alive) {
  const int A = embeddings.shape[0];
  if (int(alive.size()) != A)
    throw std::invalid_argument("sd_loss: one alive flag per agent required");
  std::vector<int> team(A, -1);
  int paired = 0;
  for (size_t t = 0; t < grouping.teams.size(); ++t) {
    auto& [l, fs] = grouping.teams[t];
    team[l] = int(t);
    for (int f : fs) team[f] = int(t);
  }
  for (int a = 0; a < A; ++a)
    if (alive[a] && team[a] >= 0) ++paired;
  if (paired < 2) return Tensor<Real>::zeros({1});

  Tensor<Real> indicator = Tensor<Real>::zeros({A, A});
  for (int i = 0; i < A; ++i) {
    if (!alive[i] || team[i] < 0) continue;
    for (int j = 0; j < A; ++j) {
      if (i == j || !alive[j] || team[j] < 0) continue;
      indicator.at(i, j) = team[i] == team[j] ? Real(-1) : Real(1);
    }
  }
  Tensor<Real> unit = normalize_rows(embeddings);
  return sum_all(mul(matmul(unit, transpose(unit)), indicator));
}

template <class Real>
Tensor<Real> sd_loss(const Tensor<Real>& embeddings, const Grouping& grouping) {
  return sd_loss(embeddings, grouping, std::vector<uint8_t>(embeddings.shape[0], 1));
}

namespace detail {

struct LossParts {
  bool q = true;
  bool aux = true;
  bool sd = true;
};

// Chosen-action utilities with dead agents zeroed out.
template <class Real>
Tensor<Real> chosen_utilities(const Tensor<Real>& q, const std::vector<int>& actions,
                              const std::vector<uint8_t>& alive) {
  const int A = q.shape[0];
  Tensor<Real> alive_col = Tensor<Real>::zeros({A, 1});
  for (int a = 0; a < A; ++a) alive_col.at(a, 0) = alive[a] ? Real(1) : Real(0);
  return mul(gather_per_row(q, actions), alive_col);
}

}  // namespace detail

// Shared unroll over a batch of episodes. The online network runs under the
// graph; the target network (greedy-action evaluation for the regression
// target) runs detached, so no gradient can reach the target parameters.
template <class Real>
LossOutput<Real> total_loss(const std::vector<const Episode<Real>*>& batch,
                            const Networks<Real>& online, const Networks<Real>& target,
                            double gamma, double lambda, std::mt19937_64& mask_rng,
                            detail::LossParts parts = {}) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  if (lambda < 0 || lambda > 1)
    throw std::invalid_argument("total_loss: lambda must lie in [0,1]");
  if (gamma < 0 || gamma >= 1)
    throw std::invalid_argument("total_loss: gamma must lie in [0,1)");
  const NetConfig& cfg = online.cfg;

  Tensor<Real> sq_q = Tensor<Real>::zeros({1});
  Tensor<Real> sq_aux = Tensor<Real>::zeros({1});
  Tensor<Real> sd_sum = Tensor<Real>::zeros({1});
  long steps = 0;

  for (const Episode<Real>* ep_ptr : batch) {
    const Episode<Real>& ep = *ep_ptr;
    ep.validate();
    const int n = ep.length();
    const int A = ep.agent_count;

    // Per-step mask draws, fixed up front so every pass sees the same subsets.
    std::vector<MaskSet> masks;
    masks.reserve(n + 1);
    for (int t = 0; t < n; ++t)
      masks.push_back(sample_complementary_masks(ep.obs_masks[t], mask_rng));
    // Trivial all-in split for the final state; only its observability is read.
    MaskSet last;
    last.observability = ep.obs_masks[n];
    last.in_mask = ep.obs_masks[n];
    last.out_mask = BinaryMatrix::zeros(A, ep.obs_masks[n].cols);
    last.in_full = BinaryMatrix::ones(A, ep.obs_masks[n].cols);
    last.out_full = BinaryMatrix::zeros(A, ep.obs_masks[n].cols);
    masks.push_back(std::move(last));

    // Online pass under the graph; greedy actions read off forward values.
    std::vector<UtilityResult<Real>> res(n);
    std::vector<std::vector<int>> greedy(n + 1);
    Tensor<Real> h = Tensor<Real>::zeros({A, cfg.h_dim});
    for (int t = 0; t < n; ++t) {
      auto slots = agent_group_slots(A, ep.groupings[t], ep.leader_slots);
      UtilityFlags flags;
      flags.want_aux = parts.aux;
      res[t] = utility_forward(augment(ep.states[t]), masks[t], h, slots, online.utility,
                               cfg, flags);
      h = res[t].new_hidden;
      greedy[t] = greedy_actions(res[t].q, ep.alive[t]);
    }

    // Detached target pass for the regression targets.
    const bool need_last = !ep.terminated;
    std::vector<double> boot(n, 0.0);  // bootstrap value at state t+1
    {
      NoGradGuard ng;
      if (need_last) {
        auto slots_n = agent_group_slots(A, ep.groupings[n], ep.leader_slots);
        auto on_n = utility_forward(augment(ep.states[n]), masks[n], h, slots_n,
                                    online.utility, cfg, UtilityFlags{});
        greedy[n] = greedy_actions(on_n.q, ep.alive[n]);
      }
      Tensor<Real> h_tg = Tensor<Real>::zeros({A, cfg.h_dim});
      const int last_state = need_last ? n : n - 1;
      for (int s = 0; s <= last_state; ++s) {
        auto slots = agent_group_slots(A, ep.groupings[s], ep.leader_slots);
        auto tg = utility_forward(augment(ep.states[s]), masks[s], h_tg, slots,
                                  target.utility, cfg, UtilityFlags{});
        h_tg = tg.new_hidden;
        if (s == 0) continue;
        auto q_sel = detail::chosen_utilities(tg.q, greedy[s], ep.alive[s]);
        auto theta = hypernet_forward(ep.states[s],
                                      BinaryMatrix::ones(A, ep.states[s].entity_count),
                                      tg.embeddings, ep.groupings[s], ep.alive[s],
                                      target.hyper, cfg);
        boot[s - 1] = double(mix_forward(q_sel, theta).value());
      }
    }

    for (int t = 0; t < n; ++t) {
      const bool terminal = (t == n - 1) && ep.terminated;
      const double y = td_target(ep.rewards[t], terminal, gamma, boot[t]);
      const int E = ep.states[t].entity_count;

      // One hypernetwork cache per step serves all three mask variants.
      auto hcache = hypernet_cache(ep.states[t], res[t].embeddings, ep.groupings[t],
                                   ep.alive[t], online.hyper, cfg);
      if (parts.q) {
        auto q_sel = detail::chosen_utilities(res[t].q, ep.actions[t], ep.alive[t]);
        auto theta = hypernet_apply(hcache, BinaryMatrix::ones(A, E), online.hyper);
        auto diff = affine(reshape(mix_forward(q_sel, theta), {1}), 1.0, -y);
        sq_q = add(sq_q, mul(diff, diff));
      }
      if (parts.aux) {
        auto q_in = detail::chosen_utilities(res[t].q_in, ep.actions[t], ep.alive[t]);
        auto q_out = detail::chosen_utilities(res[t].q_out, ep.actions[t], ep.alive[t]);
        auto theta_in = hypernet_apply(hcache, masks[t].in_full, online.hyper);
        auto theta_out = hypernet_apply(hcache, masks[t].out_full, online.hyper);
        auto q_both = concat_rows(q_in, q_out);
        auto diff = affine(
            reshape(mix_forward(q_both, compose_aux_mix(theta_in, theta_out)), {1}), 1.0, -y);
        sq_aux = add(sq_aux, mul(diff, diff));
      }
      if (parts.sd)
        sd_sum = add(sd_sum, sd_loss(res[t].embeddings_sd, ep.groupings[t], ep.alive[t]));
      ++steps;
    }
  }

  const double inv = 1.0 / double(steps);
  Tensor<Real> l_q = affine(sq_q, inv, 0.0);
  Tensor<Real> l_aux = affine(sq_aux, inv, 0.0);
  Tensor<Real> l_sd = affine(sd_sum, inv, 0.0);
  Tensor<Real> total =
      add(add(affine(l_q, 1.0 - lambda, 0.0), affine(l_aux, lambda, 0.0)), l_sd);

  LossOutput<Real> out;
  out.total_tensor = total;
  // Report values are recomputed in 64-bit so the combination identity holds
  // exactly regardless of the training precision.
  out.report.l_q = double(l_q.value());
  out.report.l_aux = double(l_aux.value());
  out.report.l_sd = double(l_sd.value());
  out.report.lambda = lambda;
  out.report.l_td = (1.0 - lambda) * out.report.l_q + lambda * out.report.l_aux;
  out.report.total = out.report.l_td + out.report.l_sd;
  return out;
}

// TD loss on the mixed value alone.
template <class Real>
LossOutput<Real> q_loss(const std::vector<const Episode<Real>*>& batch,
                        const Networks<Real>& online, const Networks<Real>& target,
                        double gamma, std::mt19937_64& mask_rng) {
  return total_loss(batch, online, target, gamma, 0.0, mask_rng,
                    detail::LossParts{true, false, false});
}

// TD loss on the 2|A|-factor decomposition alone.
template <class Real>
LossOutput<Real> aux_loss(const std::vector<const Episode<Real>*>& batch,
                          const Networks<Real>& online, const Networks<Real>& target,
                          double gamma, std::mt19937_64& mask_rng) {
  auto out = total_loss(batch, online, target, gamma, 1.0, mask_rng,
                        detail::LossParts{false, true, false});
  return out;
}

}  // namespace teamform
