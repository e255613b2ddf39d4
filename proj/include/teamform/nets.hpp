#pragma once

// Agent utility network with a group-aware encoder-decoder, plus the
// group-aware hypernetwork that generates the monotonic mixing weights.

#include "teamform/attention.hpp"
#include "teamform/param_store.hpp"

namespace teamform {

struct NetConfig {
  int feature_dim = 10;  // base entity feature width
  int action_count = 6;
  int h_dim = 32;
  int heads = 4;
  int emb_dim = 16;
  int group_slots = 4;  // width of the group one-hot = max supported groups
  int mix_hidden = 32;
};

template <class Real>
struct GruParams {
  Tensor<Real> wz, wr, wh;  // in x h
  Tensor<Real> uz, ur, uh;  // h x h
  Tensor<Real> bz, br, bh;  // h
};

template <class Real>
Tensor<Real> gru_cell(const Tensor<Real>& x, const Tensor<Real>& h,
                      const GruParams<Real>& p) {
  auto z = sigmoid(add_rowwise(add(matmul(x, p.wz), matmul(h, p.uz)), p.bz));
  auto r = sigmoid(add_rowwise(add(matmul(x, p.wr), matmul(h, p.ur)), p.br));
  auto cand = tanh(add_rowwise(add(matmul(x, p.wh), matmul(mul(r, h), p.uh)), p.bh));
  return add(sub(h, mul(z, h)), mul(z, cand));
}

template <class Real>
struct UtilityParams {
  EntityFFParams<Real> eff;     // shared with preference extraction
  AttentionParams<Real> attn;   // shared with preference extraction
  GruParams<Real> gru;
  Tensor<Real> fc1_w, fc1_b;    // action head base
  Tensor<Real> enc_w, enc_b;    // group-aware encoder
  Tensor<Real> dec_w, dec_b;    // embedding -> final-layer weights+bias per agent
};

template <class Real>
struct HyperParams {
  EntityFFParams<Real> eff;
  AttentionParams<Real> attn;
  Tensor<Real> gdec_w, gdec_b;  // group state -> one first-layer column per agent
  Tensor<Real> b1_w, b1_b;      // pooled global embedding -> first-layer bias
  Tensor<Real> w2_w, w2_b;      // pooled global embedding -> second-layer weights
  Tensor<Real> b2a_w, b2a_b;    // two-layer state bias head
  Tensor<Real> b2b_w, b2b_b;
};

template <class Real>
struct Networks {
  UtilityParams<Real> utility;
  HyperParams<Real> hyper;
  NetConfig cfg;
};

namespace detail {

template <class Real, class Rng>
Tensor<Real>& init_param(ParameterStore<Real>& store, const std::string& name,
                         std::vector<int> shape, int fan_in, Rng& rng) {
  double k = 1.0 / std::sqrt(double(std::max(fan_in, 1)));
  return store.add(name, Tensor<Real>::randu(std::move(shape), rng, -k, k));
}

template <class Real>
Tensor<Real>& init_zero(ParameterStore<Real>& store, const std::string& name,
                        std::vector<int> shape) {
  return store.add(name, Tensor<Real>::zeros(std::move(shape)));
}

}  // namespace detail

// Registers every parameter into the store (seeded, deterministic order) and
// returns views bound to the stored buffers.
template <class Real>
Networks<Real> init_networks(ParameterStore<Real>& store, const NetConfig& cfg,
                             std::mt19937_64& rng) {
  using detail::init_param;
  using detail::init_zero;
  const int d_aug = cfg.feature_dim + 3;
  const int h = cfg.h_dim;
  const int gru_in = 2 * h;
  const int enc_in = h + cfg.group_slots;
  const int dec_out = (h + 1) * cfg.action_count;

  Networks<Real> nets;
  nets.cfg = cfg;
  auto& u = nets.utility;
  u.eff.w = init_param(store, "utility.eff.w", {d_aug, h}, d_aug, rng);
  u.eff.b = init_zero(store, "utility.eff.b", {h});
  u.attn.wq = init_param(store, "utility.attn.wq", {h, h}, h, rng);
  u.attn.wk = init_param(store, "utility.attn.wk", {h, h}, h, rng);
  u.attn.wv = init_param(store, "utility.attn.wv", {h, h}, h, rng);
  u.attn.wo = init_param(store, "utility.attn.wo", {h, h}, h, rng);
  u.attn.heads = cfg.heads;
  u.gru.wz = init_param(store, "utility.gru.wz", {gru_in, h}, gru_in, rng);
  u.gru.wr = init_param(store, "utility.gru.wr", {gru_in, h}, gru_in, rng);
  u.gru.wh = init_param(store, "utility.gru.wh", {gru_in, h}, gru_in, rng);
  u.gru.uz = init_param(store, "utility.gru.uz", {h, h}, h, rng);
  u.gru.ur = init_param(store, "utility.gru.ur", {h, h}, h, rng);
  u.gru.uh = init_param(store, "utility.gru.uh", {h, h}, h, rng);
  u.gru.bz = init_zero(store, "utility.gru.bz", {h});
  u.gru.br = init_zero(store, "utility.gru.br", {h});
  u.gru.bh = init_zero(store, "utility.gru.bh", {h});
  u.fc1_w = init_param(store, "utility.fc1.w", {h, h}, h, rng);
  u.fc1_b = init_zero(store, "utility.fc1.b", {h});
  u.enc_w = init_param(store, "utility.enc.w", {enc_in, cfg.emb_dim}, enc_in, rng);
  u.enc_b = init_zero(store, "utility.enc.b", {cfg.emb_dim});
  u.dec_w = init_param(store, "utility.dec.w", {cfg.emb_dim, dec_out}, cfg.emb_dim, rng);
  u.dec_b = init_param(store, "utility.dec.b", {dec_out}, cfg.emb_dim, rng);

  auto& hy = nets.hyper;
  hy.eff.w = init_param(store, "hyper.eff.w", {cfg.feature_dim, h}, cfg.feature_dim, rng);
  hy.eff.b = init_zero(store, "hyper.eff.b", {h});
  hy.attn.wq = init_param(store, "hyper.attn.wq", {h, h}, h, rng);
  hy.attn.wk = init_param(store, "hyper.attn.wk", {h, h}, h, rng);
  hy.attn.wv = init_param(store, "hyper.attn.wv", {h, h}, h, rng);
  hy.attn.wo = init_param(store, "hyper.attn.wo", {h, h}, h, rng);
  hy.attn.heads = cfg.heads;
  hy.gdec_w = init_param(store, "hyper.gdec.w", {cfg.emb_dim, cfg.mix_hidden}, cfg.emb_dim, rng);
  hy.gdec_b = init_param(store, "hyper.gdec.b", {cfg.mix_hidden}, cfg.emb_dim, rng);
  hy.b1_w = init_param(store, "hyper.b1.w", {h, cfg.mix_hidden}, h, rng);
  hy.b1_b = init_zero(store, "hyper.b1.b", {cfg.mix_hidden});
  hy.w2_w = init_param(store, "hyper.w2.w", {h, cfg.mix_hidden}, h, rng);
  hy.w2_b = init_param(store, "hyper.w2.b", {cfg.mix_hidden}, h, rng);
  hy.b2a_w = init_param(store, "hyper.b2a.w", {h, cfg.mix_hidden}, h, rng);
  hy.b2a_b = init_zero(store, "hyper.b2a.b", {cfg.mix_hidden});
  hy.b2b_w = init_param(store, "hyper.b2b.w", {cfg.mix_hidden, 1}, cfg.mix_hidden, rng);
  hy.b2b_b = init_zero(store, "hyper.b2b.b", {1});
  return nets;
}

// Rebinds views onto an existing store (same layout as init_networks), e.g.
// after a checkpoint load or a target-network clone.
template <class Real>
Networks<Real> bind_networks(ParameterStore<Real>& store, const NetConfig& cfg) {
  Networks<Real> nets;
  nets.cfg = cfg;
  auto& u = nets.utility;
  u.eff = {store.get("utility.eff.w"), store.get("utility.eff.b")};
  u.attn = {store.get("utility.attn.wq"), store.get("utility.attn.wk"),
            store.get("utility.attn.wv"), store.get("utility.attn.wo"), cfg.heads};
  u.gru = {store.get("utility.gru.wz"), store.get("utility.gru.wr"),
           store.get("utility.gru.wh"), store.get("utility.gru.uz"),
           store.get("utility.gru.ur"), store.get("utility.gru.uh"),
           store.get("utility.gru.bz"), store.get("utility.gru.br"),
           store.get("utility.gru.bh")};
  u.fc1_w = store.get("utility.fc1.w");
  u.fc1_b = store.get("utility.fc1.b");
  u.enc_w = store.get("utility.enc.w");
  u.enc_b = store.get("utility.enc.b");
  u.dec_w = store.get("utility.dec.w");
  u.dec_b = store.get("utility.dec.b");

  auto& hy = nets.hyper;
  hy.eff = {store.get("hyper.eff.w"), store.get("hyper.eff.b")};
  hy.attn = {store.get("hyper.attn.wq"), store.get("hyper.attn.wk"),
             store.get("hyper.attn.wv"), store.get("hyper.attn.wo"), cfg.heads};
  hy.gdec_w = store.get("hyper.gdec.w");
  hy.gdec_b = store.get("hyper.gdec.b");
  hy.b1_w = store.get("hyper.b1.w");
  hy.b1_b = store.get("hyper.b1.b");
  hy.w2_w = store.get("hyper.w2.w");
  hy.w2_b = store.get("hyper.w2.b");
  hy.b2a_w = store.get("hyper.b2a.w");
  hy.b2a_b = store.get("hyper.b2a.b");
  hy.b2b_w = store.get("hyper.b2b.w");
  hy.b2b_b = store.get("hyper.b2b.b");
  return nets;
}

// Attention masks must keep self-attention alive even when an agent's random
// out-subset is otherwise empty.
inline BinaryMatrix with_self(BinaryMatrix mask) {
  for (int a = 0; a < mask.rows && a < mask.cols; ++a) mask(a, a) = 1;
  return mask;
}

// Group slot per agent derived from a grouping and an episode-fixed
// leader -> slot assignment; -1 for agents outside every team.
inline std::vector<int> agent_group_slots(int agent_count, const Grouping& grouping,
                                          const std::vector<int>& leader_slots) {
  std::vector<int> slots(agent_count, -1);
  for (auto& [l, fs] : grouping.teams) {
    if (l < 0 || l >= int(leader_slots.size()))
      throw std::invalid_argument("agent_group_slots: leader outside slot table");
    slots[l] = leader_slots[l];
    for (int f : fs) slots[f] = leader_slots[l];
  }
  return slots;
}

// Embeds agents' hidden states (augmented with the group one-hot) into
// unit-norm vectors, so cosine similarity downstream is a plain dot product.
template <class Real>
Tensor<Real> encoder_forward(const Tensor<Real>& hidden, const std::vector<int>& group_slot,
                             const Tensor<Real>& enc_w, const Tensor<Real>& enc_b,
                             const NetConfig& cfg) {
  const int A = hidden.shape[0];
  Tensor<Real> onehot = Tensor<Real>::zeros({A, cfg.group_slots});
  for (int a = 0; a < A; ++a) {
    if (group_slot[a] >= cfg.group_slots)
      throw std::invalid_argument("encoder_forward: group slot out of range");
    if (group_slot[a] >= 0) onehot.at(a, group_slot[a]) = Real(1);
  }
  return normalize_rows(tanh(linear(concat_cols(hidden, onehot), enc_w, enc_b)));
}

struct UtilityFlags {
  bool want_aux = false;          // compute the in/out-subset utility branches
  bool want_preferences = false;  // run the all-ones attention pass for matching
};

template <class Real>
struct UtilityResult {
  Tensor<Real> q;         // A x U, observability branch
  Tensor<Real> q_in;      // A x U, in-subset branch (when requested)
  Tensor<Real> q_out;     // A x U, out-subset branch (when requested)
  Tensor<Real> embeddings;  // A x emb_dim, unit rows
  // Same embedding map over detached hidden states: the similarity-diversity
  // objective adjusts the encoder parameters only, never the trunk that
  // produced the hidden states.
  Tensor<Real> embeddings_sd;
  Tensor<Real> new_hidden;  // A x h_dim, from the observability branch
  PreferenceMatrix preferences;  // when requested
};

// Triple-mask utility forward. The observability branch updates the hidden
// state; the encoder consumes the updated hidden state augmented with the
// group one-hot; the decoder turns each embedding into that agent's final
// utility layer, applied to every branch.
template <class Real>
UtilityResult<Real> utility_forward(const AugmentedEntityMatrix<Real>& x,
                                    const MaskSet& masks, const Tensor<Real>& hidden,
                                    const std::vector<int>& group_slot,
                                    const UtilityParams<Real>& p, const NetConfig& cfg,
                                    UtilityFlags flags = {}) {
  const int A = x.agent_count;
  validate_mask_set(masks);
  if (masks.observability.rows != A || masks.observability.cols != x.entity_count)
    throw std::invalid_argument("utility_forward: mask shape mismatch");
  if (hidden.shape != std::vector<int>{A, cfg.h_dim})
    throw std::invalid_argument("utility_forward: hidden state must be |A| x h_dim");
  if (int(group_slot.size()) != A)
    throw std::invalid_argument("utility_forward: one group slot per agent required");

  Tensor<Real> ff = entity_ff(x.features, p.eff);
  Tensor<Real> own = slice_rows(ff, 0, A);
  AttentionCache<Real> cache = attention_cache(ff, A, p.attn);

  auto branch_hidden = [&](const BinaryMatrix& mask) {
    auto att = mha_apply(cache, mask, p.attn);
    return gru_cell(concat_cols(own, att.embeddings), hidden, p.gru);
  };

  UtilityResult<Real> result;
  result.new_hidden = branch_hidden(masks.observability);
  result.embeddings =
      encoder_forward(result.new_hidden, group_slot, p.enc_w, p.enc_b, cfg);
  if (grad_enabled()) {
    Tensor<Real> frozen = result.new_hidden.detached();
    result.embeddings_sd = encoder_forward(frozen, group_slot, p.enc_w, p.enc_b, cfg);
  } else {
    result.embeddings_sd = result.embeddings;
  }
  Tensor<Real> dec = linear(result.embeddings, p.dec_w, p.dec_b);

  auto head = [&](const Tensor<Real>& h_b) {
    auto z = relu(linear(h_b, p.fc1_w, p.fc1_b));
    return rowwise_generated_linear(z, dec, cfg.h_dim, cfg.action_count);
  };

  result.q = head(result.new_hidden);
  if (flags.want_aux) {
    result.q_in = head(branch_hidden(masks.in_mask));
    result.q_out = head(branch_hidden(with_self(masks.out_mask)));
  }
  if (flags.want_preferences) {
    int leaders = 0;
    for (Role r : x.roles)
      if (r == Role::leader) ++leaders;
    result.preferences = extract_preferences(x, p.eff, p.attn, leaders);
  }
  return result;
}

// Two-layer mixing weights produced by the hypernetwork; first-layer width is
// one column per utility factor.
template <class Real>
struct MixWeights {
  Tensor<Real> w1;  // mix_hidden x n, nonnegative
  Tensor<Real> b1;  // mix_hidden x 1
  Tensor<Real> w2;  // mix_hidden x 1, nonnegative
  Tensor<Real> b2;  // 1 x 1
};

// Mask-independent part of the hypernetwork: the entity feedforward and QKV
// projections, plus the first mixing layer decoded from group states (one
// column per agent from its team's pooled encoder embeddings). One cache
// serves every mask variant of the same step.
template <class Real>
struct HyperCache {
  AttentionCache<Real> attn;
  Tensor<Real> w1;  // mix_hidden x A, nonnegative
  std::vector<int> alive_rows;
};

template <class Real>
HyperCache<Real> hypernet_cache(const EntityMatrix<Real>& x, const Tensor<Real>& embeddings,
                                const Grouping& grouping, const std::vector<uint8_t>& alive,
                                const HyperParams<Real>& p, const NetConfig& cfg) {
  const int A = x.agent_count;
  if (embeddings.shape != std::vector<int>{A, cfg.emb_dim})
    throw std::invalid_argument("hypernet_cache: embeddings must be |A| x emb_dim");
  if (int(alive.size()) != A)
    throw std::invalid_argument("hypernet_cache: one alive flag per agent required");

  HyperCache<Real> cache;
  cache.attn = attention_cache(entity_ff(x.features, p.eff), A, p.attn);
  for (int a = 0; a < A; ++a)
    if (alive[a]) cache.alive_rows.push_back(a);
  if (cache.alive_rows.empty()) {
    // Every agent eliminated: pool over all (zero-feature) agent rows so the
    // mixer stays defined for the remaining steps of the episode.
    cache.alive_rows.resize(A);
    std::iota(cache.alive_rows.begin(), cache.alive_rows.end(), 0);
  }

  // Stack per-team group states; a trailing zero row covers teamless agents.
  Tensor<Real> group_states;
  std::vector<int> agent_row(A, int(grouping.teams.size()));
  for (size_t t = 0; t < grouping.teams.size(); ++t) {
    auto& [l, fs] = grouping.teams[t];
    std::vector<int> members{l};
    members.insert(members.end(), fs.begin(), fs.end());
    agent_row[l] = int(t);
    for (int f : fs) agent_row[f] = int(t);
    Tensor<Real> state = rowset_max(embeddings, members);
    group_states = t == 0 ? state : concat_rows(group_states, state);
  }
  Tensor<Real> zero_row = Tensor<Real>::zeros({1, cfg.emb_dim});
  group_states = grouping.teams.empty() ? zero_row : concat_rows(group_states, zero_row);

  Tensor<Real> per_agent_state = gather_rows(group_states, agent_row);  // A x emb
  cache.w1 = abs_val(transpose(linear(per_agent_state, p.gdec_w, p.gdec_b)));
  return cache;
}

// Mask-dependent part: attention under the state-wide mask (observability is
// ignored here; self-attention is forced alive) pooled over alive agents
// generates the first-layer bias, second-layer weights, and state bias.
template <class Real>
MixWeights<Real> hypernet_apply(const HyperCache<Real>& cache, const BinaryMatrix& mask,
                                const HyperParams<Real>& p) {
  auto att = mha_apply(cache.attn, with_self(mask), p.attn);
  Tensor<Real> global = rowset_max(att.embeddings, cache.alive_rows);  // 1 x h

  MixWeights<Real> w;
  w.w1 = cache.w1;
  w.b1 = transpose(linear(global, p.b1_w, p.b1_b));
  w.w2 = abs_val(transpose(linear(global, p.w2_w, p.w2_b)));
  w.b2 = linear(relu(linear(global, p.b2a_w, p.b2a_b)), p.b2b_w, p.b2b_b);
  return w;
}

// Single-mask convenience wrapper (group-aware hypernetwork end to end).
template <class Real>
MixWeights<Real> hypernet_forward(const EntityMatrix<Real>& x, const BinaryMatrix& mask,
                                  const Tensor<Real>& embeddings, const Grouping& grouping,
                                  const std::vector<uint8_t>& alive,
                                  const HyperParams<Real>& p, const NetConfig& cfg) {
  return hypernet_apply(hypernet_cache(x, embeddings, grouping, alive, p, cfg), mask, p);
}

// Block-diagonal composition of two branch weight sets for the 2|A|-factor
// decomposition: factors mix through their own branch block, biases combine.
template <class Real>
MixWeights<Real> compose_aux_mix(const MixWeights<Real>& in_branch,
                                 const MixWeights<Real>& out_branch) {
  const int H = in_branch.w1.shape[0], A = in_branch.w1.shape[1];
  Tensor<Real> zeros = Tensor<Real>::zeros({H, A});
  MixWeights<Real> w;
  w.w1 = concat_rows(concat_cols(in_branch.w1, zeros), concat_cols(zeros, out_branch.w1));
  w.b1 = concat_rows(in_branch.b1, out_branch.b1);
  w.w2 = concat_rows(in_branch.w2, out_branch.w2);
  w.b2 = add(in_branch.b2, out_branch.b2);
  return w;
}

// Monotonic two-layer mixer: nonnegative layer weights (absolute value is
// applied here as well, so arbitrary weight tensors stay monotone) and a
// monotone nonlinearity. Output never decreases when any input utility grows.
template <class Real>
Tensor<Real> mix_forward(const Tensor<Real>& utilities, const MixWeights<Real>& w) {
  if (utilities.rank() != 2 || utilities.shape[1] != 1 ||
      utilities.shape[0] != w.w1.shape[1])
    detail::dim_error("mix_forward", utilities.shape, w.w1.shape);
  auto hidden = elu(add(matmul(abs_val(w.w1), utilities), w.b1));
  return add(matmul(transpose(abs_val(w.w2)), hidden), w.b2);
}

// Per-agent greedy actions over a value table (ties to the lower action).
template <class Real>
std::vector<int> greedy_actions(const Tensor<Real>& q, const std::vector<uint8_t>& alive) {
  const int A = q.shape[0], U = q.shape[1];
  std::vector<int> actions(A, 0);
  for (int a = 0; a < A; ++a) {
    if (!alive[a]) continue;
    int best = 0;
    for (int u = 1; u < U; ++u)
      if (q.at(a, u) > q.at(a, best)) best = u;
    actions[a] = best;
  }
  return actions;
}

}  // namespace teamform
