#pragma once

// Entity-wise feedforward transforms and masked multi-head attention, plus the
// complementary in/out mask sampler and the attention-weight preference
// extraction used for team formation.

#include <random>

#include "teamform/matching.hpp"
#include "teamform/tensor.hpp"

namespace teamform {

enum class Role : uint8_t { leader, follower, non_agent };

// Entity feature matrix plus role tags. Agents occupy the first agent_count
// rows with leaders first.
template <class Real>
struct EntityMatrix {
  Tensor<Real> features;  // |E| x d
  std::vector<Role> roles;
  int agent_count = 0;
  int entity_count = 0;

  int leader_count() const {
    int n = 0;
    for (Role r : roles)
      if (r == Role::leader) ++n;
    return n;
  }

  void validate() const {
    if (features.rank() != 2 || features.shape[0] != entity_count)
      throw std::invalid_argument("EntityMatrix: feature matrix must be |E| x d");
    if (int(roles.size()) != entity_count)
      throw std::invalid_argument("EntityMatrix: one role tag per entity required");
    if (agent_count > entity_count)
      throw std::invalid_argument("EntityMatrix: agent count exceeds entity count");
    for (int e = 0; e < entity_count; ++e) {
      bool is_agent = roles[e] != Role::non_agent;
      if (is_agent != (e < agent_count))
        throw std::invalid_argument("EntityMatrix: agents must occupy the first rows");
    }
    for (int e = 1; e < agent_count; ++e)
      if (roles[e] == Role::leader && roles[e - 1] != Role::leader)
        throw std::invalid_argument("EntityMatrix: leaders must precede followers");
  }
};

// EntityMatrix features widened with a one-hot role column block
// (leader / follower / non-agent).
template <class Real>
struct AugmentedEntityMatrix {
  Tensor<Real> features;  // |E| x (d+3)
  std::vector<Role> roles;
  int agent_count = 0;
  int entity_count = 0;
};

template <class Real>
AugmentedEntityMatrix<Real> augment(const EntityMatrix<Real>& x) {
  const int e_count = x.entity_count;
  Tensor<Real> onehot = Tensor<Real>::zeros({e_count, 3});
  for (int e = 0; e < e_count; ++e) onehot.at(e, int(x.roles[e])) = Real(1);
  AugmentedEntityMatrix<Real> out;
  out.features = concat_cols(x.features, onehot);
  out.roles = x.roles;
  out.agent_count = x.agent_count;
  out.entity_count = e_count;
  return out;
}

// Observability mask plus one random complementary split of each agent's
// observable entities. The *_full variants carry the same subset draw without
// the observability restriction; the hypernetwork consumes those.
struct MaskSet {
  BinaryMatrix observability;  // M, |A| x |E|
  BinaryMatrix in_mask;        // observability AND same-subset(a, e)
  BinaryMatrix out_mask;       // observability AND different-subset(a, e)
  BinaryMatrix in_full;        // subset split only, self always in
  BinaryMatrix out_full;
};

inline void validate_mask_set(const MaskSet& m) {
  if (!m.in_mask.same_shape(m.observability) || !m.out_mask.same_shape(m.observability))
    throw std::invalid_argument("MaskSet: mask shapes disagree");
  const int A = m.observability.rows, E = m.observability.cols;
  for (int a = 0; a < A; ++a) {
    if (a < E && m.observability(a, a) && !m.in_mask(a, a))
      throw std::invalid_argument("MaskSet: agent " + std::to_string(a) +
                                  " missing from its own in-subset");
    for (int e = 0; e < E; ++e) {
      uint8_t in = m.in_mask(a, e), out = m.out_mask(a, e);
      if (in && out)
        throw std::invalid_argument("MaskSet: in/out masks overlap at (" +
                                    std::to_string(a) + "," + std::to_string(e) + ")");
      if ((in | out) != m.observability(a, e))
        throw std::invalid_argument("MaskSet: in/out masks do not partition observability at (" +
                                    std::to_string(a) + "," + std::to_string(e) + ")");
    }
  }
}

// Draws one fair-coin subset assignment over entities; every agent is forced
// into the in-subset from its own perspective. Requires observability[a][a]=1.
inline MaskSet sample_complementary_masks(const BinaryMatrix& observability,
                                          std::mt19937_64& rng) {
  const int A = observability.rows, E = observability.cols;
  for (int a = 0; a < A && a < E; ++a)
    if (!observability(a, a))
      throw std::invalid_argument("sample_complementary_masks: agent " + std::to_string(a) +
                                  " cannot observe itself");
  std::vector<uint8_t> in_subset(E);
  for (int e = 0; e < E; ++e) in_subset[e] = uint8_t(rng() & 1u);

  MaskSet m;
  m.observability = observability;
  m.in_mask = BinaryMatrix::zeros(A, E);
  m.out_mask = BinaryMatrix::zeros(A, E);
  m.in_full = BinaryMatrix::zeros(A, E);
  m.out_full = BinaryMatrix::zeros(A, E);
  for (int a = 0; a < A; ++a) {
    for (int e = 0; e < E; ++e) {
      const bool in = in_subset[e] || e == a;
      m.in_full(a, e) = in;
      m.out_full(a, e) = !in;
      m.in_mask(a, e) = observability(a, e) & uint8_t(in);
      m.out_mask(a, e) = observability(a, e) & uint8_t(!in);
    }
  }
  return m;
}

template <class Real>
struct EntityFFParams {
  Tensor<Real> w;  // in x h
  Tensor<Real> b;  // h
};

// Identical affine map + nonlinearity applied to every entity row.
template <class Real>
Tensor<Real> entity_ff(const Tensor<Real>& x, const EntityFFParams<Real>& p) {
  if (x.rank() != 2 || x.shape[1] != p.w.shape[0])
    detail::dim_error("entity_ff", x.shape, p.w.shape);
  return relu(linear(x, p.w, p.b));
}

template <class Real>
struct AttentionParams {
  Tensor<Real> wq, wk, wv;  // h x h, sliced per head
  Tensor<Real> wo;          // h x h
  int heads = 4;
};

template <class Real>
struct AttentionOutput {
  Tensor<Real> embeddings;                 // |A| x h
  std::vector<Tensor<Real>> head_weights;  // heads of |A| x |E|
};

// Per-head projected queries, keys, and values. One cache serves any number
// of mask variants over the same entity embeddings.
template <class Real>
struct AttentionCache {
  std::vector<Tensor<Real>> q, k, v;  // per head: |A| x hd / |E| x hd / |E| x hd
  int agent_count = 0;
  int entity_count = 0;
  int head_dim = 0;
};

template <class Real>
AttentionCache<Real> attention_cache(const Tensor<Real>& kv, int agent_count,
                                     const AttentionParams<Real>& p) {
  const int E = kv.shape[0], h = kv.shape[1];
  if (agent_count < 1 || agent_count > E)
    throw std::invalid_argument("attention_cache: agent count out of range");
  if (p.heads < 1 || h % p.heads != 0)
    throw std::invalid_argument("attention_cache: head count must divide embedding width");
  AttentionCache<Real> cache;
  cache.agent_count = agent_count;
  cache.entity_count = E;
  cache.head_dim = h / p.heads;
  Tensor<Real> queries = slice_rows(kv, 0, agent_count);
  Tensor<Real> q = matmul(queries, p.wq);
  Tensor<Real> k = matmul(kv, p.wk);
  Tensor<Real> v = matmul(kv, p.wv);
  for (int head = 0; head < p.heads; ++head) {
    const int c0 = head * cache.head_dim, c1 = (head + 1) * cache.head_dim;
    cache.q.push_back(slice_cols(q, c0, c1));
    cache.k.push_back(slice_cols(k, c0, c1));
    cache.v.push_back(slice_cols(v, c0, c1));
  }
  return cache;
}

// Masked scaled dot-product attention over a prepared cache; heads are
// concatenated then linearly projected. Callers must guarantee no
// fully-masked agent row.
template <class Real>
AttentionOutput<Real> mha_apply(const AttentionCache<Real>& cache, const BinaryMatrix& mask,
                                const AttentionParams<Real>& p) {
  if (mask.rows != cache.agent_count || mask.cols != cache.entity_count)
    detail::dim_error("mha_apply (mask)", {cache.agent_count, cache.entity_count},
                      {mask.rows, mask.cols});
  const double scale = 1.0 / std::sqrt(double(cache.head_dim));
  AttentionOutput<Real> out;
  out.head_weights.reserve(p.heads);
  Tensor<Real> merged;
  for (int head = 0; head < p.heads; ++head) {
    Tensor<Real> scores = affine(matmul(cache.q[head], transpose(cache.k[head])), scale, 0.0);
    Tensor<Real> weights = softmax_masked(scores, mask, 1);
    out.head_weights.push_back(weights);
    Tensor<Real> attended = matmul(weights, cache.v[head]);
    merged = head == 0 ? attended : concat_cols(merged, attended);
  }
  out.embeddings = matmul(merged, p.wo);
  return out;
}

// Single-mask convenience wrapper.
template <class Real>
AttentionOutput<Real> mha_forward(const Tensor<Real>& kv, int agent_count,
                                  const BinaryMatrix& mask, const AttentionParams<Real>& p) {
  return mha_apply(attention_cache(kv, agent_count, p), mask, p);
}

// Attention weights under the all-ones mask, restricted to the agent-agent
// block and max-pooled across heads. Detached from the graph: matching is not
// differentiated through.
template <class Real>
PreferenceMatrix extract_preferences(const AugmentedEntityMatrix<Real>& x,
                                     const EntityFFParams<Real>& eff,
                                     const AttentionParams<Real>& attn, int leader_count) {
  const int A = x.agent_count;
  if (A < 2) throw std::invalid_argument("extract_preferences: need at least 2 agents");
  NoGradGuard ng;
  Tensor<Real> ff = entity_ff(x.features, eff);
  AttentionOutput<Real> att = mha_forward(ff, A, BinaryMatrix::ones(A, x.entity_count), attn);

  PreferenceMatrix prefs;
  prefs.agents = A;
  prefs.leaders = leader_count;
  prefs.scores.assign(size_t(A) * A, 0.0);
  for (const auto& w : att.head_weights)
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < A; ++j)
        prefs.at(i, j) = std::max(prefs.at(i, j), double(w.at(i, j)));
  return prefs;
}

}  // namespace teamform
