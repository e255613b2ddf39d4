#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "teamform/attention.hpp"
#include "teamform/grad_check.hpp"

using namespace teamform;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

template <class Real>
EntityFFParams<Real> random_eff(int in, int h, std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(double(in));
  return {Tensor<Real>::randu({in, h}, rng, -k, k, true),
          Tensor<Real>::randu({h}, rng, -k, k, true)};
}

template <class Real>
AttentionParams<Real> random_attn(int h, int heads, std::mt19937_64& rng) {
  double k = 1.0 / std::sqrt(double(h));
  AttentionParams<Real> p;
  p.wq = Tensor<Real>::randu({h, h}, rng, -k, k, true);
  p.wk = Tensor<Real>::randu({h, h}, rng, -k, k, true);
  p.wv = Tensor<Real>::randu({h, h}, rng, -k, k, true);
  p.wo = Tensor<Real>::randu({h, h}, rng, -k, k, true);
  p.heads = heads;
  return p;
}

EntityMatrix<double> random_entities(int agents, int leaders, int entities, int d,
                                     std::mt19937_64& rng) {
  EntityMatrix<double> x;
  x.features = Tensor<double>::randu({entities, d}, rng, -1, 1);
  x.agent_count = agents;
  x.entity_count = entities;
  x.roles.resize(entities, Role::non_agent);
  for (int a = 0; a < agents; ++a) x.roles[a] = a < leaders ? Role::leader : Role::follower;
  return x;
}

}  // namespace

TEST_CASE("augment appends exactly one active role column per entity") {
  std::mt19937_64 rng(1);
  auto x = random_entities(3, 1, 5, 4, rng);
  auto aug = augment(x);
  REQUIRE(aug.features.shape == std::vector<int>{5, 7});
  for (int e = 0; e < 5; ++e) {
    // Original features preserved.
    for (int j = 0; j < 4; ++j) REQUIRE(aug.features.at(e, j) == x.features.at(e, j));
    double onehot_sum = 0;
    for (int j = 4; j < 7; ++j) onehot_sum += aug.features.at(e, j);
    REQUIRE(onehot_sum == 1.0);
    REQUIRE(aug.features.at(e, 4 + int(x.roles[e])) == 1.0);
  }
}

TEST_CASE("entity_ff applies one identical transformation to every row") {
  std::mt19937_64 rng(2);
  auto p = random_eff<double>(4, 6, rng);

  SECTION("identical rows map to identical outputs") {
    auto x = Tensor<double>::from({2, 4}, {1, -2, 3, 0.5, 1, -2, 3, 0.5});
    auto out = entity_ff(x, p);
    for (int j = 0; j < 6; ++j) REQUIRE(out.at(0, j) == out.at(1, j));
  }
  SECTION("permuting rows permutes outputs identically") {
    auto x = Tensor<double>::randu({3, 4}, rng, -1, 1);
    auto perm = Tensor<double>::zeros({3, 4});
    int order[3] = {2, 0, 1};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) perm.at(i, j) = x.at(order[i], j);
    auto out = entity_ff(x, p);
    auto out_perm = entity_ff(perm, p);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 6; ++j) REQUIRE(out_perm.at(i, j) == out.at(order[i], j));
  }
  SECTION("zero weights give activation(bias) everywhere") {
    EntityFFParams<double> zp{Tensor<double>::zeros({4, 6}),
                              Tensor<double>::from({6}, {1, -1, 2, -2, 0.5, 0})};
    auto out = entity_ff(Tensor<double>::randu({3, 4}, rng, -5, 5), zp);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 6; ++j)
        REQUIRE(out.at(i, j) == std::max(0.0, zp.b.at(j)));
  }
  SECTION("width mismatch raises a dimension error") {
    REQUIRE_THROWS_WITH(entity_ff(Tensor<double>::zeros({2, 3}), p),
                        ContainsSubstring("[2,3]"));
  }
}

TEST_CASE("mha_forward attention weight structure") {
  std::mt19937_64 rng(3);
  const int h = 8, heads = 4, A = 3, E = 5;
  auto attn = random_attn<double>(h, heads, rng);

  SECTION("identical entity embeddings give uniform weights") {
    auto kv = Tensor<double>::zeros({E, h});
    for (int e = 0; e < E; ++e)
      for (int j = 0; j < h; ++j) kv.at(e, j) = 0.3 * (j + 1);
    auto out = mha_forward(kv, A, BinaryMatrix::ones(A, E), attn);
    for (auto& w : out.head_weights)
      for (int a = 0; a < A; ++a)
        for (int e = 0; e < E; ++e) REQUIRE(w.at(a, e) == Approx(1.0 / E).margin(1e-12));
  }

  SECTION("a single unmasked entity receives weight one") {
    auto kv = Tensor<double>::randu({E, h}, rng, -1, 1);
    BinaryMatrix mask(A, E);
    mask(0, 2) = 1;
    mask(1, 0) = 1;
    mask(2, 4) = 1;
    auto out = mha_forward(kv, A, mask, attn);
    for (auto& w : out.head_weights) {
      REQUIRE(w.at(0, 2) == 1.0);
      REQUIRE(w.at(1, 0) == 1.0);
      REQUIRE(w.at(2, 4) == 1.0);
    }
    // Output equals the value projection of the forced entity.
    auto v = matmul(kv, attn.wv);
    Tensor<double> merged = Tensor<double>::zeros({A, h});
    int forced[A] = {2, 0, 4};
    for (int a = 0; a < A; ++a)
      for (int j = 0; j < h; ++j) merged.at(a, j) = v.at(forced[a], j);
    auto expect = matmul(merged, attn.wo);
    for (int a = 0; a < A; ++a)
      for (int j = 0; j < h; ++j)
        REQUIRE(out.embeddings.at(a, j) == Approx(expect.at(a, j)).margin(1e-12));
  }

  SECTION("rows sum to one over unmasked entries; masked entries exactly zero") {
    auto kv = Tensor<double>::randu({E, h}, rng, -1, 1);
    BinaryMatrix mask(A, E);
    for (int a = 0; a < A; ++a) {
      for (int e = 0; e < E; ++e) mask(a, e) = uint8_t(rng() & 1);
      mask(a, a) = 1;
    }
    auto out = mha_forward(kv, A, mask, attn);
    REQUIRE(int(out.head_weights.size()) == heads);
    for (auto& w : out.head_weights)
      for (int a = 0; a < A; ++a) {
        double row = 0;
        for (int e = 0; e < E; ++e) {
          if (!mask(a, e)) REQUIRE(w.at(a, e) == 0.0);
          row += w.at(a, e);
        }
        REQUIRE(row == Approx(1.0).margin(1e-9));
      }
  }

  SECTION("fully masked agent row propagates the softmax error") {
    auto kv = Tensor<double>::randu({E, h}, rng, -1, 1);
    BinaryMatrix mask = BinaryMatrix::ones(A, E);
    for (int e = 0; e < E; ++e) mask(1, e) = 0;
    REQUIRE_THROWS_WITH(mha_forward(kv, A, mask, attn),
                        ContainsSubstring("fully masked slice 1"));
  }
}

TEST_CASE("mha gradients match finite differences") {
  std::mt19937_64 rng(4);
  const int h = 8, A = 3, E = 5, d = 4;
  auto eff = random_eff<double>(d, h, rng);
  auto attn = random_attn<double>(h, 4, rng);
  auto x = Tensor<double>::randu({E, d}, rng, -1, 1);
  BinaryMatrix mask(A, E);
  for (int a = 0; a < A; ++a) {
    for (int e = 0; e < E; ++e) mask(a, e) = uint8_t(rng() & 1);
    mask(a, a) = 1;
  }
  std::vector<Tensor<double>> inputs{x,      eff.w,   eff.b,  attn.wq,
                                     attn.wk, attn.wv, attn.wo};
  auto report = grad_check(
      [&](std::vector<Tensor<double>>& in) {
        EntityFFParams<double> e2{in[1], in[2]};
        AttentionParams<double> a2{in[3], in[4], in[5], in[6], 4};
        auto out = mha_forward(entity_ff(in[0], e2), A, mask, a2);
        return sum_all(out.embeddings);
      },
      inputs);
  INFO("worst rel error " << report.worst);
  REQUIRE(report.worst < 1e-4);
}

TEST_CASE("sample_complementary_masks examples") {
  SECTION("seeded draw matches the stated subset rule") {
    // Find a seed whose first three coin flips assign entities (I,O,I).
    std::optional<uint64_t> seed;
    for (uint64_t s = 0; s < 64 && !seed; ++s) {
      std::mt19937_64 probe(s);
      if ((probe() & 1) == 1 && (probe() & 1) == 0 && (probe() & 1) == 1) seed = s;
    }
    REQUIRE(seed.has_value());
    std::mt19937_64 rng(*seed);
    auto m = sample_complementary_masks(BinaryMatrix::ones(2, 3), rng);
    // Agent 0: in selects {0,2}, out selects {1}.
    REQUIRE(m.in_mask(0, 0) == 1);
    REQUIRE(m.in_mask(0, 1) == 0);
    REQUIRE(m.in_mask(0, 2) == 1);
    REQUIRE(m.out_mask(0, 1) == 1);
    // Agent 1 is entity 1: forced into its own in-subset, so its out row is empty.
    REQUIRE(m.in_mask(1, 0) == 1);
    REQUIRE(m.in_mask(1, 1) == 1);
    REQUIRE(m.in_mask(1, 2) == 1);
    REQUIRE(m.out_mask.row_sum(1) == 0);
    validate_mask_set(m);
  }

  SECTION("degenerate draw: all entities in the in-subset") {
    // With all coins landing in-subset, in equals observability and out is empty.
    BinaryMatrix obs = BinaryMatrix::ones(2, 4);
    obs(0, 3) = 0;
    for (uint64_t s = 0; s < 4096; ++s) {
      std::mt19937_64 probe(s);
      bool all_in = true;
      for (int e = 0; e < 4; ++e) all_in &= (probe() & 1) == 1;
      if (!all_in) continue;
      std::mt19937_64 rng(s);
      auto m = sample_complementary_masks(obs, rng);
      REQUIRE(m.in_mask == obs);
      REQUIRE(m.out_mask == BinaryMatrix::zeros(2, 4));
      validate_mask_set(m);
      return;
    }
    FAIL("no all-in seed found in probe range");
  }

  SECTION("agent unable to observe itself is a contract error") {
    BinaryMatrix obs = BinaryMatrix::ones(2, 3);
    obs(1, 1) = 0;
    std::mt19937_64 rng(0);
    REQUIRE_THROWS_WITH(sample_complementary_masks(obs, rng),
                        ContainsSubstring("observe itself"));
  }
}

TEST_CASE("mask complementarity invariants hold for 1000 seeded draws") {
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    int A = 2 + int(rng() % 4), E = A + int(rng() % 5);
    BinaryMatrix obs(A, E);
    for (int a = 0; a < A; ++a) {
      for (int e = 0; e < E; ++e) obs(a, e) = uint8_t(rng() & 1);
      obs(a, a) = 1;
    }
    auto m = sample_complementary_masks(obs, rng);
    REQUIRE_NOTHROW(validate_mask_set(m));
    for (int a = 0; a < A; ++a)
      for (int e = 0; e < E; ++e) {
        // Restriction: in/out masks live inside observability.
        REQUIRE((m.in_mask(a, e) & ~obs(a, e)) == 0);
        REQUIRE((m.out_mask(a, e) & ~obs(a, e)) == 0);
        // Full variants partition everything, with self forced in.
        REQUIRE((m.in_full(a, e) ^ m.out_full(a, e)) == 1);
      }
    for (int a = 0; a < A; ++a) REQUIRE(m.in_full(a, a) == 1);
  }
}

TEST_CASE("extract_preferences") {
  std::mt19937_64 rng(6);
  const int h = 8, d = 4;

  SECTION("identical entity embeddings give uniform scores 1/|E|") {
    const int A = 3, E = 5;
    EntityMatrix<double> x;
    x.features = Tensor<double>::zeros({E, d});
    x.agent_count = A;
    x.entity_count = E;
    x.roles = {Role::leader, Role::follower, Role::follower, Role::non_agent,
               Role::non_agent};
    for (int e = 0; e < E; ++e)
      for (int j = 0; j < d; ++j) x.features.at(e, j) = 0.25 * j;
    // Zero the feedforward rows that read the role one-hot so every entity
    // keeps an identical embedding despite differing roles.
    auto eff = random_eff<double>(d + 3, h, rng);
    for (int r = d; r < d + 3; ++r)
      for (int j = 0; j < h; ++j) eff.w.at(r, j) = 0.0;
    auto attn = random_attn<double>(h, 4, rng);
    auto prefs = extract_preferences(augment(x), eff, attn, 1);
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < A; ++j) REQUIRE(prefs.at(i, j) == Approx(1.0 / E).margin(1e-12));
  }

  SECTION("entries lie in (0,1], rows need not sum to one, and extraction is deterministic") {
    const int A = 4, E = 6;
    auto x = random_entities(A, 2, E, d, rng);
    auto eff = random_eff<double>(d + 3, h, rng);
    auto attn = random_attn<double>(h, 4, rng);
    auto prefs = extract_preferences(augment(x), eff, attn, 2);
    REQUIRE(prefs.agents == A);
    REQUIRE(int(prefs.scores.size()) == A * A);
    double row0 = 0;
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < A; ++j) {
        REQUIRE(prefs.at(i, j) > 0.0);
        REQUIRE(prefs.at(i, j) <= 1.0);
        if (i == 0) row0 += prefs.at(0, j);
      }
    REQUIRE(row0 < 1.0);  // non-agent columns were dropped
    auto again = extract_preferences(augment(x), eff, attn, 2);
    REQUIRE(again.scores == prefs.scores);
  }

  SECTION("max pooling keeps a head that strictly dominates") {
    const int A = 2, E = 3;
    auto x = random_entities(A, 1, E, d, rng);
    auto eff = random_eff<double>(d + 3, h, rng);
    auto attn = random_attn<double>(h, 4, rng);
    auto aug = augment(x);
    auto ff = entity_ff(aug.features, eff);
    auto att = mha_forward(ff, A, BinaryMatrix::ones(A, E), attn);
    auto prefs = extract_preferences(aug, eff, attn, 1);
    for (int i = 0; i < A; ++i)
      for (int j = 0; j < A; ++j) {
        double best = 0;
        for (auto& w : att.head_weights) best = std::max(best, w.at(i, j));
        REQUIRE(prefs.at(i, j) == best);
      }
  }
}

TEST_CASE("permuting non-agent entity rows leaves agent outputs unchanged") {
  std::mt19937_64 rng(8);
  const int h = 8, d = 4, A = 3, E = 7;
  auto eff = random_eff<double>(d, h, rng);
  auto attn = random_attn<double>(h, 4, rng);

  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensor<double>::randu({E, d}, rng, -1, 1);
    BinaryMatrix mask(A, E);
    for (int a = 0; a < A; ++a) {
      for (int e = 0; e < E; ++e) mask(a, e) = uint8_t(rng() & 1);
      mask(a, a) = 1;
    }
    std::vector<int> perm{A, A + 1, A + 2, A + 3};
    std::shuffle(perm.begin(), perm.end(), rng);

    auto px = Tensor<double>::zeros({E, d});
    BinaryMatrix pmask(A, E);
    for (int a = 0; a < A; ++a)
      for (int j = 0; j < d; ++j) px.at(a, j) = x.at(a, j);
    for (int a = 0; a < A; ++a)
      for (int e = 0; e < A; ++e) pmask(a, e) = mask(a, e);
    for (int i = 0; i < int(perm.size()); ++i) {
      for (int j = 0; j < d; ++j) px.at(A + i, j) = x.at(perm[i], j);
      for (int a = 0; a < A; ++a) pmask(a, A + i) = mask(a, perm[i]);
    }

    auto base = mha_forward(entity_ff(x, eff), A, mask, attn);
    auto permuted = mha_forward(entity_ff(px, eff), A, pmask, attn);
    for (int a = 0; a < A; ++a)
      for (int j = 0; j < h; ++j)
        REQUIRE(permuted.embeddings.at(a, j) ==
                Approx(base.embeddings.at(a, j)).margin(1e-10));
  }
}
