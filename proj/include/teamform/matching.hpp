#pragma once

// Bilateral team formation between leader and follower agents.
//
// Agents are indexed 0..A-1 with leaders occupying 0..L-1 and followers
// L..A-1. Ranking on either side is by score, descending, with ties broken
// toward the lower agent index; both algorithms are deterministic.

#include <cstdint>
#include <optional>
#include <tuple>

#include "json.hpp"
#include "teamform/tensor.hpp"

namespace teamform {

// Inter-agent score matrix; row i quantifies agent i's preference over every
// other agent. The diagonal is carried but never read by matching.
struct PreferenceMatrix {
  int agents = 0;
  int leaders = 0;
  std::vector<double> scores;  // row-major agents x agents

  double at(int i, int j) const { return scores[size_t(i) * agents + j]; }
  double& at(int i, int j) { return scores[size_t(i) * agents + j]; }
  int followers() const { return agents - leaders; }

  void validate() const {
    if (agents < 2) throw std::invalid_argument("PreferenceMatrix: need at least 2 agents");
    if (leaders < 1 || leaders >= agents)
      throw std::invalid_argument("PreferenceMatrix: leader count out of range");
    if (int(scores.size()) != agents * agents)
      throw std::invalid_argument("PreferenceMatrix: score matrix is not |A|x|A|");
    for (double s : scores)
      if (!std::isfinite(s))
        throw std::invalid_argument("PreferenceMatrix: non-finite score entry");
  }
};

// Per-leader follower capacities; indexed by leader.
struct CapacityPlan {
  std::vector<int> capacities;

  int total() const {
    int s = 0;
    for (int c : capacities) s += c;
    return s;
  }
};

// Partition of followers among leaders. Teams are ordered by leader index and
// follower lists are kept sorted, so equality is structural.
struct Grouping {
  std::vector<std::pair<int, std::vector<int>>> teams;  // leader -> followers

  bool operator==(const Grouping& o) const { return teams == o.teams; }

  const std::vector<int>* followers_of(int leader) const {
    for (auto& [l, fs] : teams)
      if (l == leader) return &fs;
    return nullptr;
  }

  // Leader of a follower, or nullopt when unassigned.
  std::optional<int> leader_of(int follower) const {
    for (auto& [l, fs] : teams)
      for (int f : fs)
        if (f == follower) return l;
    return std::nullopt;
  }

  int follower_count() const {
    int n = 0;
    for (auto& [l, fs] : teams) n += int(fs.size());
    return n;
  }
};

// First (F mod L) leaders take the ceiling share, the rest the floor share;
// capacities always sum to follower_count and differ by at most one.
inline CapacityPlan balance_capacities(int leader_count, int follower_count) {
  if (leader_count < 1)
    throw std::invalid_argument("balance_capacities: leader_count must be positive");
  if (follower_count < 0)
    throw std::invalid_argument("balance_capacities: negative follower_count");
  CapacityPlan plan;
  plan.capacities.resize(leader_count, follower_count / leader_count);
  for (int l = 0; l < follower_count % leader_count; ++l) plan.capacities[l] += 1;
  return plan;
}

namespace detail {

inline void check_instance(const PreferenceMatrix& prefs, const CapacityPlan& plan) {
  prefs.validate();
  if (int(plan.capacities.size()) != prefs.leaders)
    throw std::invalid_argument("matching: capacity plan size must equal leader count");
  for (int c : plan.capacities)
    if (c < 0) throw std::invalid_argument("matching: negative capacity");
  if (plan.total() != prefs.followers())
    throw std::invalid_argument("matching: capacities must sum to follower count");
}

// True iff agent i strictly prefers candidate a over candidate b given i's
// score row (ties rank the lower index higher).
inline bool strictly_prefers(const PreferenceMatrix& prefs, int i, int a, int b) {
  double sa = prefs.at(i, a), sb = prefs.at(i, b);
  if (sa != sb) return sa > sb;
  return a < b;
}

inline Grouping canonical_grouping(int leaders, std::vector<std::vector<int>> teams) {
  Grouping g;
  g.teams.reserve(leaders);
  for (int l = 0; l < leaders; ++l) {
    std::sort(teams[l].begin(), teams[l].end());
    g.teams.emplace_back(l, std::move(teams[l]));
  }
  return g;
}

}  // namespace detail

struct MatchStats {
  int proposals = 0;
};

// Order Oriented Matching: many-to-one deferred acceptance with leaders
// proposing. A free-capacity leader proposes down its ranking; an unassigned
// follower accepts tentatively; an assigned follower switches only when it
// strictly prefers the proposer, freeing a slot for the displaced leader.
// The result has no blocking pair.
inline Grouping oom_match(const PreferenceMatrix& prefs, const CapacityPlan& plan,
                          MatchStats* stats = nullptr) {
  detail::check_instance(prefs, plan);
  const int L = prefs.leaders, A = prefs.agents, F = A - L;

  // Strict follower rankings per leader, best first.
  std::vector<std::vector<int>> ranking(L);
  for (int l = 0; l < L; ++l) {
    ranking[l].resize(F);
    for (int i = 0; i < F; ++i) ranking[l][i] = L + i;
    std::sort(ranking[l].begin(), ranking[l].end(), [&](int a, int b) {
      return detail::strictly_prefers(prefs, l, a, b);
    });
  }

  std::vector<std::vector<int>> teams(L);
  std::vector<int> next_proposal(L, 0);   // cursor into ranking[l]
  std::vector<int> assigned_to(A, -1);    // follower -> leader
  int proposals = 0;

  while (true) {
    int l = -1;
    for (int cand = 0; cand < L; ++cand) {
      if (int(teams[cand].size()) < plan.capacities[cand] && next_proposal[cand] < F) {
        l = cand;
        break;
      }
    }
    if (l < 0) break;
    const int f = ranking[l][next_proposal[l]++];
    ++proposals;
    const int rival = assigned_to[f];
    if (rival < 0) {
      teams[l].push_back(f);
      assigned_to[f] = l;
    } else if (detail::strictly_prefers(prefs, f, l, rival)) {
      auto& rt = teams[rival];
      rt.erase(std::find(rt.begin(), rt.end(), f));
      teams[l].push_back(f);
      assigned_to[f] = l;
    }
    // Otherwise f keeps its current leader and l moves on next round.
  }
  if (stats) stats->proposals = proposals;
  return detail::canonical_grouping(L, std::move(teams));
}

// Score Oriented Matching: followers in ascending index order each take the
// not-yet-full leader maximizing the mutual score S[f][l] + S[l][f] (ties
// toward the lower leader index). Greedy; offers no stability guarantee.
inline Grouping som_match(const PreferenceMatrix& prefs, const CapacityPlan& plan) {
  detail::check_instance(prefs, plan);
  const int L = prefs.leaders, A = prefs.agents;
  std::vector<std::vector<int>> teams(L);
  for (int f = L; f < A; ++f) {
    double best_score = -std::numeric_limits<double>::infinity();
    int best_leader = -1;
    for (int l = 0; l < L; ++l) {
      if (int(teams[l].size()) >= plan.capacities[l]) continue;
      double mutual = prefs.at(f, l) + prefs.at(l, f);
      if (mutual > best_score) {
        best_score = mutual;
        best_leader = l;
      }
    }
    if (best_leader >= 0) teams[best_leader].push_back(f);
  }
  return detail::canonical_grouping(L, std::move(teams));
}

// Exhaustive blocking-pair scan: (l, f) blocks when f strictly prefers l to
// its current assignment and l either has spare capacity or strictly prefers
// f to someone already on its team. Empty result <=> stable.
inline std::vector<std::pair<int, int>> find_blocking_pairs(const Grouping& grouping,
                                                            const PreferenceMatrix& prefs,
                                                            const CapacityPlan& plan) {
  detail::check_instance(prefs, plan);
  std::vector<std::pair<int, int>> blocking;
  const int L = prefs.leaders, A = prefs.agents;
  for (int l = 0; l < L; ++l) {
    const std::vector<int>* team = grouping.followers_of(l);
    const int size = team ? int(team->size()) : 0;
    for (int f = L; f < A; ++f) {
      if (team && std::find(team->begin(), team->end(), f) != team->end()) continue;
      auto current = grouping.leader_of(f);
      if (current && !detail::strictly_prefers(prefs, f, l, *current)) continue;
      bool leader_wants = size < plan.capacities[l];
      if (!leader_wants && team) {
        for (int member : *team) {
          if (detail::strictly_prefers(prefs, l, f, member)) {
            leader_wants = true;
            break;
          }
        }
      }
      if (leader_wants) blocking.emplace_back(l, f);
    }
  }
  return blocking;
}

// Brute-force stability oracle: enumerates every capacity-respecting
// assignment of followers to leaders and keeps the stable ones. Guarded to
// |L| <= 3 and |F| <= 7 because enumeration is exponential.
inline std::vector<Grouping> enumerate_stable_matchings(const PreferenceMatrix& prefs,
                                                        const CapacityPlan& plan) {
  detail::check_instance(prefs, plan);
  const int L = prefs.leaders, F = prefs.followers();
  if (L > 3 || F > 7)
    throw std::invalid_argument(
        "enumerate_stable_matchings: instance exceeds size guard (|L| <= 3, |F| <= 7)");

  std::vector<Grouping> stable;
  std::vector<std::vector<int>> teams(L);
  std::vector<int> load(L, 0);
  std::function<void(int)> assign = [&](int fi) {
    if (fi == F) {
      Grouping g = detail::canonical_grouping(L, teams);
      if (find_blocking_pairs(g, prefs, plan).empty()) stable.push_back(std::move(g));
      return;
    }
    const int f = prefs.leaders + fi;
    for (int l = 0; l < L; ++l) {
      if (load[l] >= plan.capacities[l]) continue;
      teams[l].push_back(f);
      ++load[l];
      assign(fi + 1);
      teams[l].pop_back();
      --load[l];
    }
  };
  assign(0);
  return stable;
}

// --- structured text records ------------------------------------------------

inline nlohmann::json preference_to_json(const PreferenceMatrix& prefs) {
  return {{"agents", prefs.agents}, {"leaders", prefs.leaders}, {"scores", prefs.scores}};
}

inline PreferenceMatrix preference_from_json(const nlohmann::json& j) {
  PreferenceMatrix p;
  p.agents = j.at("agents").get<int>();
  p.leaders = j.at("leaders").get<int>();
  p.scores = j.at("scores").get<std::vector<double>>();
  p.validate();
  return p;
}

inline nlohmann::json grouping_to_json(const Grouping& g) {
  nlohmann::json teams = nlohmann::json::array();
  for (auto& [l, fs] : g.teams) teams.push_back({{"leader", l}, {"followers", fs}});
  return {{"teams", teams}};
}

inline Grouping grouping_from_json(const nlohmann::json& j) {
  Grouping g;
  for (auto& t : j.at("teams"))
    g.teams.emplace_back(t.at("leader").get<int>(),
                         t.at("followers").get<std::vector<int>>());
  return g;
}

}  // namespace teamform
