#pragma once

// Desk-scale entity-wise cooperative gridworld. Leader and follower agents
// escort each other to capture static targets while hazard entities patrol
// fixed cycles; a capture needs a leader and one of its own team's followers
// adjacent to the target, both choosing interact, which makes team quality
// reward-relevant.

#include <fstream>
#include <map>

#include "json.hpp"
#include "teamform/attention.hpp"
#include "teamform/matching.hpp"

namespace teamform {

struct RewardConfig {
  double step_penalty = -0.01;
  double capture = 1.0;
  double completion = 5.0;
};

struct WorldConfig {
  int grid_side = 8;
  int agents_min = 3;
  int agents_max = 5;
  int leader_count = 2;
  int target_count = 2;
  int hazard_count = 1;
  int episode_limit = 50;
  int obs_radius = 3;
  RewardConfig rewards;
  uint64_t seed = 0;

  static constexpr int feature_dim = 10;
  static constexpr int action_count = 6;

  int max_entities() const { return agents_max + target_count + hazard_count; }

  void validate() const {
    if (grid_side < 2) throw std::invalid_argument("WorldConfig: grid too small");
    if (agents_min < 2 || agents_max < agents_min)
      throw std::invalid_argument("WorldConfig: bad agent count range");
    if (leader_count < 1 || leader_count > 4)
      throw std::invalid_argument("WorldConfig: leader count must lie in 1..4");
    if (leader_count >= agents_min)
      throw std::invalid_argument("WorldConfig: need at least one follower");
    if (target_count < 1) throw std::invalid_argument("WorldConfig: need at least one target");
    if (hazard_count < 0 || episode_limit < 1 || obs_radius < 0)
      throw std::invalid_argument("WorldConfig: bad scalar field");
    if (max_entities() > grid_side * grid_side)
      throw std::invalid_argument("WorldConfig: grid too small to place all entities");
  }
};

enum class Action : int { stay = 0, up = 1, down = 2, left = 3, right = 4, interact = 5 };

enum class EntityKind : uint8_t { leader, follower, target, hazard };

struct EntityState {
  EntityKind kind = EntityKind::target;
  int x = 0, y = 0;
  bool alive = true;
  // Hazard patrol: ping-pong along x between [patrol_lo, patrol_hi].
  int patrol_lo = 0, patrol_hi = 0, patrol_dir = 1;

  bool is_agent() const { return kind == EntityKind::leader || kind == EntityKind::follower; }
};

struct WorldState {
  int t = 0;
  int agent_count = 0;
  int leader_count = 0;
  int targets_total = 0;
  int targets_remaining = 0;
  std::vector<EntityState> entities;  // agents first (leaders first), then targets, hazards
  Grouping teams;                     // current team assignment, set by the controller

  int entity_count() const { return int(entities.size()); }
};

inline int chebyshev(const EntityState& a, const EntityState& b) {
  return std::max(std::abs(a.x - b.x), std::abs(a.y - b.y));
}

inline int manhattan(const EntityState& a, const EntityState& b) {
  return std::abs(a.x - b.x) + std::abs(a.y - b.y);
}

// Radius test per agent-entity pair; the diagonal is always on and dead
// entities are invisible to everyone (beyond the forced diagonal).
inline BinaryMatrix observation_mask(const WorldState& s, int radius) {
  const int A = s.agent_count, E = s.entity_count();
  BinaryMatrix m(A, E);
  for (int a = 0; a < A; ++a) {
    if (s.entities[a].alive) {
      for (int e = 0; e < E; ++e)
        if (s.entities[e].alive && chebyshev(s.entities[a], s.entities[e]) <= radius)
          m(a, e) = 1;
    }
    m(a, a) = 1;
  }
  return m;
}

template <class Real>
class World {
 public:
  explicit World(WorldConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  struct Observation {
    EntityMatrix<Real> entities;
    BinaryMatrix mask;
  };

  struct StepResult {
    EntityMatrix<Real> entities;
    BinaryMatrix mask;
    double reward = 0;
    bool terminal = false;
    std::vector<uint8_t> alive;
  };

  Observation reset(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> count(cfg_.agents_min, cfg_.agents_max);
    return reset(rng, count(rng));
  }

  Observation reset(std::mt19937_64& rng, int agent_count) {
    if (agent_count < cfg_.leader_count + 1)
      throw std::invalid_argument("World::reset: too few agents for the leader count");
    st_ = WorldState{};
    st_.agent_count = agent_count;
    st_.leader_count = cfg_.leader_count;
    st_.targets_total = st_.targets_remaining = cfg_.target_count;

    const int E = agent_count + cfg_.target_count + cfg_.hazard_count;
    if (E > cfg_.grid_side * cfg_.grid_side)
      throw std::invalid_argument("World::reset: grid too small to place all entities");
    std::vector<int> cells(cfg_.grid_side * cfg_.grid_side);
    std::iota(cells.begin(), cells.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng);

    st_.entities.resize(E);
    for (int e = 0; e < E; ++e) {
      EntityState& ent = st_.entities[e];
      ent.x = cells[e] % cfg_.grid_side;
      ent.y = cells[e] / cfg_.grid_side;
      ent.alive = true;
      if (e < st_.leader_count)
        ent.kind = EntityKind::leader;
      else if (e < agent_count)
        ent.kind = EntityKind::follower;
      else if (e < agent_count + cfg_.target_count)
        ent.kind = EntityKind::target;
      else {
        ent.kind = EntityKind::hazard;
        ent.patrol_lo = std::max(0, ent.x - 2);
        ent.patrol_hi = std::min(cfg_.grid_side - 1, ent.x + 2);
        ent.patrol_dir = (rng() & 1) ? 1 : -1;
      }
    }
    st_.teams = Grouping{};
    return Observation{entity_matrix(), observation_mask(st_, cfg_.obs_radius)};
  }

  // Deterministic transition: agent moves with lower-index-wins collision
  // resolution, hazards advance one patrol step and eliminate co-located
  // agents, then captures and the terminal condition are evaluated.
  StepResult step(const std::vector<int>& joint_action) {
    if (int(joint_action.size()) != st_.agent_count)
      throw std::invalid_argument("World::step: one action per agent required");
    const int A = st_.agent_count;

    for (int a = 0; a < A; ++a) {
      if (!st_.entities[a].alive) continue;  // actions for dead agents are ignored
      int act = joint_action[a];
      if (act < 0 || act >= WorldConfig::action_count)
        throw std::invalid_argument("World::step: action out of range for agent " +
                                    std::to_string(a));
      int nx = st_.entities[a].x, ny = st_.entities[a].y;
      switch (Action(act)) {
        case Action::up: ny -= 1; break;
        case Action::down: ny += 1; break;
        case Action::left: nx -= 1; break;
        case Action::right: nx += 1; break;
        default: break;
      }
      nx = std::clamp(nx, 0, cfg_.grid_side - 1);
      ny = std::clamp(ny, 0, cfg_.grid_side - 1);
      if (nx == st_.entities[a].x && ny == st_.entities[a].y) continue;
      bool blocked = false;
      for (int b = 0; b < A && !blocked; ++b)
        if (b != a && st_.entities[b].alive && st_.entities[b].x == nx &&
            st_.entities[b].y == ny)
          blocked = true;
      if (!blocked) {
        st_.entities[a].x = nx;
        st_.entities[a].y = ny;
      }
    }

    for (auto& ent : st_.entities) {
      if (ent.kind != EntityKind::hazard) continue;
      if (ent.patrol_hi > ent.patrol_lo) {
        int nx = ent.x + ent.patrol_dir;
        if (nx > ent.patrol_hi || nx < ent.patrol_lo) {
          ent.patrol_dir = -ent.patrol_dir;
          nx = ent.x + ent.patrol_dir;
        }
        ent.x = nx;
      }
    }

    for (int a = 0; a < A; ++a) {
      if (!st_.entities[a].alive) continue;
      for (const auto& ent : st_.entities)
        if (ent.kind == EntityKind::hazard && ent.x == st_.entities[a].x &&
            ent.y == st_.entities[a].y) {
          st_.entities[a].alive = false;
          break;
        }
    }

    double reward = 0;
    for (int e = A; e < st_.entity_count(); ++e) {
      EntityState& tgt = st_.entities[e];
      if (tgt.kind != EntityKind::target || !tgt.alive) continue;
      bool captured = false;
      for (auto& [l, fs] : st_.teams.teams) {
        if (captured) break;
        if (!st_.entities[l].alive || Action(joint_action[l]) != Action::interact) continue;
        if (manhattan(st_.entities[l], tgt) != 1) continue;
        for (int f : fs) {
          if (st_.entities[f].alive && Action(joint_action[f]) == Action::interact &&
              manhattan(st_.entities[f], tgt) == 1) {
            captured = true;
            break;
          }
        }
      }
      if (captured) {
        tgt.alive = false;
        st_.targets_remaining -= 1;
        reward += cfg_.rewards.capture;
      }
    }

    reward += cfg_.rewards.step_penalty;
    st_.t += 1;
    // The episode runs to the time cap even with every agent eliminated;
    // ending early would turn dying into a way to dodge the step penalty.
    bool terminal = false;
    if (st_.targets_remaining == 0) {
      reward += cfg_.rewards.completion;
      terminal = true;
    } else if (st_.t >= cfg_.episode_limit) {
      terminal = true;
    }

    StepResult out;
    out.entities = entity_matrix();
    out.mask = observation_mask(st_, cfg_.obs_radius);
    out.reward = reward;
    out.terminal = terminal;
    out.alive = alive_flags();
    return out;
  }

  // Fixed-width per-entity features; dead entities are all-zero rows.
  EntityMatrix<Real> entity_matrix() const {
    const int E = st_.entity_count();
    EntityMatrix<Real> out;
    out.features = Tensor<Real>::zeros({E, WorldConfig::feature_dim});
    out.roles.resize(E);
    out.agent_count = st_.agent_count;
    out.entity_count = E;
    const double denom = double(cfg_.grid_side - 1);
    for (int e = 0; e < E; ++e) {
      const EntityState& ent = st_.entities[e];
      out.roles[e] = ent.kind == EntityKind::leader
                         ? Role::leader
                         : (ent.kind == EntityKind::follower ? Role::follower
                                                             : Role::non_agent);
      if (!ent.alive) continue;
      out.features.at(e, 0) = Real(ent.x / denom);
      out.features.at(e, 1) = Real(ent.y / denom);
      out.features.at(e, 2) = Real(ent.is_agent() ? 1 : 0);
      out.features.at(e, 3) = Real(ent.kind == EntityKind::target ? 1 : 0);
      out.features.at(e, 4) = Real(ent.kind == EntityKind::hazard ? 1 : 0);
      out.features.at(e, 5) = Real(1);  // active
      out.features.at(e, 6) = Real(ent.is_agent() ? 1 : 0);  // health
      out.features.at(e, 7) = Real(st_.targets_total > 0
                                       ? double(st_.targets_remaining) / st_.targets_total
                                       : 0.0);
      out.features.at(e, 8) = Real(double(st_.t) / cfg_.episode_limit);
      out.features.at(e, 9) = Real(1);
    }
    return out;
  }

  BinaryMatrix current_mask() const { return observation_mask(st_, cfg_.obs_radius); }

  std::vector<uint8_t> alive_flags() const {
    std::vector<uint8_t> out(st_.agent_count);
    for (int a = 0; a < st_.agent_count; ++a) out[a] = st_.entities[a].alive ? 1 : 0;
    return out;
  }

  bool any_agent_alive() const {
    for (int a = 0; a < st_.agent_count; ++a)
      if (st_.entities[a].alive) return true;
    return false;
  }

  void set_grouping(Grouping g) { st_.teams = std::move(g); }

  WorldState& state() { return st_; }
  const WorldState& state() const { return st_; }
  const WorldConfig& config() const { return cfg_; }

 private:
  WorldConfig cfg_;
  WorldState st_;
};

// --- episode trace log -------------------------------------------------------

inline uint64_t state_digest(const WorldState& s) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  mix(uint64_t(s.t));
  for (const auto& e : s.entities) {
    mix(uint64_t(e.x) << 32 | uint64_t(uint32_t(e.y)));
    mix(e.alive ? 0x9e3779b9ull : 0x7f4a7c15ull);
  }
  return h;
}

inline const char* kind_name(EntityKind k) {
  switch (k) {
    case EntityKind::leader: return "leader";
    case EntityKind::follower: return "follower";
    case EntityKind::target: return "target";
    default: return "hazard";
  }
}

// Line-delimited structured episode log: one record per step.
class TraceWriter {
 public:
  explicit TraceWriter(const std::string& path) : os_(path) {
    if (!os_) throw std::runtime_error("TraceWriter: cannot open '" + path + "'");
  }

  void write_step(const WorldState& s, const std::vector<int>& actions, double reward,
                  bool terminal) {
    nlohmann::json entities = nlohmann::json::array();
    for (const auto& e : s.entities)
      entities.push_back({{"kind", kind_name(e.kind)},
                          {"x", e.x},
                          {"y", e.y},
                          {"alive", e.alive ? 1 : 0}});
    char digest[20];
    std::snprintf(digest, sizeof(digest), "%016llx",
                  static_cast<unsigned long long>(state_digest(s)));
    nlohmann::json rec{{"t", s.t},           {"reward", reward},
                       {"terminal", terminal}, {"actions", actions},
                       {"digest", digest},   {"grouping", grouping_to_json(s.teams)},
                       {"entities", entities}};
    os_ << rec.dump() << "\n";
  }

 private:
  std::ofstream os_;
};

// --- flat key-value scenario files -------------------------------------------

inline std::map<std::string, std::string> parse_key_value_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto notspace = [](unsigned char c) { return !std::isspace(c); };
    line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: expected key = value at line " +
                               std::to_string(lineno));
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
    value.erase(value.begin(), std::find_if(value.begin(), value.end(), notspace));
    if (key.empty() || value.empty())
      throw std::runtime_error("config: empty key or value at line " + std::to_string(lineno));
    out[key] = value;
  }
  return out;
}

namespace detail {

inline bool take_int(std::map<std::string, std::string>& kv, const std::string& key, int& out) {
  auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = std::stoi(it->second);
  kv.erase(it);
  return true;
}

inline bool take_double(std::map<std::string, std::string>& kv, const std::string& key,
                        double& out) {
  auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = std::stod(it->second);
  kv.erase(it);
  return true;
}

inline bool take_string(std::map<std::string, std::string>& kv, const std::string& key,
                        std::string& out) {
  auto it = kv.find(key);
  if (it == kv.end()) return false;
  out = it->second;
  kv.erase(it);
  return true;
}

}  // namespace detail

// Consumes the world-level keys from a parsed config map.
inline void apply_world_config(std::map<std::string, std::string>& kv, WorldConfig& cfg) {
  detail::take_int(kv, "grid_side", cfg.grid_side);
  detail::take_int(kv, "agents_min", cfg.agents_min);
  detail::take_int(kv, "agents_max", cfg.agents_max);
  detail::take_int(kv, "leaders", cfg.leader_count);
  detail::take_int(kv, "targets", cfg.target_count);
  detail::take_int(kv, "hazards", cfg.hazard_count);
  detail::take_int(kv, "episode_limit", cfg.episode_limit);
  detail::take_int(kv, "obs_radius", cfg.obs_radius);
  detail::take_double(kv, "step_penalty", cfg.rewards.step_penalty);
  detail::take_double(kv, "capture_reward", cfg.rewards.capture);
  detail::take_double(kv, "completion_bonus", cfg.rewards.completion);
}

}  // namespace teamform
