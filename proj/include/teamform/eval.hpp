#pragma once

// Generalization evaluation: greedy rollouts of a trained checkpoint over the
// composition grid (6-8 agents, 2-4 leaders where feasible), aggregated per
// cell over seeds, with stability accounting for the deployed matching.

#include <future>
#include <iomanip>

#include "teamform/training.hpp"

namespace teamform {

struct EvalComposition {
  int agent_count = 6;
  int leader_count = 2;
  int episodes = 200;
  std::string checkpoint;
  std::string algo = "oom";

  // Cells follow the evaluation-table shape: 6 and 7 agents take 2 or 3
  // leaders, 8 agents take 2, 3, or 4.
  void validate() const {
    if (agent_count < 6 || agent_count > 8)
      throw std::invalid_argument("EvalComposition: agent count must lie in 6..8");
    if (leader_count > agent_count - leader_count)
      throw std::invalid_argument("EvalComposition: leaders must not outnumber followers");
    const int max_leaders = agent_count == 8 ? 4 : 3;
    if (leader_count < 2 || leader_count > max_leaders)
      throw std::invalid_argument("EvalComposition: leader count outside the table shape");
    if (episodes < 1) throw std::invalid_argument("EvalComposition: episodes must be positive");
    if (algo != "oom" && algo != "som")
      throw std::invalid_argument("EvalComposition: algo must be oom or som");
  }
};

inline std::vector<std::pair<int, int>> standard_grid() {
  return {{6, 2}, {6, 3}, {7, 2}, {7, 3}, {8, 2}, {8, 3}, {8, 4}};
}

struct EvalCellReport {
  std::string algo;
  int leaders = 0;
  std::string agents;  // "6".."8", or "3-5" for the training-range row
  double mean_return = 0;
  double std_return = 0;  // over seed means
  double capture_rate = 0;
  double blocking_pair_rate = 0;
  double groupings_per_episode = 0;
  int seeds = 0;
  int episodes_per_seed = 0;
};

struct EvalReport {
  std::vector<EvalCellReport> rows;
};

constexpr const char* kEvalCsvHeader =
    "algo,leaders,agents,mean_return,std_return,capture_rate,blocking_pair_rate";

inline std::string eval_report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << kEvalCsvHeader << "\n";
  for (const auto& r : report.rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%.9g,%.9g,%.9g,%.9g", r.algo.c_str(),
                  r.leaders, r.agents.c_str(), r.mean_return, r.std_return, r.capture_rate,
                  r.blocking_pair_rate);
    os << buf << "\n";
  }
  return os.str();
}

inline nlohmann::json eval_report_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"algo", r.algo},
                    {"leaders", r.leaders},
                    {"agents", r.agents},
                    {"mean_return", r.mean_return},
                    {"std_return", r.std_return},
                    {"capture_rate", r.capture_rate},
                    {"blocking_pair_rate", r.blocking_pair_rate},
                    {"groupings_per_episode", r.groupings_per_episode},
                    {"seeds", r.seeds},
                    {"episodes_per_seed", r.episodes_per_seed}});
  return {{"rows", rows}};
}

namespace detail {

inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t x = base + 0x9e3779b97f4a7c15ull * (a + 1) + 0xbf58476d1ce4e5b9ull * (b + 1) +
               0x94d049bb133111ebull * (c + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

// One evaluation cell: `episodes` greedy episodes per seed. agents_lo ==
// agents_hi pins the population; a range reproduces the training protocol.
template <class Real>
EvalCellReport eval_cell(const Networks<Real>& nets, const WorldConfig& base, int agents_lo,
                         int agents_hi, int leaders, const std::string& algo, int episodes,
                         int seeds, uint64_t base_seed) {
  WorldConfig wcfg = base;
  wcfg.agents_min = agents_lo;
  wcfg.agents_max = agents_hi;
  wcfg.leader_count = leaders;
  wcfg.validate();

  EvalCellReport report;
  report.algo = algo;
  report.leaders = leaders;
  report.agents = agents_lo == agents_hi
                      ? std::to_string(agents_lo)
                      : std::to_string(agents_lo) + "-" + std::to_string(agents_hi);
  report.seeds = seeds;
  report.episodes_per_seed = episodes;

  std::vector<double> seed_means(seeds, 0.0);
  long captures = 0, matchings = 0, matchings_with_blocking = 0;
  for (int s = 0; s < seeds; ++s) {
    World<Real> world(wcfg);
    std::mt19937_64 rng(detail::mix_seed(base_seed, uint64_t(agents_hi),
                                         uint64_t(leaders), uint64_t(s)));
    double total = 0;
    for (int e = 0; e < episodes; ++e) {
      auto score = greedy_episode(world, nets, algo, rng);
      total += score.episode_return;
      captures += score.all_captured ? 1 : 0;
      matchings += score.matchings;
      matchings_with_blocking += score.matchings_with_blocking;
    }
    seed_means[s] = total / episodes;
  }

  double mean = 0;
  for (double m : seed_means) mean += m;
  mean /= seeds;
  double var = 0;
  for (double m : seed_means) var += (m - mean) * (m - mean);
  report.mean_return = mean;
  report.std_return = seeds > 1 ? std::sqrt(var / (seeds - 1)) : 0.0;
  report.capture_rate = double(captures) / (double(episodes) * seeds);
  report.blocking_pair_rate =
      matchings > 0 ? double(matchings_with_blocking) / double(matchings) : 0.0;
  report.groupings_per_episode = double(matchings) / (double(episodes) * seeds);
  return report;
}

// Full composition grid (plus the training-range row when requested). Cells
// are independent and run in parallel into fixed slots, so the report order
// and content are seed-deterministic.
template <class Real>
EvalReport run_eval(const Networks<Real>& nets, const WorldConfig& base,
                    const std::string& algo, int episodes, int seeds, uint64_t base_seed,
                    bool include_training_row = true,
                    const std::vector<std::pair<int, int>>& cells = standard_grid()) {
  struct Task {
    int agents_lo, agents_hi, leaders;
  };
  std::vector<Task> tasks;
  if (include_training_row) tasks.push_back({base.agents_min, base.agents_max, 2});
  for (auto& [agents, leaders] : cells) tasks.push_back({agents, agents, leaders});

  std::vector<std::future<EvalCellReport>> futures;
  futures.reserve(tasks.size());
  for (const Task& t : tasks)
    futures.push_back(std::async(std::launch::async, [&, t] {
      return eval_cell(nets, base, t.agents_lo, t.agents_hi, t.leaders, algo, episodes,
                       seeds, base_seed);
    }));

  EvalReport report;
  for (auto& f : futures) report.rows.push_back(f.get());
  return report;
}

// Plain-text table: one row per (algorithm, leader count), columns for the
// training range and each evaluation population; infeasible cells render "-".
inline std::string composition_table(const std::vector<EvalCellReport>& rows) {
  std::vector<std::string> agent_cols{"3-5", "6", "7", "8"};
  std::vector<std::pair<std::string, int>> row_keys;
  for (const auto& r : rows) {
    std::pair<std::string, int> key{r.algo, r.leaders};
    if (std::find(row_keys.begin(), row_keys.end(), key) == row_keys.end())
      row_keys.push_back(key);
  }
  std::sort(row_keys.begin(), row_keys.end());

  std::ostringstream os;
  os << std::left << std::setw(10) << "algorithm" << std::setw(9) << "leaders";
  os << std::setw(20) << "train(3-5)";
  for (size_t c = 1; c < agent_cols.size(); ++c) os << std::setw(20) << agent_cols[c];
  os << "blocking_rate\n";

  for (auto& [algo, leaders] : row_keys) {
    os << std::left << std::setw(10) << algo << std::setw(9) << leaders;
    double blocking = 0;
    bool blocking_seen = false;
    for (const auto& col : agent_cols) {
      const EvalCellReport* cell = nullptr;
      for (const auto& r : rows)
        if (r.algo == algo && r.leaders == leaders && r.agents == col) cell = &r;
      if (!cell) {
        os << std::setw(20) << "-";
      } else {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f +/- %.3f", cell->mean_return,
                      cell->std_return);
        os << std::setw(20) << buf;
        blocking = std::max(blocking, cell->blocking_pair_rate);
        blocking_seen = true;
      }
    }
    if (blocking_seen) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f", blocking);
      os << buf;
    } else {
      os << "-";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace teamform
