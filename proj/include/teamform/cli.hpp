#pragma once

// Command-line front door: train, eval, match, check, replay, describe.

#include "CLI11.hpp"
#include "teamform/checks.hpp"

namespace teamform {

namespace cli_detail {

inline PreferenceMatrix read_preference_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("match: cannot open '" + path + "'");
  nlohmann::json j;
  is >> j;
  return preference_from_json(j);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << text;
}

inline int run_train(const TrainConfig& cfg, std::ostream& out) {
  auto summarize = [&](const auto& result) {
    out << "trained " << cfg.total_steps << " env steps (" << cfg.algo << ", seed "
        << cfg.seed << ", " << cfg.precision << ")\n";
    out << "metrics: " << result.metrics_path << "\n";
    out << "checkpoint: " << result.final_checkpoint << "\n";
    if (!result.metrics.empty())
      out << "final greedy mean return: " << result.metrics.back().mean_return << "\n";
  };
  if (cfg.precision == "float64")
    summarize(train<double>(cfg));
  else
    summarize(train<float>(cfg));
  return 0;
}

template <class Real>
EvalReport eval_with_checkpoint(const std::string& ckpt, const NetConfig& net,
                                const WorldConfig& world, const std::string& algo,
                                int episodes, int seeds, uint64_t seed,
                                const std::vector<std::pair<int, int>>& cells) {
  ParameterStore<Real> store;
  std::mt19937_64 rng(0);
  auto nets = init_networks(store, net, rng);
  load_checkpoint(ckpt, store);
  nets = bind_networks(store, net);
  return run_eval(nets, world, algo, episodes, seeds, seed, true, cells);
}

inline std::string render_frames(const std::string& trace_path, int grid_side) {
  std::ifstream is(trace_path);
  if (!is) throw std::runtime_error("replay: cannot open '" + trace_path + "'");
  std::ostringstream out;
  std::string line;
  int records = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line);
    ++records;
    std::vector<std::string> grid(grid_side, std::string(grid_side, '.'));
    int idx = 0;
    for (const auto& e : rec.at("entities")) {
      int x = e.at("x").get<int>(), y = e.at("y").get<int>();
      bool alive = e.at("alive").get<int>() != 0;
      std::string kind = e.at("kind").get<std::string>();
      char c = kind == "leader" ? 'L' : (kind == "follower" ? 'F' : (kind == "target" ? 'T' : 'H'));
      if (!alive) c = char(std::tolower(c));
      if (y >= 0 && y < grid_side && x >= 0 && x < grid_side) grid[y][x] = c;
      ++idx;
    }
    out << "t=" << rec.at("t").get<int>() << " reward=" << rec.at("reward").get<double>()
        << (rec.at("terminal").get<bool>() ? " terminal" : "") << " digest="
        << rec.at("digest").get<std::string>() << "\n";
    out << "teams:";
    for (const auto& team : rec.at("grouping").at("teams")) {
      out << " " << team.at("leader").get<int>() << "<-[";
      bool first = true;
      for (const auto& f : team.at("followers")) {
        out << (first ? "" : ",") << f.get<int>();
        first = false;
      }
      out << "]";
    }
    out << "\n";
    for (const auto& row : grid) out << row << "\n";
    out << "\n";
  }
  if (records == 0) throw std::runtime_error("replay: no records in '" + trace_path + "'");
  return out.str();
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"bilateral team formation for cooperative multi-agent control"};
  app.require_subcommand(1);

  // --- train ---
  auto* train_cmd = app.add_subcommand("train", "off-policy training run");
  std::string train_config, train_algo, train_out, train_precision;
  int64_t train_seed = -1, train_steps = -1;
  train_cmd->add_option("--config", train_config, "key=value scenario/training file");
  train_cmd->add_option("--algo,--algorithm", train_algo, "matching algorithm: oom|som");
  train_cmd->add_option("--seed", train_seed, "run seed");
  train_cmd->add_option("--steps", train_steps, "total environment steps");
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--precision", train_precision, "float32|float64");

  // --- eval ---
  auto* eval_cmd = app.add_subcommand("eval", "composition-grid evaluation of a checkpoint");
  std::string eval_ckpt, eval_algo = "oom", eval_out = "eval_out", eval_config;
  int eval_episodes = 200, eval_seeds = 5, eval_agents = 0, eval_leaders = 0;
  int64_t eval_seed = 0;
  std::string eval_precision = "float32";
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--algo,--algorithm", eval_algo, "matching algorithm: oom|som");
  eval_cmd->add_option("--episodes", eval_episodes, "episodes per cell per seed");
  eval_cmd->add_option("--seeds", eval_seeds, "seeds per cell");
  eval_cmd->add_option("--seed", eval_seed, "base seed");
  eval_cmd->add_option("--agents", eval_agents, "restrict to one composition: agent count");
  eval_cmd->add_option("--leaders", eval_leaders, "restrict to one composition: leader count");
  eval_cmd->add_option("--config", eval_config, "scenario file for world parameters");
  eval_cmd->add_option("--out", eval_out, "output directory");
  eval_cmd->add_option("--precision", eval_precision, "float32|float64");

  // --- match ---
  auto* match_cmd = app.add_subcommand("match", "offline matching on a preference record");
  std::string match_input, match_algo = "oom", match_out;
  int match_leaders = 0;
  bool match_certify = false;
  match_cmd->add_option("--input", match_input, "preference record (json)")->required();
  match_cmd->add_option("--algorithm,--algo", match_algo, "oom|som");
  match_cmd->add_option("--leaders", match_leaders, "override the record's leader count");
  match_cmd->add_flag("--certify", match_certify, "append the blocking-pair list");
  match_cmd->add_option("--out", match_out, "write the grouping record here (default stdout)");

  // --- check ---
  auto* check_cmd = app.add_subcommand("check", "run the property self-checks");
  bool check_quick = false;
  check_cmd->add_flag("--quick", check_quick, "reduced sweep sizes");

  // --- replay ---
  auto* replay_cmd = app.add_subcommand("replay", "render an episode trace as text frames");
  std::string replay_trace, replay_out;
  int replay_grid = 8;
  replay_cmd->add_option("--trace", replay_trace, "episode trace (jsonl)")->required();
  replay_cmd->add_option("--grid", replay_grid, "grid side length for rendering");
  replay_cmd->add_option("--out", replay_out, "write frames here (default stdout)");

  // --- describe ---
  auto* describe_cmd = app.add_subcommand("describe", "list parameter names, shapes, counts");
  std::string describe_ckpt;
  describe_cmd->add_option("--ckpt", describe_ckpt, "checkpoint to describe (default: fresh)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help exits clean; usage errors exit 2
  }

  try {
    if (*train_cmd) {
      TrainConfig cfg;
      if (!train_config.empty()) cfg = load_train_config(train_config);
      if (!train_algo.empty()) cfg.algo = train_algo;
      if (train_seed >= 0) cfg.seed = uint64_t(train_seed);
      if (train_steps > 0) cfg.total_steps = train_steps;
      if (!train_out.empty()) cfg.out_dir = train_out;
      if (!train_precision.empty()) cfg.precision = train_precision;
      cfg.validate();
      return cli_detail::run_train(cfg, std::cout);
    }

    if (*eval_cmd) {
      TrainConfig base;
      if (!eval_config.empty()) base = load_train_config(eval_config);
      if (eval_algo != "oom" && eval_algo != "som")
        throw std::runtime_error("eval: algo must be oom or som");
      if (eval_precision != "float32" && eval_precision != "float64")
        throw std::runtime_error("eval: precision must be float32 or float64");
      std::vector<std::pair<int, int>> cells = standard_grid();
      if (eval_agents > 0 || eval_leaders > 0) {
        EvalComposition single;
        single.agent_count = eval_agents;
        single.leader_count = eval_leaders;
        single.episodes = eval_episodes;
        single.algo = eval_algo;
        single.checkpoint = eval_ckpt;
        single.validate();
        cells = {{eval_agents, eval_leaders}};
      }
      EvalReport report =
          eval_precision == "float64"
              ? cli_detail::eval_with_checkpoint<double>(eval_ckpt, base.net, base.world,
                                                         eval_algo, eval_episodes, eval_seeds,
                                                         uint64_t(eval_seed), cells)
              : cli_detail::eval_with_checkpoint<float>(eval_ckpt, base.net, base.world,
                                                        eval_algo, eval_episodes, eval_seeds,
                                                        uint64_t(eval_seed), cells);
      std::filesystem::create_directories(eval_out);
      cli_detail::write_text(eval_out + "/eval.csv", eval_report_csv(report));
      cli_detail::write_text(eval_out + "/eval_summary.json",
                             eval_report_json(report).dump(2) + "\n");
      auto table = composition_table(report.rows);
      cli_detail::write_text(eval_out + "/composition_table.txt", table);
      std::cout << table;
      std::cout << "wrote " << eval_out << "/eval.csv\n";
      return 0;
    }

    if (*match_cmd) {
      if (match_algo != "oom" && match_algo != "som")
        throw std::runtime_error("match: algorithm must be oom or som");
      auto prefs = cli_detail::read_preference_file(match_input);
      if (match_leaders > 0) prefs.leaders = match_leaders;
      prefs.validate();
      auto plan = balance_capacities(prefs.leaders, prefs.followers());
      Grouping g = match_algo == "som" ? som_match(prefs, plan) : oom_match(prefs, plan);
      nlohmann::json out = grouping_to_json(g);
      out["algorithm"] = match_algo;
      if (match_certify) {
        nlohmann::json blocking = nlohmann::json::array();
        for (auto& [l, f] : find_blocking_pairs(g, prefs, plan))
          blocking.push_back({l, f});
        out["blocking_pairs"] = blocking;
      }
      if (match_out.empty())
        std::cout << out.dump(2) << "\n";
      else
        cli_detail::write_text(match_out, out.dump(2) + "\n");
      return 0;
    }

    if (*check_cmd) {
      auto results = run_all_checks(check_quick);
      int passed = 0;
      for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        passed += r.passed ? 1 : 0;
      }
      std::cout << passed << "/" << results.size() << " checks passed\n";
      return passed == int(results.size()) ? 0 : 1;
    }

    if (*replay_cmd) {
      auto frames = cli_detail::render_frames(replay_trace, replay_grid);
      if (replay_out.empty())
        std::cout << frames;
      else
        cli_detail::write_text(replay_out, frames);
      return 0;
    }

    if (*describe_cmd) {
      std::vector<CheckpointRecord> records;
      if (!describe_ckpt.empty()) {
        records = read_checkpoint(describe_ckpt);
      } else {
        ParameterStore<double> store;
        std::mt19937_64 rng(0);
        init_networks(store, NetConfig{}, rng);
        for (auto& [name, slot] : store.slots())
          records.push_back({name, slot.tensor.shape,
                             std::vector<double>(slot.tensor.data->begin(),
                                                 slot.tensor.data->end())});
      }
      size_t total = 0;
      for (const auto& rec : records) {
        std::cout << std::left << std::setw(24) << rec.name << " "
                  << detail::shape_str(rec.dims) << " " << rec.values.size() << "\n";
        total += rec.values.size();
      }
      std::cout << records.size() << " parameters, " << total << " scalars\n";
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace teamform
