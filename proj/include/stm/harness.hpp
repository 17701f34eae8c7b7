#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"
#include "stm/trainer.hpp"

#include <cstdint>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stm {

/// Everything that defines an experiment. Loaded from a flat `key = value`
/// file and/or command-line overrides; see config_schema() for the keys.
struct RunConfig {
  std::string env = "gridworld5";  // preset name or "file"
  std::string env_file;
  int chain_length = 10;
  double gamma = 0.99;
  int horizon = kDefaultHorizonCap;

  std::string algorithm = "ppo";       // reinforce | ppo
  std::string policy = "softtreemax";  // softmax | softtreemax
  int depth = 2;
  int width = 1024;  // 0 disables pruning
  double beta = 1.0;
  std::string head_mode = "per_action";
  std::string hidden = "64,64";

  int workers = 1;
  int steps_per_rollout = 128;
  std::uint64_t total_steps = 100'000;
  double wall_clock_budget_s = 0.0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output = "runs";
  int flush_interval = 1;

  std::string optimizer = "adam";
  double lr = 3e-4;
  int epochs = 10;
  int minibatches = 4;
  double clip = 0.2;
  double ent_coef = 0.01;
  double vf_coef = 0.5;
  double gae_lambda = 0.95;
  double max_grad_norm = 0.5;

  int return_window = 20;
  std::optional<double> target_return;
  bool deterministic_clock = false;
  std::string depths = "0,1,2,3";  // sweep only
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_schema();

// Applies one key; throws ConfigError for unknown keys or bad values.
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value);
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config_file(const std::string& path, RunConfig base = {});
std::map<std::string, std::string> config_to_map(const RunConfig& config);

// Cross-field checks against the environment it will run on.
void validate_config(const RunConfig& config, const MdpSpec& mdp);

MdpSpec make_environment(const RunConfig& config);
TrainConfig make_train_config(const RunConfig& config, std::uint64_t seed);
std::vector<int> parse_int_list(const std::string& text);

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{"wall_clock_s", "env_steps", "model_steps", "update_idx",
                                             "mean_episode_return", "grad_variance", "depth", "beta", "seed"};
  return cols;
}

/// Append-only CSV writer with a fixed column order. The header is written
/// when the file is created; rows are always written whole and flushed
/// every `flush_interval` rows.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, int flush_interval);
  void write(const UpdateRecord& record);
  void flush();

 private:
  std::string path_;
  std::ofstream out_;
  int flush_interval_;
  int pending_ = 0;
};

std::string format_metrics_row(const UpdateRecord& record);
std::vector<UpdateRecord> read_metrics(const std::string& path);

struct SeedSummary {
  std::uint64_t seed = 0;
  std::string directory;
  double final_mean_return = 0.0;
  double mean_grad_variance = 0.0;
  std::uint64_t env_steps = 0;
  bool reached_target = false;
};

std::string version_string();

/// One training run per seed under <output>/seed_<seed>/ (metrics.csv,
/// manifest.json, policy.bin, critic.bin).
std::vector<SeedSummary> run_train(const RunConfig& config);

struct SweepRow {
  int depth = 0;
  double final_mean_return = 0.0;
  double mean_grad_variance = 0.0;
  int completed_seeds = 0;
  std::vector<SeedSummary> seeds;
};

/// run_train for every depth under <output>/depth_<d>/ plus summary.csv.
/// A failing cell is reported and the remaining cells still run; the first
/// failure is rethrown at the end.
std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<int>& depths);

/// Prints the expansion table at `state` and the resulting root distribution.
void run_expand_debug(const RunConfig& config, const MdpSpec& mdp, const ThetaParams& theta, State state,
                      std::ostream& out);

struct EvalResult {
  double greedy_return = 0.0;
  double optimal_value = 0.0;
  int episodes = 0;
};

/// Mean discounted return of the greedy tree policy against V*(start).
EvalResult run_eval(const RunConfig& config, const MdpSpec& mdp, const ThetaParams& theta, int episodes,
                    std::uint64_t seed);

}  // namespace stm
