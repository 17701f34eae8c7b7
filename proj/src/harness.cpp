#include "stm/harness.hpp"

#include "stm/errors.hpp"
#include "stm/oracle.hpp"
#include "stm/policy.hpp"
#include "stm/tree.hpp"

#include <json.hpp>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef STM_VERSION
#define STM_VERSION "unknown"
#endif

namespace stm {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  std::size_t used = 0;
  T out{};
  try {
    if constexpr (std::is_same_v<T, int>) out = std::stoi(v, &used);
    else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = std::stoull(v, &used);
    } else out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  }
  if (used != v.size()) throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean '" + value + "' for key '" + key + "'");
}

template <typename T>
ConfigKey number_key(std::string name, std::string help, T RunConfig::*field) {
  return ConfigKey{name, std::move(help),
                   [name, field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); },
                   [field](const RunConfig& c) {
                     if constexpr (std::is_same_v<T, double>) return fmt_double(c.*field);
                     else return std::to_string(c.*field);
                   }};
}

ConfigKey string_key(std::string name, std::string help, std::string RunConfig::*field,
                     std::vector<std::string> allowed = {}) {
  return ConfigKey{name, std::move(help),
                   [name, field, allowed](RunConfig& c, const std::string& v) {
                     const std::string t = trim(v);
                     if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), t) == allowed.end())
                       throw ConfigError("bad value '" + v + "' for key '" + name + "'");
                     c.*field = t;
                   },
                   [field](const RunConfig& c) { return c.*field; }};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out.flush()) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

double optimal_start_value(const MdpSpec& mdp) {
  const auto vt = oracle::value_iteration(mdp, 1e-10);
  return mdp.initial_distribution().dot(vt.values);
}

nlohmann::json manifest_json(const RunConfig& config, std::uint64_t seed, const MdpSpec& mdp,
                             const std::string& status) {
  nlohmann::json j;
  j["version"] = version_string();
  j["seed"] = seed;
  j["status"] = status;
  j["config"] = config_to_map(config);
  j["derived_seeds"] = {{"policy_init", derive_seed(seed, 1001)},
                        {"critic_init", derive_seed(seed, 1002)},
                        {"env_workers", derive_seed(seed, 2001)},
                        {"update_shuffle", derive_seed(seed, 3001)}};
  j["environment"] = {{"states", mdp.state_count()},
                      {"actions", mdp.action_count()},
                      {"gamma", mdp.discount()},
                      {"horizon_cap", mdp.horizon_cap()},
                      {"deterministic", is_deterministic(mdp)},
                      {"optimal_start_value", optimal_start_value(mdp)}};
  j["grad_variance_estimator"] =
      "mean over parameter coordinates of the unbiased across-sample variance of "
      "advantage-weighted log-probability gradients, full batch at collection parameters";
  j["episode_return"] = "discounted return, mean over the last return_window completed episodes";
  return j;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(string_key("env", "environment preset (chain, gridworld5, gridworld5_slip) or 'file'", &RunConfig::env,
                           {"chain", "gridworld5", "gridworld5_slip", "file"}));
    k.push_back(string_key("env_file", "grid layout file used when env = file", &RunConfig::env_file));
    k.push_back(number_key("chain_length", "number of states of the chain preset", &RunConfig::chain_length));
    k.push_back(number_key("gamma", "discount factor", &RunConfig::gamma));
    k.push_back(number_key("horizon", "episode truncation length", &RunConfig::horizon));
    k.push_back(string_key("algorithm", "reinforce | ppo", &RunConfig::algorithm, {"reinforce", "ppo"}));
    k.push_back(string_key("policy", "softmax | softtreemax", &RunConfig::policy, {"softmax", "softtreemax"}));
    k.push_back(number_key("depth", "tree depth d", &RunConfig::depth));
    k.push_back(number_key("width", "frontier width limit W (0 = exhaustive)", &RunConfig::width));
    k.push_back(number_key("beta", "inverse temperature", &RunConfig::beta));
    k.push_back(string_key("head_mode", "per_action | single_head", &RunConfig::head_mode,
                           {"per_action", "single_head"}));
    k.push_back(string_key("hidden", "comma-separated hidden layer sizes", &RunConfig::hidden));
    k.push_back(number_key("workers", "parallel environment copies N", &RunConfig::workers));
    k.push_back(number_key("steps_per_rollout", "steps per worker per update T", &RunConfig::steps_per_rollout));
    k.push_back(number_key("total_steps", "environment step budget per seed", &RunConfig::total_steps));
    k.push_back(number_key("wall_clock_budget_s", "wall-clock budget per seed (0 = none)",
                           &RunConfig::wall_clock_budget_s));
    k.push_back(ConfigKey{"seeds", "comma-separated seeds",
                          [](RunConfig& c, const std::string& v) {
                            c.seeds.clear();
                            std::stringstream ss(v);
                            std::string item;
                            while (std::getline(ss, item, ','))
                              if (!trim(item).empty()) c.seeds.push_back(parse_number<std::uint64_t>("seeds", item));
                          },
                          [](const RunConfig& c) {
                            std::string s;
                            for (std::size_t i = 0; i < c.seeds.size(); ++i)
                              s += (i ? "," : "") + std::to_string(c.seeds[i]);
                            return s;
                          }});
    k.push_back(string_key("output", "output directory", &RunConfig::output));
    k.push_back(number_key("flush_interval", "metrics rows between flushes", &RunConfig::flush_interval));
    k.push_back(string_key("optimizer", "adam | sgd", &RunConfig::optimizer, {"adam", "sgd"}));
    k.push_back(number_key("lr", "learning rate", &RunConfig::lr));
    k.push_back(number_key("epochs", "PPO epochs per update", &RunConfig::epochs));
    k.push_back(number_key("minibatches", "PPO minibatches per epoch", &RunConfig::minibatches));
    k.push_back(number_key("clip", "PPO clip range (inf disables)", &RunConfig::clip));
    k.push_back(number_key("ent_coef", "entropy bonus weight", &RunConfig::ent_coef));
    k.push_back(number_key("vf_coef", "value loss weight", &RunConfig::vf_coef));
    k.push_back(number_key("gae_lambda", "GAE lambda", &RunConfig::gae_lambda));
    k.push_back(number_key("max_grad_norm", "joint gradient norm cap (0 = none)", &RunConfig::max_grad_norm));
    k.push_back(number_key("return_window", "completed episodes in the return average", &RunConfig::return_window));
    k.push_back(ConfigKey{"target_return", "stop a seed once the windowed return reaches this (empty = never)",
                          [](RunConfig& c, const std::string& v) {
                            if (trim(v).empty()) c.target_return.reset();
                            else c.target_return = parse_number<double>("target_return", v);
                          },
                          [](const RunConfig& c) { return c.target_return ? fmt_double(*c.target_return) : ""; }});
    k.push_back(ConfigKey{"deterministic_clock", "write 0 in the wall_clock_s column",
                          [](RunConfig& c, const std::string& v) {
                            c.deterministic_clock = parse_bool("deterministic_clock", v);
                          },
                          [](const RunConfig& c) { return std::string(c.deterministic_clock ? "true" : "false"); }});
    k.push_back(string_key("depths", "comma-separated depths for sweep", &RunConfig::depths));
    return k;
  }();
  return keys;
}

void apply_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& k : config_schema()) {
    if (k.name == key) {
      k.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    apply_config_value(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), std::move(base));
}

std::map<std::string, std::string> config_to_map(const RunConfig& config) {
  std::map<std::string, std::string> out;
  for (const auto& k : config_schema()) out[k.name] = k.get(config);
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(parse_number<int>("list", item));
  return out;
}

MdpSpec make_environment(const RunConfig& config) {
  if (config.horizon <= 0) throw ConfigError("horizon must be positive");
  if (!(config.gamma > 0.0 && config.gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (config.env == "chain") {
    if (config.chain_length < 2) throw ConfigError("chain_length must be at least 2");
    return build_chain(config.chain_length, 1.0, config.gamma, config.horizon);
  }
  GridSpec grid;
  if (config.env == "file") {
    if (config.env_file.empty()) throw ConfigError("env = file requires env_file");
    try {
      grid = load_grid_file(config.env_file);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  } else if (config.env == "gridworld5" || config.env == "gridworld5_slip") {
    grid = gridworld5_layout();
    grid.slip = config.env == "gridworld5_slip" ? 0.2 : 0.0;
  } else {
    throw ConfigError("unknown environment '" + config.env + "'");
  }
  grid.discount = config.gamma;
  grid.horizon_cap = config.horizon;
  return build_gridworld(grid);
}

void validate_config(const RunConfig& c, const MdpSpec& mdp) {
  if (c.depth < 0) throw ConfigError("depth must be non-negative");
  if (c.width < 0) throw ConfigError("width must be non-negative");
  if (c.width > 0 && c.width < mdp.action_count())
    throw ConfigError("width " + std::to_string(c.width) + " is smaller than the action count " +
                      std::to_string(mdp.action_count()));
  if (c.workers < 1) throw ConfigError("workers must be at least 1");
  if (c.steps_per_rollout < 1) throw ConfigError("steps_per_rollout must be at least 1");
  if (c.wall_clock_budget_s < 0.0) throw ConfigError("wall_clock_budget_s must be non-negative");
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.flush_interval < 1) throw ConfigError("flush_interval must be at least 1");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (c.epochs < 0 || c.minibatches < 1) throw ConfigError("epochs must be >= 0 and minibatches >= 1");
  if (!(c.clip > 0.0)) throw ConfigError("clip must be positive");
  if (c.return_window < 1) throw ConfigError("return_window must be at least 1");
  if (c.output.empty()) throw ConfigError("output directory must be set");
  for (int h : parse_int_list(c.hidden))
    if (h <= 0) throw ConfigError("hidden sizes must be positive");
}

TrainConfig make_train_config(const RunConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.algorithm = c.algorithm == "reinforce" ? Algorithm::reinforce : Algorithm::ppo;
  t.policy.kind = c.policy == "softmax" ? PolicyMode::Kind::softmax : PolicyMode::Kind::softtreemax;
  t.policy.depth = c.depth;
  if (c.width > 0) t.policy.width = c.width;
  t.policy.beta = c.beta;
  t.ppo.clip = c.clip;
  t.ppo.epochs = c.epochs;
  t.ppo.minibatches = c.minibatches;
  t.ppo.lr = c.lr;
  t.ppo.ent_coef = c.ent_coef;
  t.ppo.vf_coef = c.vf_coef;
  t.ppo.gamma = c.gamma;
  t.ppo.lambda = c.gae_lambda;
  t.ppo.max_grad_norm = c.max_grad_norm;
  t.ppo.optimizer = c.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  t.hidden = parse_int_list(c.hidden);
  t.head_mode = c.head_mode == "single_head" ? HeadMode::single_head : HeadMode::per_action;
  t.workers = c.workers;
  t.steps_per_rollout = c.steps_per_rollout;
  t.total_env_steps = c.total_steps;
  t.wall_clock_budget_s = c.wall_clock_budget_s;
  t.seed = seed;
  t.return_window = c.return_window;
  t.target_return = c.target_return;
  t.deterministic_clock = c.deterministic_clock;
  return t;
}

std::string format_metrics_row(const UpdateRecord& r) {
  std::string row;
  row += fmt_double(r.wall_clock_s) + ",";
  row += std::to_string(r.env_steps) + ",";
  row += std::to_string(r.model_steps) + ",";
  row += std::to_string(r.update_idx) + ",";
  row += fmt_double(r.mean_episode_return) + ",";
  row += fmt_double(r.grad_variance) + ",";
  row += std::to_string(r.depth) + ",";
  row += fmt_double(r.beta) + ",";
  row += std::to_string(r.seed);
  return row;
}

MetricsWriter::MetricsWriter(const std::string& path, int flush_interval)
    : path_(path), flush_interval_(std::max(1, flush_interval)) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics file '" + path + "'");
  if (fresh) {
    const auto& cols = metrics_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out_ << (i ? "," : "") << cols[i];
    out_ << '\n';
    flush();
  }
}

void MetricsWriter::write(const UpdateRecord& record) {
  out_ << format_metrics_row(record) << '\n';
  if (++pending_ >= flush_interval_) flush();
}

void MetricsWriter::flush() {
  out_.flush();
  if (!out_) throw IoError("failed writing metrics file '" + path_ + "'");
  pending_ = 0;
}

std::vector<UpdateRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IoError("metrics file '" + path + "' has no header");
  std::vector<UpdateRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != metrics_columns().size()) throw IoError("malformed metrics row in '" + path + "'");
    UpdateRecord r;
    r.wall_clock_s = std::stod(f[0]);
    r.env_steps = std::stoull(f[1]);
    r.model_steps = std::stoull(f[2]);
    r.update_idx = std::stoi(f[3]);
    r.mean_episode_return = f[4] == "nan" ? std::nan("") : std::stod(f[4]);
    r.grad_variance = std::stod(f[5]);
    r.depth = std::stoi(f[6]);
    r.beta = std::stod(f[7]);
    r.seed = std::stoull(f[8]);
    out.push_back(r);
  }
  return out;
}

std::string version_string() { return std::string("softtreemax ") + STM_VERSION; }

std::vector<SeedSummary> run_train(const RunConfig& config) {
  const MdpSpec mdp = make_environment(config);
  validate_config(config, mdp);
  std::vector<SeedSummary> summaries;
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = fs::path(config.output) / ("seed_" + std::to_string(seed));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    const fs::path metrics_path = dir / "metrics.csv";
    fs::remove(metrics_path, ec);
    write_text_atomic(dir / "manifest.json", manifest_json(config, seed, mdp, "running").dump(2) + "\n");

    MetricsWriter writer(metrics_path.string(), config.flush_interval);
    TrainResult result;
    try {
      result = train(mdp, make_train_config(config, seed), [&](const UpdateRecord& r) {
        writer.write(r);
        return true;
      });
    } catch (const NumericError&) {
      writer.flush();
      write_text_atomic(dir / "manifest.json", manifest_json(config, seed, mdp, "numeric_failure").dump(2) + "\n");
      throw;
    }
    writer.flush();

    SeedSummary s;
    s.seed = seed;
    s.directory = dir.string();
    s.reached_target = result.reached_target;
    double var_sum = 0.0;
    for (const auto& r : result.records) var_sum += r.grad_variance;
    if (!result.records.empty()) {
      s.final_mean_return = result.records.back().mean_episode_return;
      s.mean_grad_variance = var_sum / static_cast<double>(result.records.size());
      s.env_steps = result.records.back().env_steps;
    } else {
      s.final_mean_return = std::nan("");
      s.mean_grad_variance = std::nan("");
    }
    save_params((dir / "policy.bin").string(), result.state.policy);
    save_params((dir / "critic.bin").string(), result.state.critic);
    auto manifest = manifest_json(config, seed, mdp, "completed");
    manifest["updates"] = result.records.size();
    manifest["env_steps"] = s.env_steps;
    manifest["reached_target"] = result.reached_target;
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    summaries.push_back(s);
  }
  return summaries;
}

std::vector<SweepRow> run_sweep(const RunConfig& config, const std::vector<int>& depths) {
  if (depths.empty()) throw ConfigError("sweep needs at least one depth");
  for (int d : depths)
    if (d < 0) throw ConfigError("sweep depths must be non-negative");
  std::vector<SweepRow> rows;
  std::exception_ptr first_failure;
  for (int d : depths) {
    RunConfig cell = config;
    cell.depth = d;
    cell.output = (fs::path(config.output) / ("depth_" + std::to_string(d))).string();
    SweepRow row;
    row.depth = d;
    try {
      row.seeds = run_train(cell);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      std::cerr << "sweep cell depth=" << d << " failed: " << e.what() << "\n";
      if (!first_failure) first_failure = std::current_exception();
    }
    row.completed_seeds = static_cast<int>(row.seeds.size());
    double ret = 0.0;
    double var = 0.0;
    for (const auto& s : row.seeds) {
      ret += s.final_mean_return;
      var += s.mean_grad_variance;
    }
    row.final_mean_return = row.seeds.empty() ? std::nan("") : ret / static_cast<double>(row.seeds.size());
    row.mean_grad_variance = row.seeds.empty() ? std::nan("") : var / static_cast<double>(row.seeds.size());
    rows.push_back(row);
  }

  std::string summary = "depth,final_mean_return,mean_grad_variance,completed_seeds\n";
  for (const auto& r : rows)
    summary += std::to_string(r.depth) + "," + fmt_double(r.final_mean_return) + "," +
               fmt_double(r.mean_grad_variance) + "," + std::to_string(r.completed_seeds) + "\n";
  std::error_code ec;
  fs::create_directories(config.output, ec);
  write_text_atomic(fs::path(config.output) / "summary.csv", summary);
  if (first_failure) std::rethrow_exception(first_failure);
  return rows;
}

void run_expand_debug(const RunConfig& config, const MdpSpec& mdp, const ThetaParams& theta, State state,
                      std::ostream& out) {
  mdp.check_state(state);
  validate_heads(theta, mdp.action_count());
  const DeterminizedModel model = DeterminizedModel::for_planning(mdp);
  PolicyMode mode = make_train_config(config, 0).policy;
  const ExpansionResult e = expand_for_policy(model, state, mode, theta, mdp.discount());
  const LeafValues values(mdp, theta, e);
  const PolicyDecision d = softtreemax_probs(e, values, mode.beta);
  const double scale = std::pow(e.gamma, e.depth);

  out << "# root " << state << " depth " << e.depth << " beta " << fmt_double(mode.beta) << " gamma "
      << fmt_double(e.gamma) << " width " << (e.width_limit ? std::to_string(*e.width_limit) : "none")
      << " leaves " << e.total_leaves() << " model_steps " << e.model_steps << "\n";
  out << "path\tstate\taction\treward\tscore\n";
  out << std::setprecision(12);
  for (const Leaf& leaf : e.leaves) {
    std::string path;
    for (std::size_t i = 0; i < leaf.action_path.size(); ++i) path += (i ? "-" : "") + std::to_string(leaf.action_path[i]);
    if (path.empty()) path = "-";
    const double score =
        leaf.terminated ? leaf.path_reward : leaf.path_reward + scale * values(leaf.leaf_state, leaf.leaf_action);
    out << path << "\t" << leaf.leaf_state << "\t" << (leaf.terminated ? std::string("T") : std::to_string(leaf.leaf_action))
        << "\t" << leaf.path_reward << "\t" << score << "\n";
  }
  out << std::fixed << std::setprecision(9);
  for (Action a = 0; a < d.action_count(); ++a) out << "pi[" << a << "]\t" << d.probs(a) << "\n";
  out << "sum\t" << d.probs.sum() << "\n";
  out << std::defaultfloat;
}

EvalResult run_eval(const RunConfig& config, const MdpSpec& mdp, const ThetaParams& theta, int episodes,
                    std::uint64_t seed) {
  if (episodes < 1) throw ConfigError("eval needs at least one episode");
  validate_heads(theta, mdp.action_count());
  const DeterminizedModel model = DeterminizedModel::for_planning(mdp);
  const PolicyMode mode = make_train_config(config, seed).policy;
  Rng rng(derive_seed(seed, 4001));
  EvalResult r;
  r.episodes = episodes;
  r.optimal_value = optimal_start_value(mdp);
  double total = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    State s = reset(mdp, rng);
    double disc = 1.0;
    for (int t = 0;; ++t) {
      const ExpansionResult e = expand_for_policy(model, s, mode, theta, mdp.discount());
      const Action a = greedy_action(softtreemax_probs(mdp, e, theta, mode.beta));
      const StepOutcome o = step(mdp, s, a, rng, t);
      total += disc * o.reward;
      disc *= mdp.discount();
      if (o.done) break;
      s = o.next_state;
    }
  }
  r.greedy_return = total / episodes;
  return r;
}

}  // namespace stm
