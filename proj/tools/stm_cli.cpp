// Command-line front end: train, sweep, expand, eval.
//
// Exit codes: 0 success, 1 configuration error, 2 numeric failure,
// 3 I/O failure.

#include "stm/errors.hpp"
#include "stm/harness.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <map>
#include <string>

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kNumericError = 2, kIoError = 3 };

struct Overrides {
  std::string config_file;
  std::map<std::string, std::string> values;
};

// Adds --config plus one --<key> option per config schema entry.
void add_config_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "flat key = value config file");
  for (const auto& key : stm::config_schema()) {
    cmd->add_option_function<std::string>(
        "--" + key.name, [&o, name = key.name](const std::string& v) { o.values[name] = v; }, key.help);
  }
}

stm::RunConfig resolve(const Overrides& o) {
  stm::RunConfig config;
  if (!o.config_file.empty()) config = stm::load_config_file(o.config_file);
  for (const auto& [k, v] : o.values) stm::apply_config_value(config, k, v);
  return config;
}

stm::ThetaParams policy_params(const stm::RunConfig& config, const stm::MdpSpec& mdp, const std::string& checkpoint,
                               std::uint64_t seed) {
  if (!checkpoint.empty()) return stm::load_params(checkpoint);
  const auto t = stm::make_train_config(config, seed);
  const int heads = t.head_mode == stm::HeadMode::per_action ? mdp.action_count() : 1;
  return stm::init_params(stm::make_layer_sizes(stm::feature_dim(mdp), t.hidden, heads), t.head_mode,
                          stm::derive_seed(seed, 1001));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SoftTreeMax policy-gradient laboratory"};
  app.require_subcommand(1);

  Overrides train_o, sweep_o, expand_o, eval_o;
  auto* train_cmd = app.add_subcommand("train", "train one run per seed");
  add_config_options(train_cmd, train_o);

  auto* sweep_cmd = app.add_subcommand("sweep", "train every depth in `depths` for every seed");
  add_config_options(sweep_cmd, sweep_o);

  auto* expand_cmd = app.add_subcommand("expand", "dump the expansion and root distribution at a state");
  add_config_options(expand_cmd, expand_o);
  int expand_state = 0;
  std::string expand_ckpt;
  std::uint64_t expand_seed = 0;
  expand_cmd->add_option("--state", expand_state, "root state id")->required();
  expand_cmd->add_option("--checkpoint", expand_ckpt, "policy checkpoint (default: freshly initialized)");
  expand_cmd->add_option("--init-seed", expand_seed, "initialization seed when no checkpoint is given");

  auto* eval_cmd = app.add_subcommand("eval", "greedy-policy return against the value-iteration optimum");
  add_config_options(eval_cmd, eval_o);
  std::string eval_ckpt;
  int eval_episodes = 100;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "policy checkpoint")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval_cmd->add_option("--eval-seed", eval_seed, "seed for environment sampling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (train_cmd->parsed()) {
      const auto summaries = stm::run_train(resolve(train_o));
      for (const auto& s : summaries)
        std::cout << "seed " << s.seed << ": env_steps " << s.env_steps << " final_mean_return "
                  << s.final_mean_return << " mean_grad_variance " << s.mean_grad_variance << " -> " << s.directory
                  << "\n";
    } else if (sweep_cmd->parsed()) {
      const auto config = resolve(sweep_o);
      const auto rows = stm::run_sweep(config, stm::parse_int_list(config.depths));
      for (const auto& r : rows)
        std::cout << "depth " << r.depth << ": final_mean_return " << r.final_mean_return << " mean_grad_variance "
                  << r.mean_grad_variance << " (" << r.completed_seeds << " seeds)\n";
    } else if (expand_cmd->parsed()) {
      const auto config = resolve(expand_o);
      const auto mdp = stm::make_environment(config);
      stm::validate_config(config, mdp);
      stm::run_expand_debug(config, mdp, policy_params(config, mdp, expand_ckpt, expand_seed), expand_state,
                            std::cout);
    } else if (eval_cmd->parsed()) {
      const auto config = resolve(eval_o);
      const auto mdp = stm::make_environment(config);
      stm::validate_config(config, mdp);
      const auto r = stm::run_eval(config, mdp, stm::load_params(eval_ckpt), eval_episodes, eval_seed);
      std::cout << std::setprecision(10) << "greedy_return " << r.greedy_return << "\noptimal_value "
                << r.optimal_value << "\nratio " << r.greedy_return / r.optimal_value << "\n";
    }
  } catch (const stm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::out_of_range& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const stm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const stm::IoError& e) {
    std::cerr << "I/O failure: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O failure: " << e.what() << "\n";
    return kIoError;
  }
  return kOk;
}
