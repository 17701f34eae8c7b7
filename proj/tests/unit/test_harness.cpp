#include "doctest.h"
#include "helpers.hpp"

#include "stm/errors.hpp"
#include "stm/harness.hpp"
#include "stm/oracle.hpp"
#include "stm/policy.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace stm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("stm_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string header_line() {
  std::string h;
  for (const auto& c : metrics_columns()) h += (h.empty() ? "" : ",") + c;
  return h + "\n";
}

RunConfig tiny_config(const fs::path& out) {
  RunConfig c;
  c.env = "chain";
  c.chain_length = 4;
  c.gamma = 0.9;
  c.depth = 1;
  c.width = 0;
  c.hidden = "8";
  c.steps_per_rollout = 16;
  c.total_steps = 64;
  c.seeds = {0};
  c.output = out.string();
  c.deterministic_clock = true;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(STM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing and overrides") {
  auto c = parse_config_text("# comment\nenv = chain\ndepth=3  # trailing\n\nseeds = 4, 5\ntarget_return = 0.5\n");
  CHECK(c.env == "chain");
  CHECK(c.depth == 3);
  CHECK(c.seeds == std::vector<std::uint64_t>{4, 5});
  REQUIRE(c.target_return);
  CHECK(*c.target_return == 0.5);
  apply_config_value(c, "depth", "1");
  CHECK(c.depth == 1);
  apply_config_value(c, "target_return", "");
  CHECK(!c.target_return);

  CHECK_THROWS_AS(parse_config_text("nonsense = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("depth = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("depth\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("policy = greedy\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("total_steps = -5\n"), ConfigError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/stm.cfg"), ConfigError);

  // Every schema key survives a round trip through text.
  RunConfig d;
  d.target_return = 0.75;
  std::string text;
  for (const auto& [k, v] : config_to_map(d)) text += k + " = " + v + "\n";
  CHECK(config_to_map(parse_config_text(text)) == config_to_map(d));
}

TEST_CASE("config validation") {
  const MdpSpec grid = make_preset("gridworld5");
  RunConfig c;
  CHECK_NOTHROW(validate_config(c, grid));
  c.width = 3;
  CHECK_THROWS_AS(validate_config(c, grid), ConfigError);
  c = RunConfig{};
  c.depth = -1;
  CHECK_THROWS_AS(validate_config(c, grid), ConfigError);
  c = RunConfig{};
  c.seeds.clear();
  CHECK_THROWS_AS(validate_config(c, grid), ConfigError);
  c = RunConfig{};
  c.gamma = 1.0;
  CHECK_THROWS_AS(make_environment(c), ConfigError);

  const auto t = make_train_config(RunConfig{}, 7);
  CHECK(t.policy.width == 1024);
  CHECK(t.seed == 7);
  RunConfig nw;
  nw.width = 0;
  CHECK(!make_train_config(nw, 0).policy.width);
}

TEST_CASE("grid files") {
  const auto dir = scratch("grid");
  {
    std::ofstream(dir / "g.txt") << "# tiny\nslip = 0.1\nS.P\n..G\n";
  }
  RunConfig c;
  c.env = "file";
  c.env_file = (dir / "g.txt").string();
  const auto mdp = make_environment(c);
  CHECK(mdp.state_count() == 6);
  CHECK(mdp.action_count() == 4);
  CHECK(!is_deterministic(mdp));
  c.env_file = (dir / "missing.txt").string();
  CHECK_THROWS_AS(make_environment(c), ConfigError);
}

TEST_CASE("metrics writer") {
  const auto dir = scratch("metrics");
  const auto path = (dir / "m.csv").string();
  { MetricsWriter w(path, 1); }
  CHECK(slurp(path) == header_line());
  CHECK(read_metrics(path).empty());

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  std::vector<UpdateRecord> rows;
  {
    MetricsWriter w(path, 7);
    for (int i = 0; i < 1000; ++i) {
      UpdateRecord r;
      r.wall_clock_s = std::abs(u(rng));
      r.env_steps = static_cast<std::uint64_t>(i) * 128;
      r.model_steps = rng();
      r.update_idx = i;
      r.mean_episode_return = i % 17 == 0 ? std::nan("") : u(rng) * 1e-7;
      r.grad_variance = std::abs(u(rng)) * 1e-20;
      r.depth = i % 5;
      r.beta = u(rng);
      r.seed = rng();
      rows.push_back(r);
      w.write(r);
    }
  }
  const auto back = read_metrics(path);
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(format_metrics_row(back[i]) == format_metrics_row(rows[i]));
  CHECK(slurp(path).rfind(header_line(), 0) == 0);

  // Appending to an existing file does not repeat the header.
  { MetricsWriter w(path, 1); w.write(rows[0]); }
  CHECK(read_metrics(path).size() == 1001);
}

TEST_CASE("run_train: artifacts, determinism and fan-out") {
  const auto dir = scratch("train");
  auto c = tiny_config(dir / "a");
  c.seeds = {0, 1, 2, 3, 4};
  const auto s = run_train(c);
  REQUIRE(s.size() == 5);
  std::set<std::uint64_t> seeds;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto sd = dir / "a" / ("seed_" + std::to_string(seed));
    CHECK(fs::exists(sd / "metrics.csv"));
    CHECK(fs::exists(sd / "policy.bin"));
    CHECK(fs::exists(sd / "critic.bin"));
    const auto j = nlohmann::json::parse(slurp(sd / "manifest.json"));
    CHECK(j["status"] == "completed");
    seeds.insert(j["seed"].get<std::uint64_t>());
    const auto rows = read_metrics((sd / "metrics.csv").string());
    CHECK(rows.size() == 4);
    for (const auto& r : rows) CHECK(r.seed == seed);
    CHECK(load_params((sd / "policy.bin").string()).weights.allFinite());
  }
  CHECK(seeds.size() == 5);

  auto again = c;
  again.output = (dir / "b").string();
  run_train(again);
  for (int seed = 0; seed < 5; ++seed) {
    const auto name = "seed_" + std::to_string(seed);
    CHECK(slurp(dir / "a" / name / "metrics.csv") == slurp(dir / "b" / name / "metrics.csv"));
  }
}

TEST_CASE("run_train with a zero budget writes only the header") {
  const auto dir = scratch("zero");
  auto c = tiny_config(dir);
  c.total_steps = 0;
  const auto s = run_train(c);
  REQUIRE(s.size() == 1);
  CHECK(slurp(dir / "seed_0" / "metrics.csv") == header_line());
  CHECK(s[0].env_steps == 0);
}

TEST_CASE("run_train respects the step budget to within one batch") {
  const auto dir = scratch("budget");
  auto c = tiny_config(dir);
  c.total_steps = 50;
  c.workers = 2;
  c.steps_per_rollout = 8;
  const auto rows = read_metrics((fs::path(run_train(c)[0].directory) / "metrics.csv").string());
  REQUIRE(!rows.empty());
  CHECK(rows.back().env_steps >= 50);
  CHECK(rows.back().env_steps < 50 + 16);
}

TEST_CASE("run_sweep") {
  const auto dir = scratch("sweep");
  auto c = tiny_config(dir);
  c.seeds = {0, 1};
  const auto rows = run_sweep(c, {0, 2});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].depth == 0);
  CHECK(rows[1].completed_seeds == 2);
  std::istringstream summary(slurp(dir / "summary.csv"));
  std::string line;
  int n = 0;
  std::getline(summary, line);
  CHECK(line == "depth,final_mean_return,mean_grad_variance,completed_seeds");
  while (std::getline(summary, line)) ++n;
  CHECK(n == 2);
  CHECK(fs::exists(dir / "depth_2" / "seed_1" / "metrics.csv"));

  // A single depth is just run_train under depth_<d>.
  const auto one = scratch("sweep_one");
  auto c1 = tiny_config(one);
  run_sweep(c1, {1});
  auto direct = tiny_config(scratch("sweep_direct"));
  run_train(direct);
  CHECK(slurp(one / "depth_1" / "seed_0" / "metrics.csv") ==
        slurp(fs::path(direct.output) / "seed_0" / "metrics.csv"));
  CHECK_THROWS_AS(run_sweep(c, {}), ConfigError);
}

TEST_CASE("expand dump") {
  std::mt19937_64 rng(8);
  const MdpSpec mdp = make_preset("gridworld5");
  const auto theta = test::random_theta(mdp, 8);
  RunConfig c;
  c.depth = 0;
  std::ostringstream out;
  run_expand_debug(c, mdp, theta, 6, out);
  const std::string text = out.str();
  CHECK(text.find("sum\t1.000000000") != std::string::npos);
  int pi_rows = 0, leaf_rows = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("pi[", 0) == 0) ++pi_rows;
    else if (line.rfind("-\t", 0) == 0) ++leaf_rows;
  }
  CHECK(pi_rows == 4);
  CHECK(leaf_rows == 4);

  // Depth 2 probabilities agree with brute-force enumeration.
  c.depth = 2;
  c.width = 0;
  std::ostringstream deep;
  run_expand_debug(c, mdp, theta, 6, deep);
  const auto ref = oracle::brute_force_softtreemax(mdp, DeterminizedModel(mdp), 6, theta, 1.0, mdp.discount(), 2);
  std::istringstream dl(deep.str());
  while (std::getline(dl, line)) {
    if (line.rfind("pi[", 0) != 0) continue;
    const int a = std::stoi(line.substr(3));
    const double p = std::stod(line.substr(line.find('\t') + 1));
    CHECK(std::abs(p - ref(a)) <= 5e-10);
  }

  std::ostringstream bad;
  CHECK_THROWS(run_expand_debug(c, mdp, theta, 25, bad));
}

TEST_CASE("eval compares against the optimum") {
  const MdpSpec chain = build_chain(4, 1.0, 0.9);
  auto theta = init_params(make_layer_sizes(feature_dim(chain), {}, 2), HeadMode::per_action, 0);
  theta.weights.setZero();
  theta.weights(theta.weights.size() - 1) = 1.0;  // always move right
  RunConfig c;
  c.depth = 0;
  const auto r = run_eval(c, chain, theta, 3, 0);
  CHECK(std::abs(r.optimal_value - 0.81) <= 1e-9);
  CHECK(std::abs(r.greedy_return - 0.81) <= 1e-12);
  CHECK_THROWS_AS(run_eval(c, chain, theta, 0, 0), ConfigError);
}

TEST_CASE("command-line exit codes") {
  const auto dir = scratch("cli");
  const std::string out = (dir / "runs").string();
  const std::string base = "--env chain --chain_length 4 --hidden 8 --steps_per_rollout 16 --seeds 0 --output " + out;
  CHECK(run_cli("train " + base + " --total_steps 32") == 0);
  CHECK(fs::exists(dir / "runs" / "seed_0" / "policy.bin"));
  CHECK(run_cli("train " + base + " --depth -1") == 1);
  CHECK(run_cli("train --no_such_flag 3") == 1);
  CHECK(run_cli("train --config " + (dir / "missing.cfg").string()) == 1);
  CHECK(run_cli("expand " + base + " --state 1") == 0);
  CHECK(run_cli("eval " + base + " --checkpoint " + (dir / "runs" / "seed_0" / "policy.bin").string()) == 0);
  CHECK(run_cli("eval " + base + " --checkpoint " + (dir / "nothing.bin").string()) == 3);

  // Finite but enormous parameters overflow the logits.
  const MdpSpec chain = build_chain(4, 1.0, 0.9);
  auto huge = init_params(make_layer_sizes(feature_dim(chain), {}, 2), HeadMode::per_action, 0);
  huge.weights.setConstant(1e300);
  save_params((dir / "huge.bin").string(), huge);
  CHECK(run_cli("eval " + base + " --beta 1e300 --checkpoint " + (dir / "huge.bin").string()) == 2);
}
