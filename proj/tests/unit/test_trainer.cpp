#include "doctest.h"
#include "helpers.hpp"

#include "stm/errors.hpp"
#include "stm/trainer.hpp"

#include <cmath>
#include <set>

using namespace stm;

namespace {

PolicyMode tree_mode(int depth, double beta = 1.0) {
  PolicyMode m;
  m.kind = PolicyMode::Kind::softtreemax;
  m.depth = depth;
  m.beta = beta;
  return m;
}

CriticParams small_critic(const MdpSpec& mdp, std::uint64_t seed) {
  return init_params(make_layer_sizes(feature_dim(mdp), {4}, 1), HeadMode::single_head, seed);
}

// Batch with arbitrary rewards, dones and values; expansions are left empty
// since only the advantage arithmetic reads it.
RolloutBatch random_value_batch(std::mt19937_64& rng, int workers, int steps) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RolloutBatch b;
  b.workers = workers;
  b.steps = steps;
  b.samples.resize(static_cast<std::size_t>(workers * steps));
  b.bootstrap_values.resize(workers);
  for (int w = 0; w < workers; ++w) {
    for (int t = 0; t < steps; ++t) {
      auto& s = b.samples[static_cast<std::size_t>(w * steps + t)];
      s.reward = u(rng);
      s.value = u(rng);
      s.done = rng() % 4 == 0;
    }
    b.bootstrap_values(w) = u(rng);
  }
  return b;
}

// Non-recursive GAE: A_t = sum_k (g l)^(k-t) * alive(t, k) * delta_k.
Eigen::VectorXd gae_double_loop(const RolloutBatch& b, double g, double l) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b.size()));
  for (int w = 0; w < b.workers; ++w)
    for (int t = 0; t < b.steps; ++t) {
      double acc = 0.0;
      for (int k = t; k < b.steps; ++k) {
        bool alive = true;
        for (int j = t; j < k; ++j) alive = alive && !b.at(w, j).done;
        if (!alive) break;
        const auto& s = b.at(w, k);
        const double next = k + 1 < b.steps ? b.at(w, k + 1).value : b.bootstrap_values(w);
        const double delta = s.reward + (s.done ? 0.0 : g * next) - s.value;
        acc += std::pow(g * l, k - t) * delta;
      }
      out(w * b.steps + t) = acc;
    }
  return out;
}

}  // namespace

TEST_CASE("derive_seed separates streams and is stable") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (std::uint64_t stream : {1001u, 1002u, 2001u, 3001u, 4001u}) seen.insert(derive_seed(seed, stream));
  CHECK(seen.size() == 100);
  CHECK(derive_seed(7, 1001) == derive_seed(7, 1001));
}

TEST_CASE("trajectory_log_prob") {
  PolicyDecision one;
  one.probs = Eigen::VectorXd::Ones(1);
  one.log_probs = Eigen::VectorXd::Zero(1);
  std::vector<PolicyDecision> ds{one, one, one};
  std::vector<Action> as{0, 0, 0};
  CHECK(trajectory_log_prob(ds, as) == 0.0);

  PolicyDecision a, b;
  a.probs = Eigen::Vector2d(0.5, 0.5);
  a.log_probs = a.probs.array().log();
  b.probs = Eigen::Vector2d(0.75, 0.25);
  b.log_probs = b.probs.array().log();
  std::vector<PolicyDecision> two{a, b};
  std::vector<Action> acts{1, 1};
  CHECK(std::abs(trajectory_log_prob(two, acts) - std::log(0.125)) <= 1e-12);
  CHECK_THROWS_AS(trajectory_log_prob(two, std::vector<Action>{0}), std::invalid_argument);
}

TEST_CASE("collect_rollouts shapes, accounting and cached log-probs") {
  std::mt19937_64 rng(1);
  auto mdp = test::random_deterministic_mdp(rng, 6, 2, 0);
  const DeterminizedModel model(mdp);
  auto theta = test::random_theta(mdp, 1);
  auto critic = small_critic(mdp, 2);

  VecEnv envs(mdp, 1, 3);
  auto batch = collect_rollouts(model, envs, theta, critic, tree_mode(2), 10);
  CHECK(batch.size() == 10);
  CHECK(batch.env_steps == 10);
  CHECK(batch.model_steps == 10 * (2 + 4));

  VecEnv many(mdp, 3, 3);
  auto b3 = collect_rollouts(model, many, theta, critic, tree_mode(1), 7);
  CHECK(b3.size() == 21);
  CHECK(b3.env_steps == 21);
  for (const auto& s : b3.samples) {
    CHECK(std::isfinite(s.log_prob));
    CHECK(s.log_prob <= 0.0);
  }

  // Re-evaluation consistency and the ratio identity.
  const auto again = recompute_log_probs(mdp, b3, theta, 1.0);
  for (std::size_t i = 0; i < b3.size(); ++i) {
    CHECK(std::abs(again(static_cast<Eigen::Index>(i)) - b3.samples[i].log_prob) <= 1e-10);
    CHECK(std::abs(std::exp(again(static_cast<Eigen::Index>(i)) - b3.samples[i].log_prob) - 1.0) <= 1e-12);
  }

  // Same seeds, same batch.
  VecEnv again_envs(mdp, 3, 3);
  auto b3b = collect_rollouts(model, again_envs, theta, critic, tree_mode(1), 7);
  for (std::size_t i = 0; i < b3.size(); ++i) {
    CHECK(b3.samples[i].action == b3b.samples[i].action);
    CHECK(b3.samples[i].log_prob == b3b.samples[i].log_prob);
  }
}

TEST_CASE("near-greedy policy follows the greedy path on the chain") {
  const MdpSpec chain = build_chain(8, 1.0, 0.9);
  const DeterminizedModel model(chain);
  auto theta = init_params(make_layer_sizes(feature_dim(chain), {}, 2), HeadMode::per_action, 0);
  theta.weights.setZero();
  theta.weights(theta.weights.size() - 1) = 1.0;  // bias of the "right" head
  VecEnv envs(chain, 1, 0);
  auto batch = collect_rollouts(model, envs, theta, small_critic(chain, 0), tree_mode(0, 50.0), 5);
  for (int t = 0; t < 5; ++t) {
    CHECK(batch.at(0, t).root_state == t);
    CHECK(batch.at(0, t).action == 1);
    CHECK(batch.at(0, t).episode_step == t);
  }
}

TEST_CASE("done flags delimit episodes") {
  const MdpSpec chain = build_chain(3, 1.0, 0.9);
  const DeterminizedModel model(chain);
  auto theta = test::random_theta(chain, 5);
  VecEnv envs(chain, 2, 11);
  auto batch = collect_rollouts(model, envs, theta, small_critic(chain, 0), tree_mode(1), 40);
  const auto eps = complete_episodes(batch);
  CHECK(!eps.empty());
  for (const auto& ep : eps) {
    CHECK(batch.at(ep.worker, ep.begin).episode_step == 0);
    CHECK(batch.at(ep.worker, ep.end - 1).done);
    for (int t = ep.begin; t + 1 < ep.end; ++t) CHECK(!batch.at(ep.worker, t).done);
  }
  for (int w = 0; w < 2; ++w)
    for (int t = 0; t + 1 < 40; ++t)
      if (batch.at(w, t).done) CHECK(batch.at(w, t + 1).episode_step == 0);
}

TEST_CASE("reinforce_grad") {
  const MdpSpec chain = build_chain(3, 1.0, 0.9);
  const DeterminizedModel model(chain);
  auto theta = test::random_theta(chain, 7);
  VecEnv envs(chain, 3, 2);
  auto batch = collect_rollouts(model, envs, theta, small_critic(chain, 0), tree_mode(1, 0.7), 12);
  const auto eps = complete_episodes(batch);
  REQUIRE(eps.size() >= 3);

  Eigen::VectorXd hand = Eigen::VectorXd::Zero(theta.weights.size());
  for (const auto& ep : eps) {
    double ret = 0.0;
    for (int t = ep.begin; t < ep.end; ++t) ret += std::pow(0.9, t - ep.begin) * batch.at(ep.worker, t).reward;
    for (int t = ep.begin; t < ep.end; ++t) {
      const auto& s = batch.at(ep.worker, t);
      const auto dec = softtreemax_probs(chain, *s.expansion, theta, 0.7);
      hand += ret * softtreemax_logprob_grad(chain, dec, *s.expansion, theta, s.action);
    }
  }
  hand /= static_cast<double>(eps.size());
  CHECK((reinforce_grad(chain, batch, theta, 0.7, 0.9) - hand).cwiseAbs().maxCoeff() <= 1e-10);

  // Zero rewards: zero gradient.
  RolloutBatch zero = batch;
  for (auto& s : zero.samples) s.reward = 0.0;
  CHECK(reinforce_grad(chain, zero, theta, 0.7, 0.9).cwiseAbs().maxCoeff() == 0.0);

  // No complete episode.
  RolloutBatch partial = batch;
  for (auto& s : partial.samples) s.done = false;
  CHECK_THROWS_AS(reinforce_grad(chain, partial, theta, 0.7, 0.9), std::invalid_argument);
}

TEST_CASE("compute_gae") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto b = random_value_batch(rng, 1 + trial % 3, 3 + trial % 7);
    const double g = 0.97, l = 0.9;
    auto adv = compute_gae(b, g, l);
    CHECK((adv.advantages - gae_double_loop(b, g, l)).cwiseAbs().maxCoeff() <= 1e-10);
    for (std::size_t i = 0; i < b.size(); ++i)
      CHECK(std::abs(adv.returns(static_cast<Eigen::Index>(i)) - adv.advantages(static_cast<Eigen::Index>(i)) -
                     b.samples[i].value) <= 1e-12);
    CHECK(std::abs(adv.normalized.mean()) <= 1e-10);
    const double sd = std::sqrt((adv.normalized.array() - adv.normalized.mean()).square().sum() /
                                static_cast<double>(b.size() - 1));
    CHECK(sd == doctest::Approx(1.0).epsilon(1e-6));

    // lambda = 0: one-step TD error.
    auto td = compute_gae(b, g, 0.0);
    for (int t = 0; t < b.steps; ++t) {
      const auto& s = b.at(0, t);
      const double next = t + 1 < b.steps ? b.at(0, t + 1).value : b.bootstrap_values(0);
      CHECK(std::abs(td.advantages(t) - (s.reward + (s.done ? 0.0 : g * next) - s.value)) <= 1e-12);
    }
  }

  // lambda = 1 on a finished episode: discounted return minus value.
  auto b = random_value_batch(rng, 1, 5);
  for (auto& s : b.samples) s.done = false;
  b.samples.back().done = true;
  auto mc = compute_gae(b, 0.9, 1.0);
  for (int t = 0; t < 5; ++t) {
    double ret = 0.0;
    for (int k = t; k < 5; ++k) ret += std::pow(0.9, k - t) * b.at(0, k).reward;
    CHECK(std::abs(mc.advantages(t) - (ret - b.at(0, t).value)) <= 1e-12);
  }
}

TEST_CASE("grad_variance") {
  Eigen::VectorXd g(4);
  g << 0.5, -1.0, 2.0, 0.0;
  Eigen::MatrixXd two(4, 2);
  two << g, -g;
  CHECK(std::abs(grad_variance(two) - g.squaredNorm() / 4.0 * 2.0 / (2.0 - 1.0)) <= 1e-15);

  Eigen::MatrixXd same = g.replicate(1, 5);
  CHECK(grad_variance(same) == 0.0);

  Eigen::MatrixXd m = Eigen::MatrixXd::Random(6, 9);
  Eigen::MatrixXd p(6, 9);
  for (int c = 0; c < 9; ++c) p.col(c) = m.col((c * 4) % 9);
  CHECK(std::abs(grad_variance(m) - grad_variance(p)) <= 1e-14);
  CHECK(grad_variance(m) >= 0.0);
  CHECK_THROWS_AS(grad_variance(Eigen::MatrixXd::Ones(3, 1)), std::invalid_argument);
}

TEST_CASE("per-sample gradients are advantage-scaled log-prob gradients") {
  std::mt19937_64 rng(4);
  auto mdp = test::random_deterministic_mdp(rng, 7, 3, 1);
  const DeterminizedModel model(mdp);
  auto theta = test::random_theta(mdp, 4);
  VecEnv envs(mdp, 2, 1);
  auto batch = collect_rollouts(model, envs, theta, small_critic(mdp, 0), tree_mode(2, 1.3), 4);
  Eigen::VectorXd w = Eigen::VectorXd::LinSpaced(8, -1.0, 2.0);
  auto G = per_sample_policy_gradients(mdp, batch, theta, 1.3, w);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const auto dec = softtreemax_probs(mdp, *s.expansion, theta, 1.3);
    const Eigen::VectorXd ref = w(static_cast<Eigen::Index>(i)) * softtreemax_logprob_grad(mdp, dec, *s.expansion, theta, s.action);
    CHECK((G.col(static_cast<Eigen::Index>(i)) - ref).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("ppo_update") {
  std::mt19937_64 rng(6);
  auto mdp = test::random_deterministic_mdp(rng, 6, 2, 1);
  const DeterminizedModel model(mdp);
  const auto theta = test::random_theta(mdp, 6);
  const auto critic = small_critic(mdp, 1);
  VecEnv envs(mdp, 1, 4);
  auto batch = collect_rollouts(model, envs, theta, critic, tree_mode(2), 4);

  PpoConfig cfg;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.lr = 0.1;
  cfg.ent_coef = 0.0;
  cfg.max_grad_norm = 0.0;
  cfg.clip = std::numeric_limits<double>::infinity();
  cfg.epochs = 1;
  cfg.minibatches = 1;

  const auto fresh = [&] {
    return TrainState{theta, critic, Optimizer(cfg.optimizer, cfg.lr, theta.weights.size()),
                      Optimizer(cfg.optimizer, cfg.lr, critic.weights.size())};
  };

  SUBCASE("zero epochs leave the parameters unchanged") {
    auto st = fresh();
    PpoConfig z = cfg;
    z.epochs = 0;
    Rng r(0);
    auto stats = ppo_update(mdp, batch, tree_mode(2), z, st, r);
    CHECK(st.policy.weights == theta.weights);
    CHECK(st.critic.weights == critic.weights);
    CHECK(stats.batch_size == 4);
    CHECK(stats.grad_variance >= 0.0);
  }

  SUBCASE("unclipped single step equals a hand-computed advantage step") {
    auto st = fresh();
    Rng r(0);
    ppo_update(mdp, batch, tree_mode(2), cfg, st, r);
    const auto adv = compute_gae(batch, cfg.gamma, cfg.lambda);
    Eigen::VectorXd ascent = Eigen::VectorXd::Zero(theta.weights.size());
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& s = batch.samples[i];
      const auto dec = softtreemax_probs(mdp, *s.expansion, theta, 1.0);
      ascent += adv.normalized(static_cast<Eigen::Index>(i)) *
                softtreemax_logprob_grad(mdp, dec, *s.expansion, theta, s.action) / 4.0;
    }
    CHECK((st.policy.weights - (theta.weights + cfg.lr * ascent)).cwiseAbs().maxCoeff() <= 1e-8);
  }

  SUBCASE("non-finite loss aborts with a diagnostic") {
    auto st = fresh();
    st.policy.weights(0) = std::numeric_limits<double>::infinity();
    Rng r(0);
    CHECK_THROWS_AS(ppo_update(mdp, batch, tree_mode(2), cfg, st, r), NumericError);
  }
}

TEST_CASE("optimizers") {
  Eigen::VectorXd p = Eigen::Vector2d(1.0, -2.0);
  Optimizer sgd(OptimizerKind::sgd, 0.5, 2);
  sgd.step(p, Eigen::Vector2d(2.0, 2.0));
  CHECK(p == Eigen::Vector2d(0.0, -3.0));

  // The first Adam step moves each coordinate by lr * g / (|g| + eps).
  Eigen::VectorXd q = Eigen::Vector2d::Zero();
  Optimizer adam(OptimizerKind::adam, 0.1, 2);
  adam.step(q, Eigen::Vector2d(3.0, -0.5));
  CHECK(q(0) == doctest::Approx(-0.1 * 3.0 / (3.0 + 1e-5)).epsilon(1e-12));
  CHECK(q(1) == doctest::Approx(0.1 * 0.5 / (0.5 + 1e-5)).epsilon(1e-12));
  CHECK_THROWS_AS(adam.step(q, Eigen::Vector3d::Zero()), std::invalid_argument);
}

TEST_CASE("train: budget, records and reproducibility") {
  const MdpSpec chain = build_chain(4, 1.0, 0.9);
  TrainConfig cfg;
  cfg.policy = tree_mode(1);
  cfg.hidden = {8};
  cfg.steps_per_rollout = 32;
  cfg.total_env_steps = 200;
  cfg.seed = 3;
  cfg.deterministic_clock = true;
  auto a = train(chain, cfg);
  auto b = train(chain, cfg);
  REQUIRE(!a.records.empty());
  CHECK(a.records.back().env_steps >= 200);
  CHECK(a.records.back().env_steps < 200 + 32);
  for (std::size_t i = 1; i < a.records.size(); ++i) {
    CHECK(a.records[i].env_steps > a.records[i - 1].env_steps);
    CHECK(a.records[i].model_steps >= a.records[i - 1].model_steps);
  }
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].wall_clock_s == 0.0);
    CHECK(a.records[i].grad_variance == b.records[i].grad_variance);
    CHECK(a.records[i].model_steps == b.records[i].model_steps);
  }
  CHECK(a.state.policy.weights == b.state.policy.weights);

  cfg.seed = 4;
  CHECK(train(chain, cfg).state.policy.weights != a.state.policy.weights);

  int seen = 0;
  train(chain, cfg, [&](const UpdateRecord&) { return ++seen < 2; });
  CHECK(seen == 2);

  cfg.workers = 0;
  CHECK_THROWS_AS(train(chain, cfg), ConfigError);
}

TEST_CASE("REINFORCE at depth 0 improves the return on the two-state chain") {
  const MdpSpec chain = build_chain(2, 1.0, 0.9);
  TrainConfig cfg;
  cfg.algorithm = Algorithm::reinforce;
  cfg.policy = tree_mode(0);
  cfg.hidden = {};
  cfg.ppo.optimizer = OptimizerKind::sgd;
  cfg.ppo.lr = 0.05;
  cfg.steps_per_rollout = 64;
  cfg.total_env_steps = 64 * 60;
  cfg.seed = 1;
  auto r = train(chain, cfg);
  const auto window = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += r.records[i].mean_episode_return;
    return s / static_cast<double>(to - from);
  };
  const std::size_t n = r.records.size();
  CHECK(window(0, 10) < window(n / 2 - 5, n / 2 + 5));
  CHECK(window(n / 2 - 5, n / 2 + 5) <= window(n - 10, n) + 1e-12);
  CHECK(window(n - 10, n) > 0.95);
}
