#include "stm/trainer.hpp"

#include "stm/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>
#include <stdexcept>

namespace stm {

namespace {

double critic_value(const MdpSpec& mdp, const CriticParams& critic, State s) {
  return forward(critic, encode_features(mdp, s))(0);
}

Eigen::VectorXd log_probs_for(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta, double beta,
                              std::span<const std::size_t> indices, std::vector<PolicyDecision>* decisions) {
  std::vector<const ExpansionResult*> exps;
  exps.reserve(indices.size());
  for (std::size_t i : indices) exps.push_back(batch.samples[i].expansion.get());
  const LeafValues values(mdp, theta, exps);
  Eigen::VectorXd out(static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    PolicyDecision d = softtreemax_probs(*exps[k], values, beta);
    out(static_cast<Eigen::Index>(k)) = d.log_probs(batch.samples[indices[k]].action);
    if (decisions) decisions->push_back(std::move(d));
  }
  return out;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

ExpansionResult expand_for_policy(const DeterminizedModel& model, State root, const PolicyMode& mode,
                                  const ThetaParams& theta, double gamma) {
  const int d = mode.effective_depth();
  if (mode.width && d > 0) return expand_pruned(model, root, d, gamma, *mode.width, theta, mode.beta);
  return expand_exhaustive(model, root, d, gamma);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

VecEnv::VecEnv(const MdpSpec& mdp, int workers, std::uint64_t seed) : mdp_(&mdp) {
  if (workers < 1) throw std::invalid_argument("VecEnv needs at least one worker");
  for (int i = 0; i < workers; ++i) {
    Worker w;
    w.rng.seed(derive_seed(seed, static_cast<std::uint64_t>(i)));
    workers_.push_back(std::move(w));
  }
  reset_all();
}

void VecEnv::reset_all() {
  for (auto& w : workers_) {
    w.state = reset(*mdp_, w.rng);
    w.t = 0;
    w.episode_return = 0.0;
    w.discount = 1.0;
  }
}

RolloutBatch collect_rollouts(const DeterminizedModel& model, VecEnv& envs, const ThetaParams& theta,
                              const CriticParams& critic, const PolicyMode& mode, int steps,
                              std::uint64_t theta_snapshot) {
  if (steps < 1) throw std::invalid_argument("collect_rollouts: steps must be positive");
  const MdpSpec& mdp = envs.mdp();
  const double gamma = mdp.discount();
  RolloutBatch batch;
  batch.workers = envs.size();
  batch.steps = steps;
  batch.theta_snapshot = theta_snapshot;
  batch.samples.resize(static_cast<std::size_t>(batch.workers) * static_cast<std::size_t>(steps));
  batch.bootstrap_values.resize(batch.workers);

  for (int w = 0; w < envs.size(); ++w) {
    auto& env = envs.worker(w);
    for (int t = 0; t < steps; ++t) {
      RolloutSample& sample = batch.samples[static_cast<std::size_t>(w) * static_cast<std::size_t>(steps) +
                                            static_cast<std::size_t>(t)];
      auto expansion = std::make_shared<const ExpansionResult>(expand_for_policy(model, env.state, mode, theta, gamma));
      batch.model_steps += expansion->model_steps;
      const PolicyDecision decision = softtreemax_probs(mdp, *expansion, theta, mode.beta);
      const Action a = sample_action(decision, env.rng);
      const StepOutcome out = step(mdp, env.state, a, env.rng, env.t);

      sample.root_state = env.state;
      sample.expansion = std::move(expansion);
      sample.action = a;
      sample.reward = out.reward;
      sample.done = out.done;
      sample.log_prob = decision.log_probs(a);
      sample.value = critic_value(mdp, critic, env.state);
      sample.episode_step = env.t;
      ++batch.env_steps;

      env.episode_return += env.discount * out.reward;
      env.discount *= gamma;
      if (out.done) {
        batch.episode_returns.push_back(env.episode_return);
        env.state = reset(mdp, env.rng);
        env.t = 0;
        env.episode_return = 0.0;
        env.discount = 1.0;
      } else {
        env.state = out.next_state;
        ++env.t;
      }
    }
    batch.bootstrap_values(w) = critic_value(mdp, critic, env.state);
  }
  return batch;
}

double trajectory_log_prob(std::span<const PolicyDecision> decisions, std::span<const Action> actions) {
  if (decisions.size() != actions.size()) throw std::invalid_argument("one action per decision expected");
  double total = 0.0;
  for (std::size_t t = 0; t < decisions.size(); ++t) total += decisions[t].log_probs(actions[t]);
  return total;
}

Eigen::VectorXd recompute_log_probs(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                                    double beta) {
  const auto idx = all_indices(batch.size());
  return log_probs_for(mdp, batch, theta, beta, idx, nullptr);
}

std::vector<EpisodeSpan> complete_episodes(const RolloutBatch& batch) {
  std::vector<EpisodeSpan> out;
  for (int w = 0; w < batch.workers; ++w) {
    int begin = -1;
    for (int t = 0; t < batch.steps; ++t) {
      const auto& s = batch.at(w, t);
      if (s.episode_step == 0) begin = t;
      if (s.done) {
        if (begin >= 0) out.push_back({w, begin, t + 1});
        begin = -1;
      }
    }
  }
  return out;
}

Eigen::VectorXd reinforce_grad(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                               double beta, double gamma) {
  const auto episodes = complete_episodes(batch);
  if (episodes.empty()) throw std::invalid_argument("reinforce_grad: batch has no complete episode");
  std::vector<const ExpansionResult*> exps;
  for (const auto& s : batch.samples) exps.push_back(s.expansion.get());
  const LeafValues values(mdp, theta, exps);
  LeafGradient acc(mdp, theta);
  const double scale = 1.0 / static_cast<double>(episodes.size());
  for (const auto& ep : episodes) {
    double ret = 0.0;
    double disc = 1.0;
    for (int t = ep.begin; t < ep.end; ++t) {
      ret += disc * batch.at(ep.worker, t).reward;
      disc *= gamma;
    }
    if (ret == 0.0) continue;
    for (int t = ep.begin; t < ep.end; ++t) {
      const auto& s = batch.at(ep.worker, t);
      const PolicyDecision d = softtreemax_probs(*s.expansion, values, beta);
      acc.add(*s.expansion, logprob_leaf_coefficients(d, *s.expansion, s.action), scale * ret);
    }
  }
  return acc.gradient();
}

Advantages compute_gae(const RolloutBatch& batch, double gamma, double lambda) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  Advantages out;
  out.advantages = Eigen::VectorXd::Zero(n);
  for (int w = 0; w < batch.workers; ++w) {
    double gae = 0.0;
    for (int t = batch.steps - 1; t >= 0; --t) {
      const auto& s = batch.at(w, t);
      const double nonterminal = s.done ? 0.0 : 1.0;
      const double next_value = t + 1 < batch.steps ? batch.at(w, t + 1).value : batch.bootstrap_values(w);
      const double delta = s.reward + gamma * next_value * nonterminal - s.value;
      gae = delta + gamma * lambda * nonterminal * gae;
      out.advantages(static_cast<Eigen::Index>(w) * batch.steps + t) = gae;
    }
  }
  Eigen::VectorXd values(n);
  for (Eigen::Index i = 0; i < n; ++i) values(i) = batch.samples[static_cast<std::size_t>(i)].value;
  out.returns = out.advantages + values;
  const double mean = out.advantages.mean();
  const double var = n > 1 ? (out.advantages.array() - mean).square().sum() / static_cast<double>(n - 1) : 0.0;
  out.normalized = (out.advantages.array() - mean) / (std::sqrt(var) + 1e-8);
  return out;
}

Eigen::MatrixXd per_sample_policy_gradients(const MdpSpec& mdp, const RolloutBatch& batch,
                                            const ThetaParams& theta, double beta,
                                            const Eigen::VectorXd& weights) {
  if (weights.size() != static_cast<Eigen::Index>(batch.size()))
    throw std::invalid_argument("one weight per sample expected");
  std::vector<const ExpansionResult*> exps;
  for (const auto& s : batch.samples) exps.push_back(s.expansion.get());
  const LeafValues values(mdp, theta, exps);
  Eigen::MatrixXd g(theta.weights.size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch.samples[i];
    const PolicyDecision d = softtreemax_probs(*s.expansion, values, beta);
    LeafGradient acc(mdp, theta);
    acc.add(*s.expansion, logprob_leaf_coefficients(d, *s.expansion, s.action),
            weights(static_cast<Eigen::Index>(i)));
    g.col(static_cast<Eigen::Index>(i)) = acc.gradient();
  }
  return g;
}

double grad_variance(const Eigen::MatrixXd& per_sample) {
  const auto n = per_sample.cols();
  if (n < 2) throw std::invalid_argument("grad_variance needs at least two samples");
  const Eigen::VectorXd mean = per_sample.rowwise().mean();
  const Eigen::MatrixXd centered = per_sample.colwise() - mean;
  const Eigen::VectorXd var = centered.rowwise().squaredNorm() / static_cast<double>(n - 1);
  return var.mean();
}

Optimizer::Optimizer(OptimizerKind kind, double lr, Eigen::Index size)
    : kind_(kind), lr_(lr), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {}

void Optimizer::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (grad.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  if (kind_ == OptimizerKind::sgd) {
    params -= lr_ * grad;
    return;
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

Eigen::VectorXd ppo_policy_loss_grad(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                                     double beta, const Eigen::VectorXd& advantages,
                                     std::span<const std::size_t> indices, const PpoConfig& config,
                                     double* loss) {
  std::vector<PolicyDecision> decisions;
  decisions.reserve(indices.size());
  const Eigen::VectorXd logp = log_probs_for(mdp, batch, theta, beta, indices, &decisions);
  const double m = static_cast<double>(indices.size());
  LeafGradient acc(mdp, theta);
  double total = 0.0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& s = batch.samples[indices[k]];
    const double adv = advantages(static_cast<Eigen::Index>(indices[k]));
    const double ratio = std::exp(logp(static_cast<Eigen::Index>(k)) - s.log_prob);
    const double surr1 = ratio * adv;
    const double surr2 = std::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv;
    total -= std::min(surr1, surr2) / m;
    if (surr1 <= surr2) acc.add(*s.expansion, logprob_leaf_coefficients(decisions[k], *s.expansion, s.action), -surr1 / m);
    if (config.ent_coef != 0.0) {
      total -= config.ent_coef * entropy(decisions[k]) / m;
      acc.add(*s.expansion, entropy_leaf_coefficients(decisions[k], *s.expansion), -config.ent_coef / m);
    }
  }
  if (loss) *loss = total;
  return acc.gradient();
}

GradientStats ppo_update(const MdpSpec& mdp, const RolloutBatch& batch, const PolicyMode& mode,
                         const PpoConfig& config, TrainState& state, Rng& rng) {
  const auto n = batch.size();
  if (n == 0) throw std::invalid_argument("ppo_update: empty batch");
  const Advantages adv = compute_gae(batch, config.gamma, config.lambda);

  GradientStats stats;
  stats.batch_size = n;
  stats.depth = mode.effective_depth();
  stats.env_steps = batch.env_steps;
  stats.model_steps = batch.model_steps;
  if (n >= 2) {
    const Eigen::MatrixXd g = per_sample_policy_gradients(mdp, batch, state.policy, mode.beta, adv.normalized);
    stats.grad_variance = grad_variance(g);
    stats.mean_grad_norm = g.rowwise().mean().norm();
  }

  Eigen::MatrixXd root_features = Eigen::MatrixXd::Zero(feature_dim(mdp), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    root_features.col(static_cast<Eigen::Index>(i)) = encode_features(mdp, batch.samples[i].root_state);

  const int minibatches = std::max(1, std::min<int>(config.minibatches, static_cast<int>(n)));
  std::vector<std::size_t> order = all_indices(n);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the trainer's stream keeps shuffles reproducible.
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % (i + 1)]);
    for (int mb = 0; mb < minibatches; ++mb) {
      const std::size_t begin = n * static_cast<std::size_t>(mb) / static_cast<std::size_t>(minibatches);
      const std::size_t end = n * static_cast<std::size_t>(mb + 1) / static_cast<std::size_t>(minibatches);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const double m = static_cast<double>(idx.size());

      double policy_loss = 0.0;
      Eigen::VectorXd g_pi =
          ppo_policy_loss_grad(mdp, batch, state.policy, mode.beta, adv.normalized, idx, config, &policy_loss);

      Eigen::MatrixXd x(root_features.rows(), static_cast<Eigen::Index>(idx.size()));
      Eigen::RowVectorXd target(static_cast<Eigen::Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        x.col(static_cast<Eigen::Index>(k)) = root_features.col(static_cast<Eigen::Index>(idx[k]));
        target(static_cast<Eigen::Index>(k)) = adv.returns(static_cast<Eigen::Index>(idx[k]));
      }
      const Eigen::RowVectorXd v = forward_batch(state.critic, x).row(0);
      const Eigen::RowVectorXd err = v - target;
      const double value_loss = config.vf_coef * err.squaredNorm() / m;
      Eigen::VectorXd g_v = backward_batch(state.critic, x, (2.0 * config.vf_coef / m) * err);

      if (!std::isfinite(policy_loss) || !std::isfinite(value_loss) || !g_pi.allFinite() || !g_v.allFinite())
        throw NumericError("non-finite PPO loss or gradient (epoch " + std::to_string(epoch) + ", minibatch " +
                           std::to_string(mb) + ")");

      if (config.max_grad_norm > 0.0) {
        const double norm = std::sqrt(g_pi.squaredNorm() + g_v.squaredNorm());
        if (norm > config.max_grad_norm) {
          const double s = config.max_grad_norm / norm;
          g_pi *= s;
          g_v *= s;
        }
      }
      state.policy_opt.step(state.policy.weights, g_pi);
      state.critic_opt.step(state.critic.weights, g_v);
    }
  }
  return stats;
}

TrainResult train(const MdpSpec& mdp, const TrainConfig& config,
                  const std::function<bool(const UpdateRecord&)>& on_update) {
  if (config.workers < 1) throw ConfigError("workers must be at least 1");
  if (config.steps_per_rollout < 1) throw ConfigError("steps per rollout must be at least 1");
  if (config.policy.effective_depth() < 0) throw ConfigError("depth must be non-negative");
  if (config.policy.width && *config.policy.width < mdp.action_count())
    throw ConfigError("width must be at least the action count");

  const int A = mdp.action_count();
  const int heads = config.head_mode == HeadMode::per_action ? A : 1;
  TrainResult result;
  TrainState& st = result.state;
  st.policy = init_params(make_layer_sizes(feature_dim(mdp), config.hidden, heads), config.head_mode,
                          derive_seed(config.seed, 1001));
  st.critic = init_params(make_layer_sizes(feature_dim(mdp), config.hidden, 1), HeadMode::single_head,
                          derive_seed(config.seed, 1002));
  st.policy_opt = Optimizer(config.ppo.optimizer, config.ppo.lr, st.policy.weights.size());
  st.critic_opt = Optimizer(config.ppo.optimizer, config.ppo.lr, st.critic.weights.size());

  const DeterminizedModel model = DeterminizedModel::for_planning(mdp);
  VecEnv envs(mdp, config.workers, derive_seed(config.seed, 2001));
  Rng update_rng(derive_seed(config.seed, 3001));
  std::deque<double> recent;
  std::uint64_t env_steps = 0;
  std::uint64_t model_steps = 0;
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  for (int update = 0; env_steps < config.total_env_steps; ++update) {
    if (config.wall_clock_budget_s > 0.0 && elapsed() >= config.wall_clock_budget_s) break;
    if (config.algorithm == Algorithm::reinforce) envs.reset_all();
    const RolloutBatch batch = collect_rollouts(model, envs, st.policy, st.critic, config.policy,
                                                config.steps_per_rollout, static_cast<std::uint64_t>(update));
    env_steps += batch.env_steps;
    model_steps += batch.model_steps;

    GradientStats stats;
    if (config.algorithm == Algorithm::ppo) {
      stats = ppo_update(mdp, batch, config.policy, config.ppo, st, update_rng);
    } else {
      const auto episodes = complete_episodes(batch);
      if (!episodes.empty()) {
        const Eigen::VectorXd g = reinforce_grad(mdp, batch, st.policy, config.policy.beta, mdp.discount());
        if (!g.allFinite()) throw NumericError("non-finite REINFORCE gradient");
        // Per-transition samples G(tau) * grad log pi for the variance record.
        Eigen::VectorXd weights = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(batch.size()));
        for (const auto& ep : episodes) {
          double ret = 0.0;
          double disc = 1.0;
          for (int t = ep.begin; t < ep.end; ++t) {
            ret += disc * batch.at(ep.worker, t).reward;
            disc *= mdp.discount();
          }
          for (int t = ep.begin; t < ep.end; ++t)
            weights(static_cast<Eigen::Index>(ep.worker) * batch.steps + t) = ret;
        }
        if (batch.size() >= 2) {
          const Eigen::MatrixXd per = per_sample_policy_gradients(mdp, batch, st.policy, config.policy.beta, weights);
          stats.grad_variance = grad_variance(per);
        }
        stats.mean_grad_norm = g.norm();
        st.policy_opt.step(st.policy.weights, -g);
      }
    }

    for (double r : batch.episode_returns) {
      recent.push_back(r);
      if (static_cast<int>(recent.size()) > config.return_window) recent.pop_front();
    }

    UpdateRecord rec;
    rec.wall_clock_s = config.deterministic_clock ? 0.0 : elapsed();
    rec.env_steps = env_steps;
    rec.model_steps = model_steps;
    rec.update_idx = update;
    if (!recent.empty())
      rec.mean_episode_return = std::accumulate(recent.begin(), recent.end(), 0.0) / static_cast<double>(recent.size());
    rec.grad_variance = stats.grad_variance;
    rec.mean_grad_norm = stats.mean_grad_norm;
    rec.depth = config.policy.effective_depth();
    rec.beta = config.policy.beta;
    rec.seed = config.seed;
    result.records.push_back(rec);

    const bool keep_going = on_update ? on_update(rec) : true;
    if (config.target_return && !recent.empty() && static_cast<int>(recent.size()) >= config.return_window &&
        rec.mean_episode_return >= *config.target_return) {
      result.reached_target = true;
      break;
    }
    if (!keep_going) break;
  }
  return result;
}

}  // namespace stm
