#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"
#include "stm/policy.hpp"
#include "stm/tree.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stm {

/// How root actions are chosen: the plain soft-max over network heads
/// (equivalently a depth-0 tree) or the tree policy at `depth`, pruned to
/// `width` frontier nodes when a width is given.
struct PolicyMode {
  enum class Kind { softmax, softtreemax };
  Kind kind = Kind::softtreemax;
  int depth = 2;
  std::optional<int> width;
  double beta = 1.0;

  int effective_depth() const { return kind == Kind::softmax ? 0 : depth; }
};

ExpansionResult expand_for_policy(const DeterminizedModel& model, State root, const PolicyMode& mode,
                                  const ThetaParams& theta, double gamma);

struct RolloutSample {
  State root_state = 0;
  std::shared_ptr<const ExpansionResult> expansion;
  Action action = 0;
  double reward = 0.0;
  bool done = false;
  double log_prob = 0.0;  // under the collection parameters
  double value = 0.0;     // critic estimate of root_state
  int episode_step = 0;   // 0 on the first step of an episode
};

/// N workers x T steps of experience, stored worker-major.
struct RolloutBatch {
  int workers = 0;
  int steps = 0;
  std::vector<RolloutSample> samples;
  Eigen::VectorXd bootstrap_values;  // V(s_T) per worker, used when the last step is not done
  std::uint64_t theta_snapshot = 0;
  std::uint64_t env_steps = 0;
  std::uint64_t model_steps = 0;
  std::vector<double> episode_returns;  // discounted returns of episodes finished in this batch

  std::size_t size() const { return samples.size(); }
  const RolloutSample& at(int worker, int t) const {
    return samples[static_cast<std::size_t>(worker) * static_cast<std::size_t>(steps) + static_cast<std::size_t>(t)];
  }
};

// Stateless 64-bit mixer used to derive independent seeds.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// N independent copies of one environment, each with its own random stream.
class VecEnv {
 public:
  VecEnv(const MdpSpec& mdp, int workers, std::uint64_t seed);

  struct Worker {
    Rng rng;
    State state = 0;
    int t = 0;
    double episode_return = 0.0;
    double discount = 1.0;
  };

  const MdpSpec& mdp() const { return *mdp_; }
  int size() const { return static_cast<int>(workers_.size()); }
  Worker& worker(int i) { return workers_[static_cast<std::size_t>(i)]; }
  void reset_all();

 private:
  const MdpSpec* mdp_;
  std::vector<Worker> workers_;
};

/// Steps every worker T times under the given policy. In tree mode each
/// step's expansion is cached in the batch for later re-evaluation.
RolloutBatch collect_rollouts(const DeterminizedModel& model, VecEnv& envs, const ThetaParams& theta,
                              const CriticParams& critic, const PolicyMode& mode, int steps,
                              std::uint64_t theta_snapshot = 0);

// Policy-dependent part of the trajectory log-likelihood: sum_t log pi(a_t|s_t).
double trajectory_log_prob(std::span<const PolicyDecision> decisions, std::span<const Action> actions);

// Log-probabilities of the stored actions re-evaluated on the cached expansions.
Eigen::VectorXd recompute_log_probs(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                                    double beta);

struct EpisodeSpan {
  int worker = 0;
  int begin = 0;  // first step
  int end = 0;    // one past the done step
};

// Episodes wholly contained in the batch (first step and done step both present).
std::vector<EpisodeSpan> complete_episodes(const RolloutBatch& batch);

/// Likelihood-ratio estimator: mean over complete episodes of
/// G(tau) * sum_t grad log pi(a_t|s_t), with G the discounted return.
Eigen::VectorXd reinforce_grad(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                               double beta, double gamma);

struct Advantages {
  Eigen::VectorXd advantages;  // raw GAE values
  Eigen::VectorXd returns;     // advantages + values
  Eigen::VectorXd normalized;  // mean 0, std 1 over the batch
};

Advantages compute_gae(const RolloutBatch& batch, double gamma, double lambda);

/// One row per parameter, one column per sample: advantage(i) * grad log pi(a_i|s_i).
Eigen::MatrixXd per_sample_policy_gradients(const MdpSpec& mdp, const RolloutBatch& batch,
                                            const ThetaParams& theta, double beta,
                                            const Eigen::VectorXd& weights);

/// Mean over parameter coordinates of the unbiased across-sample variance.
double grad_variance(const Eigen::MatrixXd& per_sample);

enum class OptimizerKind { sgd, adam };

/// Minimizing optimizer over a flat parameter vector.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr, Eigen::Index size);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  OptimizerKind kind_ = OptimizerKind::adam;
  double lr_ = 3e-4;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-5;
  long long t_ = 0;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
};

struct PpoConfig {
  double clip = 0.2;  // +infinity disables clipping
  int epochs = 10;
  int minibatches = 4;
  double lr = 3e-4;
  double ent_coef = 0.01;
  double vf_coef = 0.5;
  double gamma = 0.99;
  double lambda = 0.95;
  double max_grad_norm = 0.5;  // <= 0 disables clipping of the joint norm
  OptimizerKind optimizer = OptimizerKind::adam;
};

struct TrainState {
  ThetaParams policy;
  CriticParams critic;
  Optimizer policy_opt;
  Optimizer critic_opt;
};

struct GradientStats {
  double mean_grad_norm = 0.0;
  double grad_variance = 0.0;
  std::size_t batch_size = 0;
  int depth = 0;
  double wall_clock_s = 0.0;
  std::uint64_t env_steps = 0;
  std::uint64_t model_steps = 0;
};

/// Gradient of the clipped-surrogate loss (negated objective, averaged over
/// `indices`) with respect to the policy parameters, for the given
/// advantages. Entropy bonus included with weight ent_coef.
Eigen::VectorXd ppo_policy_loss_grad(const MdpSpec& mdp, const RolloutBatch& batch, const ThetaParams& theta,
                                     double beta, const Eigen::VectorXd& advantages,
                                     std::span<const std::size_t> indices, const PpoConfig& config,
                                     double* loss = nullptr);

/// Clipped-surrogate PPO update: `epochs` passes of shuffled minibatch
/// descent. New log-probabilities come from re-evaluating the cached
/// expansions under the current parameters. Gradient statistics are taken
/// once, on the full batch at the collection parameters.
GradientStats ppo_update(const MdpSpec& mdp, const RolloutBatch& batch, const PolicyMode& mode,
                         const PpoConfig& config, TrainState& state, Rng& rng);

enum class Algorithm { reinforce, ppo };

struct TrainConfig {
  Algorithm algorithm = Algorithm::ppo;
  PolicyMode policy;
  PpoConfig ppo;
  std::vector<int> hidden{64, 64};
  HeadMode head_mode = HeadMode::per_action;
  int workers = 1;
  int steps_per_rollout = 128;
  std::uint64_t total_env_steps = 100'000;
  double wall_clock_budget_s = 0.0;  // <= 0: unlimited
  std::uint64_t seed = 0;
  int return_window = 20;
  std::optional<double> target_return;  // stop once the windowed mean reaches it
  bool deterministic_clock = false;     // record 0 instead of elapsed seconds
};

struct UpdateRecord {
  double wall_clock_s = 0.0;
  std::uint64_t env_steps = 0;
  std::uint64_t model_steps = 0;
  int update_idx = 0;
  double mean_episode_return = std::numeric_limits<double>::quiet_NaN();
  double grad_variance = 0.0;
  double mean_grad_norm = 0.0;
  int depth = 0;
  double beta = 0.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<UpdateRecord> records;
  bool reached_target = false;
};

/// Full training run. `on_update` sees each record as it is produced and may
/// return false to stop early.
TrainResult train(const MdpSpec& mdp, const TrainConfig& config,
                  const std::function<bool(const UpdateRecord&)>& on_update = {});

}  // namespace stm
