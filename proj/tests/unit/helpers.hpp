#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"

#include <algorithm>
#include <random>
#include <vector>

namespace stm::test {

// Random deterministic MDP; the last `terminals` states are absorbing
// terminals. Rewards are drawn from a small set so ties are common.
inline MdpSpec random_deterministic_mdp(std::mt19937_64& rng, int S, int A, int terminals, double gamma = 0.9) {
  std::uniform_int_distribution<int> next(0, S - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<Transition>> kernel(static_cast<std::size_t>(S * A));
  Eigen::MatrixXd reward = Eigen::MatrixXd::Zero(S, A);
  std::vector<bool> terminal(static_cast<std::size_t>(S), false);
  for (int s = S - terminals; s < S; ++s) terminal[static_cast<std::size_t>(s)] = true;
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      if (terminal[static_cast<std::size_t>(s)]) {
        kernel[static_cast<std::size_t>(s * A + a)] = {{s, 1.0}};
        continue;
      }
      kernel[static_cast<std::size_t>(s * A + a)] = {{next(rng), 1.0}};
      reward(s, a) = u(rng);
    }
  Eigen::VectorXd init = Eigen::VectorXd::Zero(S);
  init(0) = 1.0;
  return MdpSpec(S, A, std::move(kernel), reward, gamma, init, terminal, 200);
}

// Random stochastic MDP without terminals.
inline MdpSpec random_stochastic_mdp(std::mt19937_64& rng, int S, int A, double gamma = 0.9) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<Transition>> kernel(static_cast<std::size_t>(S * A));
  Eigen::MatrixXd reward(S, A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) {
      std::vector<Transition> row;
      double total = 0.0;
      for (int k = 0; k < S; ++k) {
        const double p = u(rng);
        row.push_back({k, p});
        total += p;
      }
      for (auto& t : row) t.probability /= total;
      kernel[static_cast<std::size_t>(s * A + a)] = std::move(row);
      reward(s, a) = u(rng);
    }
  Eigen::VectorXd init = Eigen::VectorXd::Constant(S, 1.0 / S);
  return MdpSpec(S, A, std::move(kernel), reward, gamma, init, std::vector<bool>(static_cast<std::size_t>(S), false),
                 200);
}

inline ThetaParams random_theta(const MdpSpec& mdp, std::uint64_t seed, std::vector<int> hidden = {6},
                                HeadMode mode = HeadMode::per_action, double scale = 1.0) {
  const int out = mode == HeadMode::per_action ? mdp.action_count() : 1;
  auto theta = init_params(make_layer_sizes(feature_dim(mdp), hidden, out), mode, seed);
  // Non-zero biases so that every parameter matters.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> n(0.0, 0.3);
  for (Eigen::Index i = 0; i < theta.weights.size(); ++i) theta.weights(i) = scale * (theta.weights(i) + n(rng));
  return theta;
}

// Max-norm relative error of an analytic gradient against finite
// differences. Gradients that vanish identically (|g| < 1e-8) are compared in
// absolute terms instead, since central differences only return roundoff
// (~1e-11) there.
inline double gradient_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  const double diff = (analytic - numeric).cwiseAbs().maxCoeff();
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff());
  if (scale < 1e-8) return diff <= 1e-9 ? 0.0 : diff;
  return diff / scale;
}

}  // namespace stm::test
