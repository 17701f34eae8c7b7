#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"
#include "stm/tree.hpp"

#include <span>
#include <unordered_map>
#include <vector>

namespace stm {

/// Root-action distribution of the tree policy plus the per-leaf quantities
/// its gradient reuses.
///
///   leaf_logits(h)    = beta * (R_h + gamma^d * w(s_h, a_h))   (no w term when terminated)
///   global_weights(h) = exp(l_h) / sum_j exp(l_j)
///   group_weights(h)  = exp(l_h) / sum_{j in group(h)} exp(l_j)
struct PolicyDecision {
  Eigen::VectorXd probs;
  Eigen::VectorXd log_probs;
  Eigen::VectorXd leaf_logits;
  Eigen::VectorXd global_weights;
  Eigen::VectorXd group_weights;
  double beta = 1.0;
  int depth = 0;
  State root_state = 0;
  std::size_t leaf_count = 0;

  int action_count() const { return static_cast<int>(probs.size()); }
};

/// Network outputs for every distinct state referenced by a set of
/// expansions, computed with one batched forward pass.
class LeafValues {
 public:
  LeafValues(const MdpSpec& mdp, const ThetaParams& theta, std::span<const ExpansionResult* const> expansions);
  LeafValues(const MdpSpec& mdp, const ThetaParams& theta, const ExpansionResult& expansion);

  // w(s, a) under the network's head mode.
  double operator()(State s, Action leaf_action) const;

 private:
  HeadMode head_mode_;
  std::unordered_map<State, Eigen::Index> column_;
  Eigen::MatrixXd values_;
};

/// Accumulates sum_h c_h * grad w(s_h, a_h) over many leaves and evaluates
/// it with a single backward pass over the distinct states involved.
class LeafGradient {
 public:
  LeafGradient(const MdpSpec& mdp, const ThetaParams& theta);

  // Adds scale * coefficients(h) for every non-terminated leaf h.
  void add(const ExpansionResult& expansion, const Eigen::VectorXd& coefficients, double scale = 1.0);
  void add_leaf(State s, Action leaf_action, double coefficient);
  Eigen::VectorXd gradient() const;

 private:
  const MdpSpec* mdp_;
  const ThetaParams* theta_;
  std::unordered_map<State, std::size_t> column_;
  std::vector<State> states_;
  std::vector<Eigen::VectorXd> cotangents_;
};

/// probs(a) proportional to exp(beta * w(s, a)); max-subtracted.
Eigen::VectorXd softmax_probs(const ThetaParams& theta, const Eigen::VectorXd& features, double beta);

PolicyDecision softtreemax_probs(const MdpSpec& mdp, const ExpansionResult& expansion, const ThetaParams& theta,
                                 double beta);
PolicyDecision softtreemax_probs(const ExpansionResult& expansion, const LeafValues& values, double beta);

/// Coefficients c_h with grad log pi(a|s) = sum_h c_h * grad w(s_h, a_h):
/// c_h = beta * gamma^d * ([h in group(a)] * u_h - v_h), zero for terminated leaves.
Eigen::VectorXd logprob_leaf_coefficients(const PolicyDecision& decision, const ExpansionResult& expansion,
                                          Action a);

/// Same representation for the gradient of the policy entropy:
/// c_h = -beta * gamma^d * v_h * (log pi(a_h) + H).
Eigen::VectorXd entropy_leaf_coefficients(const PolicyDecision& decision, const ExpansionResult& expansion);

Eigen::VectorXd softtreemax_logprob_grad(const MdpSpec& mdp, const PolicyDecision& decision,
                                         const ExpansionResult& expansion, const ThetaParams& theta, Action a);

Action sample_action(const PolicyDecision& decision, Rng& rng);
Action greedy_action(const PolicyDecision& decision);
double entropy(const PolicyDecision& decision);
double entropy(const Eigen::VectorXd& probs);

}  // namespace stm
