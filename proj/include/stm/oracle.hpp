#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"

#include <functional>
#include <vector>

// Brute-force reference computations. Nothing here depends on the tree
// engine or the policy module.
namespace stm::oracle {

struct ValueTable {
  Eigen::VectorXd values;
  double residual = 0.0;
  int iterations = 0;
  std::vector<double> residual_history;
};

// Synchronous Bellman optimality backups until the sup-norm residual is <= tol.
ValueTable value_iteration(const MdpSpec& mdp, double tol);

// Greedy policy w.r.t. a value table; ties go to the lowest action id.
std::vector<Action> greedy_policy(const MdpSpec& mdp, const Eigen::VectorXd& values);

// policy is S x A with rows summing to 1.
ValueTable policy_evaluation(const MdpSpec& mdp, const Eigen::MatrixXd& policy, double tol);

/// Literal enumeration of every action sequence (a_0, ..., a_d) over the
/// determinized model. A sequence that hits a terminal state after k < d steps
/// contributes exp(beta * R) once (for its representative with
/// a_k = ... = a_d = 0) and no bootstrap term. Throws when A^(d+1) > 1e6.
Eigen::VectorXd brute_force_softtreemax(const MdpSpec& mdp, const DeterminizedModel& model, State root,
                                        const ThetaParams& theta, double beta, double gamma, int depth);

/// Central differences of f at x, one coordinate at a time.
Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                 double step);

}  // namespace stm::oracle
