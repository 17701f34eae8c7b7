#include "stm/oracle.hpp"

#include "stm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace stm::oracle {

namespace {

constexpr int kMaxIterations = 1'000'000;

double expected_next(const MdpSpec& mdp, State s, Action a, const Eigen::VectorXd& v) {
  double acc = 0.0;
  for (const auto& tr : mdp.transitions(s, a)) acc += tr.probability * v(tr.next_state);
  return acc;
}

}  // namespace

ValueTable value_iteration(const MdpSpec& mdp, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be positive");
  const int S = mdp.state_count();
  const double g = mdp.discount();
  ValueTable out;
  out.values = Eigen::VectorXd::Zero(S);
  // Iterate until the residual of the returned table itself is <= tol.
  for (out.iterations = 0; out.iterations < kMaxIterations; ++out.iterations) {
    Eigen::VectorXd next(S);
    for (State s = 0; s < S; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      for (Action a = 0; a < mdp.action_count(); ++a)
        best = std::max(best, mdp.reward(s, a) + g * expected_next(mdp, s, a, out.values));
      next(s) = best;
    }
    out.residual = (next - out.values).cwiseAbs().maxCoeff();
    out.residual_history.push_back(out.residual);
    if (out.residual <= tol) return out;
    out.values = std::move(next);
  }
  throw NumericError("value_iteration did not converge");
}

std::vector<Action> greedy_policy(const MdpSpec& mdp, const Eigen::VectorXd& values) {
  std::vector<Action> pi(static_cast<std::size_t>(mdp.state_count()), 0);
  for (State s = 0; s < mdp.state_count(); ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (Action a = 0; a < mdp.action_count(); ++a) {
      const double q = mdp.reward(s, a) + mdp.discount() * expected_next(mdp, s, a, values);
      if (q > best + 1e-12) {
        best = q;
        pi[static_cast<std::size_t>(s)] = a;
      }
    }
  }
  return pi;
}

ValueTable policy_evaluation(const MdpSpec& mdp, const Eigen::MatrixXd& policy, double tol) {
  if (!(tol > 0.0)) throw std::invalid_argument("policy_evaluation: tol must be positive");
  const int S = mdp.state_count();
  const int A = mdp.action_count();
  if (policy.rows() != S || policy.cols() != A) throw std::invalid_argument("policy must be S x A");
  for (State s = 0; s < S; ++s)
    if (policy.row(s).minCoeff() < 0.0 || std::abs(policy.row(s).sum() - 1.0) > 1e-9)
      throw std::invalid_argument("policy row " + std::to_string(s) + " is not a distribution");
  const double g = mdp.discount();
  ValueTable out;
  out.values = Eigen::VectorXd::Zero(S);
  for (out.iterations = 0; out.iterations < kMaxIterations; ++out.iterations) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(S);
    for (State s = 0; s < S; ++s)
      for (Action a = 0; a < A; ++a)
        if (policy(s, a) > 0.0)
          next(s) += policy(s, a) * (mdp.reward(s, a) + g * expected_next(mdp, s, a, out.values));
    out.residual = (next - out.values).cwiseAbs().maxCoeff();
    out.residual_history.push_back(out.residual);
    if (out.residual <= tol) return out;
    out.values = std::move(next);
  }
  throw NumericError("policy_evaluation did not converge");
}

Eigen::VectorXd brute_force_softtreemax(const MdpSpec& mdp, const DeterminizedModel& model, State root,
                                        const ThetaParams& theta, double beta, double gamma, int depth) {
  if (depth < 0) throw std::invalid_argument("depth must be non-negative");
  const int A = mdp.action_count();
  double count = std::pow(static_cast<double>(A), depth + 1);
  if (count > 1e6) throw std::invalid_argument("brute_force_softtreemax: A^(d+1) exceeds 1e6");
  const auto total = static_cast<long long>(count);

  std::vector<double> logits;
  std::vector<Action> first;
  std::vector<Action> seq(static_cast<std::size_t>(depth) + 1);
  for (long long idx = 0; idx < total; ++idx) {
    long long rest = idx;
    for (int k = depth; k >= 0; --k) {
      seq[static_cast<std::size_t>(k)] = static_cast<Action>(rest % A);
      rest /= A;
    }
    State s = root;
    double path = 0.0;
    int ended_at = -1;
    for (int t = 0; t < depth; ++t) {
      const auto [next, r] = model.successor(s, seq[static_cast<std::size_t>(t)]);
      path += std::pow(gamma, t) * r;
      s = next;
      if (t + 1 < depth && mdp.is_terminal(s)) {
        ended_at = t + 1;
        break;
      }
    }
    if (ended_at >= 0) {
      bool representative = true;
      for (int k = ended_at; k <= depth; ++k)
        if (seq[static_cast<std::size_t>(k)] != 0) representative = false;
      if (!representative) continue;
      logits.push_back(beta * path);
    } else {
      const Eigen::VectorXd w = forward(theta, encode_features(mdp, s));
      const Action leaf_action = seq[static_cast<std::size_t>(depth)];
      const double leaf_w = theta.head_mode == HeadMode::per_action ? w(leaf_action) : w(0);
      logits.push_back(beta * (path + std::pow(gamma, depth) * leaf_w));
    }
    first.push_back(seq[0]);
  }

  const double m = *std::max_element(logits.begin(), logits.end());
  Eigen::VectorXd probs = Eigen::VectorXd::Zero(A);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double e = std::exp(logits[i] - m);
    probs(first[i]) += e;
    z += e;
  }
  return probs / z;
}

Eigen::VectorXd finite_diff_grad(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                 double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + step;
    const double up = f(probe);
    probe(i) = x(i) - step;
    const double down = f(probe);
    probe(i) = x(i);
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("finite_diff_grad: non-finite function value");
    grad(i) = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace stm::oracle
