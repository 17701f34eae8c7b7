#include "stm/tree.hpp"

#include "stm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace stm {

namespace {

struct Node {
  std::vector<Action> path;
  State state;
  double reward;
};

// R + gamma^t * max_head w(s, .) for one node per feature column.
Eigen::VectorXd score_columns(const ThetaParams& theta, const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& rewards, int t, double gamma) {
  const Eigen::MatrixXd heads = forward_batch(theta, features);
  const double scale = std::pow(gamma, t);
  return rewards + scale * heads.colwise().maxCoeff().transpose();
}

void prune(std::vector<Node>& frontier, int t, int width, int action_count, const MdpSpec& mdp,
           const ThetaParams& theta, double gamma) {
  const auto n = static_cast<Eigen::Index>(frontier.size());
  Eigen::MatrixXd features = Eigen::MatrixXd::Zero(feature_dim(mdp), n);
  Eigen::VectorXd rewards(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    features.col(i) = encode_features(mdp, frontier[static_cast<std::size_t>(i)].state);
    rewards(i) = frontier[static_cast<std::size_t>(i)].reward;
  }
  const Eigen::VectorXd scores = score_columns(theta, features, rewards, t, gamma);

  std::vector<std::size_t> rank(frontier.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });

  const std::size_t quota = static_cast<std::size_t>(width / action_count);
  std::vector<std::size_t> per_action(static_cast<std::size_t>(action_count), 0);
  std::vector<bool> keep(frontier.size(), false);
  std::size_t kept = 0;
  for (std::size_t i : rank) {
    auto& c = per_action[static_cast<std::size_t>(frontier[i].path.front())];
    if (c < quota) {
      ++c;
      keep[i] = true;
      ++kept;
    }
  }
  for (std::size_t i : rank) {
    if (kept >= static_cast<std::size_t>(width)) break;
    if (!keep[i]) {
      keep[i] = true;
      ++kept;
    }
  }

  std::vector<Node> survivors;
  survivors.reserve(kept);
  for (std::size_t i = 0; i < frontier.size(); ++i)
    if (keep[i]) survivors.push_back(std::move(frontier[i]));
  frontier = std::move(survivors);
}

ExpansionResult expand(const DeterminizedModel& model, State root, int depth, double gamma,
                       std::optional<int> width, const ThetaParams* theta) {
  const MdpSpec& mdp = model.base();
  mdp.check_state(root);
  if (depth < 0) throw std::invalid_argument("expansion depth must be non-negative");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0, 1)");
  const int A = model.action_count();

  ExpansionResult result;
  result.root_state = root;
  result.depth = depth;
  result.gamma = gamma;
  result.action_count = A;
  result.width_limit = width;

  std::vector<Node> frontier{{{}, root, 0.0}};
  std::vector<Leaf> leaves;
  double discount = 1.0;  // gamma^(t-1) while expanding level t
  for (int t = 1; t <= depth; ++t) {
    std::vector<Node> next;
    next.reserve(frontier.size() * static_cast<std::size_t>(A));
    for (const Node& node : frontier) {
      for (Action a = 0; a < A; ++a) {
        const auto [s, r] = model.successor(node.state, a);
        ++result.model_steps;
        Node child{node.path, s, node.reward + discount * r};
        child.path.push_back(a);
        if (t < depth && mdp.is_terminal(s)) {
          leaves.push_back(Leaf{child.path.front(), std::move(child.path), s, kNoAction, child.reward, true});
        } else {
          next.push_back(std::move(child));
        }
      }
    }
    frontier = std::move(next);
    discount *= gamma;
    if (width && frontier.size() > static_cast<std::size_t>(*width))
      prune(frontier, t, *width, A, mdp, *theta, gamma);
  }

  for (const Node& node : frontier)
    for (Action a = 0; a < A; ++a)
      leaves.push_back(Leaf{depth == 0 ? a : node.path.front(), node.path, node.state, a, node.reward, false});

  std::sort(leaves.begin(), leaves.end(), [](const Leaf& x, const Leaf& y) {
    if (x.action_path != y.action_path) return x.action_path < y.action_path;
    return x.leaf_action < y.leaf_action;
  });

  result.group_offsets.assign(static_cast<std::size_t>(A) + 1, 0);
  for (const Leaf& leaf : leaves) ++result.group_offsets[static_cast<std::size_t>(leaf.root_action) + 1];
  for (std::size_t a = 0; a < static_cast<std::size_t>(A); ++a) {
    if (result.group_offsets[a + 1] == 0)
      throw InvariantViolation("root action " + std::to_string(a) + " has no leaves");
    result.group_offsets[a + 1] += result.group_offsets[a];
  }
  result.leaves = std::move(leaves);
  return result;
}

}  // namespace

ExpansionResult expand_exhaustive(const DeterminizedModel& model, State root, int depth, double gamma) {
  return expand(model, root, depth, gamma, std::nullopt, nullptr);
}

ExpansionResult expand_pruned(const DeterminizedModel& model, State root, int depth, double gamma, int width,
                              const ThetaParams& theta, double /*beta*/) {
  const int A = model.action_count();
  if (width < A)
    throw ConfigError("width limit " + std::to_string(width) + " is smaller than the action count " +
                      std::to_string(A));
  validate_heads(theta, A);
  if (theta.input_dim() != feature_dim(model.base()))
    throw std::invalid_argument("network input does not match the feature dimension");
  return expand(model, root, depth, gamma, width, &theta);
}

double score_node(const ThetaParams& theta, const Eigen::VectorXd& node_features, double accumulated_reward,
                  int t, double /*beta*/, double gamma) {
  return score_columns(theta, node_features, Eigen::VectorXd::Constant(1, accumulated_reward), t, gamma)(0);
}

}  // namespace stm
