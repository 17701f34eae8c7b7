#pragma once

#include "stm/approximator.hpp"
#include "stm/mdp.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace stm {

inline constexpr Action kNoAction = -1;

/// One trajectory of the expanded tree.
///
/// A trajectory that enters a terminal state at depth k < d stops there:
/// it becomes a single leaf with terminated = true, an action path of length
/// k, leaf_action = kNoAction and no bootstrap term. A terminal reached at
/// exactly depth d is an ordinary leaf.
struct Leaf {
  Action root_action = 0;
  std::vector<Action> action_path;
  State leaf_state = 0;
  Action leaf_action = kNoAction;
  double path_reward = 0.0;
  bool terminated = false;

  friend bool operator==(const Leaf&, const Leaf&) = default;
};

/// Depth-d leaves in canonical order (lexicographic by action path, then
/// leaf action). Because the path starts with the root action, the leaves of
/// each root action form one contiguous group.
struct ExpansionResult {
  State root_state = 0;
  int depth = 0;
  double gamma = 0.0;
  int action_count = 0;
  std::optional<int> width_limit;
  std::vector<Leaf> leaves;
  std::vector<std::size_t> group_offsets;  // action_count + 1 entries
  std::size_t model_steps = 0;             // successor queries made

  std::size_t total_leaves() const { return leaves.size(); }
  std::span<const Leaf> group(Action a) const {
    return std::span<const Leaf>(leaves).subspan(group_offsets[static_cast<std::size_t>(a)],
                                                 group_offsets[static_cast<std::size_t>(a) + 1] -
                                                     group_offsets[static_cast<std::size_t>(a)]);
  }
};

ExpansionResult expand_exhaustive(const DeterminizedModel& model, State root, int depth, double gamma);

/// Breadth-first expansion that keeps at most `width` frontier nodes per
/// level. When a level overflows, every root action keeps its best
/// floor(width / A) nodes (or all of them, if fewer) and the remaining slots
/// go to the best of the rest; ranking is by score_node with ties resolved
/// in canonical order. Throws ConfigError when width < A.
ExpansionResult expand_pruned(const DeterminizedModel& model, State root, int depth, double gamma, int width,
                              const ThetaParams& theta, double beta);

/// Optimistic node score: accumulated_reward + gamma^t * max_head w(s, .).
/// beta does not change the ranking and is not applied.
double score_node(const ThetaParams& theta, const Eigen::VectorXd& node_features, double accumulated_reward,
                  int t, double beta, double gamma);

}  // namespace stm
