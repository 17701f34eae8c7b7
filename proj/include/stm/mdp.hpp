#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace stm {

using State = int;
using Action = int;
using Rng = std::mt19937_64;

struct Transition {
  State next_state;
  double probability;
};

struct Successor {
  State next_state;
  double probability;
  double reward;
};

struct StepOutcome {
  State next_state;
  double reward;
  bool done;
};

/// Finite discounted MDP with an exact, enumerable transition kernel.
///
/// Immutable after construction; the constructor canonicalizes every kernel
/// row (ascending next_state, duplicates merged) and rejects kernels that are
/// not stochastic, rewards outside [0,1], gamma outside (0,1) and terminal
/// states that are not absorbing with zero reward.
class MdpSpec {
 public:
  MdpSpec(int state_count, int action_count,
          std::vector<std::vector<Transition>> transitions,
          Eigen::MatrixXd reward, double discount,
          Eigen::VectorXd initial_distribution,
          std::vector<bool> terminal_states, int horizon_cap);

  int state_count() const { return state_count_; }
  int action_count() const { return action_count_; }
  double discount() const { return discount_; }
  int horizon_cap() const { return horizon_cap_; }
  const Eigen::MatrixXd& reward() const { return reward_; }
  double reward(State s, Action a) const { return reward_(s, a); }
  const Eigen::VectorXd& initial_distribution() const { return initial_; }
  bool is_terminal(State s) const { return terminal_[static_cast<std::size_t>(s)]; }

  // Kernel row for (s, a), ascending by next_state.
  std::span<const Transition> transitions(State s, Action a) const;

  void check_state(State s) const;
  void check_action(Action a) const;

 private:
  int state_count_;
  int action_count_;
  std::vector<std::vector<Transition>> transitions_;  // index s * A + a
  Eigen::MatrixXd reward_;
  double discount_;
  Eigen::VectorXd initial_;
  std::vector<bool> terminal_;
  int horizon_cap_;
};

inline constexpr int kDefaultHorizonCap = 200;

std::vector<Successor> exact_successors(const MdpSpec& mdp, State s, Action a);

// Uniform double in [0, 1) built from the top 53 bits of one draw.
double uniform01(Rng& rng);

// Index drawn from a probability vector by inverse CDF; never returns an
// index with zero probability.
int sample_categorical(std::span<const double> probs, Rng& rng);

/// Samples one transition. `t` is the index of this step within the episode;
/// the episode is truncated (done) once t reaches horizon_cap - 1.
StepOutcome step(const MdpSpec& mdp, State s, Action a, Rng& rng, int t);

State reset(const MdpSpec& mdp, Rng& rng);

Eigen::VectorXd encode_features(const MdpSpec& mdp, State s);
inline int feature_dim(const MdpSpec& mdp) { return mdp.state_count(); }

// Deterministic left/right chain of n states. Action 0 moves left, action 1
// moves right; the step into the rightmost (terminal) state pays
// reward_at_end, everything else pays 0. Starts at state 0.
MdpSpec build_chain(int n, double reward_at_end, double discount = 0.99,
                    int horizon_cap = kDefaultHorizonCap);

struct GridCell {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridCell&, const GridCell&) = default;
};

enum GridAction : Action { kUp = 0, kRight = 1, kDown = 2, kLeft = 3 };

struct GridSpec {
  int width = 5;
  int height = 5;
  std::vector<GridCell> pits;
  GridCell goal{4, 4};
  std::vector<GridCell> starts{{0, 0}};  // uniform initial distribution
  double slip = 0.0;
  double discount = 0.99;
  int horizon_cap = kDefaultHorizonCap;
};

/// Four-action gridworld; state id = row * width + col. The intended move
/// happens with probability 1 - slip and each perpendicular move with
/// slip / 2. Moves off the grid leave the agent in place. Entering the goal
/// pays 1 (reward(s, a) is the probability of entering it); goal and pits are
/// terminal.
MdpSpec build_gridworld(const GridSpec& grid);

// Plain-text grid layout: an optional `slip = <p>` header line, '#'
// comments, then rows over {'.', 'P', 'G', 'S'}.
GridSpec parse_grid_text(const std::string& text);
GridSpec load_grid_file(const std::string& path);

// Built-in environments: "chain" (10 states), "gridworld5" (deterministic
// 5x5 with pits), "gridworld5_slip" (same layout, slip 0.2).
MdpSpec make_preset(const std::string& name);
std::vector<std::string> preset_names();
GridSpec gridworld5_layout();

/// Single-successor forward model used for tree expansion.
///
/// exact_deterministic requires every kernel row to be degenerate;
/// most_likely_successor keeps the highest-probability successor, ties to
/// the lowest state id. The reward is always reward(s, a).
class DeterminizedModel {
 public:
  enum class Mode { exact_deterministic, most_likely_successor };

  explicit DeterminizedModel(const MdpSpec& base, Mode mode = Mode::exact_deterministic);

  // Picks exact_deterministic when the kernel allows it.
  static DeterminizedModel for_planning(const MdpSpec& base);

  const MdpSpec& base() const { return *base_; }
  Mode mode() const { return mode_; }
  std::pair<State, double> successor(State s, Action a) const;
  int action_count() const { return base_->action_count(); }

 private:
  const MdpSpec* base_;
  Mode mode_;
  std::vector<State> next_;  // index s * A + a
};

bool is_deterministic(const MdpSpec& mdp);

}  // namespace stm
