#include "stm/mdp.hpp"

#include "stm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace stm {

namespace {

constexpr double kStochasticTol = 1e-9;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

MdpSpec::MdpSpec(int state_count, int action_count,
                 std::vector<std::vector<Transition>> transitions,
                 Eigen::MatrixXd reward, double discount,
                 Eigen::VectorXd initial_distribution,
                 std::vector<bool> terminal_states, int horizon_cap)
    : state_count_(state_count),
      action_count_(action_count),
      transitions_(std::move(transitions)),
      reward_(std::move(reward)),
      discount_(discount),
      initial_(std::move(initial_distribution)),
      terminal_(std::move(terminal_states)),
      horizon_cap_(horizon_cap) {
  if (state_count_ <= 0 || action_count_ <= 0)
    throw std::invalid_argument("MdpSpec: state and action counts must be positive");
  const auto rows = static_cast<std::size_t>(state_count_) * static_cast<std::size_t>(action_count_);
  if (transitions_.size() != rows)
    throw std::invalid_argument("MdpSpec: transition table must have S*A rows");
  if (reward_.rows() != state_count_ || reward_.cols() != action_count_)
    throw std::invalid_argument("MdpSpec: reward matrix must be S x A");
  if (!(discount_ > 0.0 && discount_ < 1.0))
    throw std::invalid_argument("MdpSpec: discount must lie in (0, 1)");
  if (initial_.size() != state_count_)
    throw std::invalid_argument("MdpSpec: initial distribution must have S entries");
  if (terminal_.size() != static_cast<std::size_t>(state_count_))
    throw std::invalid_argument("MdpSpec: terminal flags must have S entries");
  if (horizon_cap_ <= 0) throw std::invalid_argument("MdpSpec: horizon cap must be positive");

  for (auto& row : transitions_) {
    std::map<State, double> merged;
    for (const auto& tr : row) {
      if (tr.next_state < 0 || tr.next_state >= state_count_)
        throw std::invalid_argument("MdpSpec: successor state out of range");
      if (!(tr.probability >= 0.0 && tr.probability <= 1.0))
        throw std::invalid_argument("MdpSpec: transition probability outside [0, 1]");
      merged[tr.next_state] += tr.probability;
    }
    row.clear();
    double total = 0.0;
    for (const auto& [next, p] : merged) {
      if (p > 0.0) row.push_back({next, p});
      total += p;
    }
    if (row.empty() || std::abs(total - 1.0) > kStochasticTol)
      throw std::invalid_argument("MdpSpec: transition row does not sum to 1");
  }

  if (!reward_.allFinite() || reward_.minCoeff() < 0.0 || reward_.maxCoeff() > 1.0)
    throw std::invalid_argument("MdpSpec: rewards must lie in [0, 1]");
  if (!initial_.allFinite() || initial_.minCoeff() < 0.0 ||
      std::abs(initial_.sum() - 1.0) > kStochasticTol)
    throw std::invalid_argument("MdpSpec: initial distribution must be a probability vector");

  for (State s = 0; s < state_count_; ++s) {
    if (!is_terminal(s)) continue;
    for (Action a = 0; a < action_count_; ++a) {
      const auto row = this->transitions(s, a);
      if (row.size() != 1 || row[0].next_state != s || reward_(s, a) != 0.0)
        throw std::invalid_argument("MdpSpec: terminal state " + std::to_string(s) +
                                    " must be absorbing with zero reward");
    }
  }
}

std::span<const Transition> MdpSpec::transitions(State s, Action a) const {
  check_state(s);
  check_action(a);
  return transitions_[static_cast<std::size_t>(s) * static_cast<std::size_t>(action_count_) +
                      static_cast<std::size_t>(a)];
}

void MdpSpec::check_state(State s) const {
  if (s < 0 || s >= state_count_)
    throw std::out_of_range("state " + std::to_string(s) + " out of range");
}

void MdpSpec::check_action(Action a) const {
  if (a < 0 || a >= action_count_)
    throw std::out_of_range("action " + std::to_string(a) + " out of range");
}

std::vector<Successor> exact_successors(const MdpSpec& mdp, State s, Action a) {
  const auto row = mdp.transitions(s, a);
  std::vector<Successor> out;
  out.reserve(row.size());
  for (const auto& tr : row) out.push_back({tr.next_state, tr.probability, mdp.reward(s, a)});
  return out;
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int sample_categorical(std::span<const double> probs, Rng& rng) {
  if (probs.empty()) throw std::invalid_argument("sample_categorical: empty distribution");
  const double u = uniform01(rng);
  double cumulative = 0.0;
  int last_positive = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    cumulative += probs[i];
    if (u < cumulative) return last_positive;
  }
  if (last_positive < 0) throw std::invalid_argument("sample_categorical: no positive mass");
  return last_positive;  // rounding slack in the tail
}

StepOutcome step(const MdpSpec& mdp, State s, Action a, Rng& rng, int t) {
  const auto row = mdp.transitions(s, a);
  State next = row.front().next_state;
  if (row.size() > 1) {
    std::vector<double> probs(row.size());
    std::transform(row.begin(), row.end(), probs.begin(), [](const Transition& tr) { return tr.probability; });
    next = row[static_cast<std::size_t>(sample_categorical(probs, rng))].next_state;
  }
  const bool done = mdp.is_terminal(next) || t >= mdp.horizon_cap() - 1;
  return {next, mdp.reward(s, a), done};
}

State reset(const MdpSpec& mdp, Rng& rng) {
  const auto& init = mdp.initial_distribution();
  return sample_categorical(std::span<const double>(init.data(), static_cast<std::size_t>(init.size())), rng);
}

Eigen::VectorXd encode_features(const MdpSpec& mdp, State s) {
  mdp.check_state(s);
  return Eigen::VectorXd::Unit(mdp.state_count(), s);
}

MdpSpec build_chain(int n, double reward_at_end, double discount, int horizon_cap) {
  if (n < 2) throw std::invalid_argument("build_chain: n must be at least 2");
  constexpr int A = 2;
  std::vector<std::vector<Transition>> tr(static_cast<std::size_t>(n * A));
  Eigen::MatrixXd reward = Eigen::MatrixXd::Zero(n, A);
  std::vector<bool> terminal(static_cast<std::size_t>(n), false);
  terminal.back() = true;
  for (State s = 0; s < n; ++s) {
    if (s == n - 1) {
      tr[static_cast<std::size_t>(s * A + 0)] = {{s, 1.0}};
      tr[static_cast<std::size_t>(s * A + 1)] = {{s, 1.0}};
      continue;
    }
    tr[static_cast<std::size_t>(s * A + 0)] = {{std::max(s - 1, 0), 1.0}};
    tr[static_cast<std::size_t>(s * A + 1)] = {{s + 1, 1.0}};
  }
  reward(n - 2, 1) = reward_at_end;
  return MdpSpec(n, A, std::move(tr), std::move(reward), discount,
                 Eigen::VectorXd::Unit(n, 0), std::move(terminal), horizon_cap);
}

MdpSpec build_gridworld(const GridSpec& g) {
  if (g.width <= 0 || g.height <= 0) throw ConfigError("gridworld: width and height must be positive");
  if (!(g.slip >= 0.0 && g.slip < 1.0)) throw ConfigError("gridworld: slip must lie in [0, 1)");
  const auto inside = [&](GridCell c) { return c.row >= 0 && c.row < g.height && c.col >= 0 && c.col < g.width; };
  const auto id = [&](GridCell c) { return c.row * g.width + c.col; };
  if (!inside(g.goal)) throw ConfigError("gridworld: goal outside the grid");
  for (const auto& p : g.pits) {
    if (!inside(p)) throw ConfigError("gridworld: pit outside the grid");
    if (p == g.goal) throw ConfigError("gridworld: goal cannot be a pit");
  }
  if (g.starts.empty()) throw ConfigError("gridworld: at least one start cell required");

  const int S = g.width * g.height;
  constexpr int A = 4;
  std::vector<bool> terminal(static_cast<std::size_t>(S), false);
  terminal[static_cast<std::size_t>(id(g.goal))] = true;
  for (const auto& p : g.pits) terminal[static_cast<std::size_t>(id(p))] = true;

  Eigen::VectorXd init = Eigen::VectorXd::Zero(S);
  for (const auto& c : g.starts) {
    if (!inside(c)) throw ConfigError("gridworld: start outside the grid");
    if (terminal[static_cast<std::size_t>(id(c))]) throw ConfigError("gridworld: start cell is terminal");
    init(id(c)) += 1.0 / static_cast<double>(g.starts.size());
  }

  constexpr int dr[A] = {-1, 0, 1, 0};
  constexpr int dc[A] = {0, 1, 0, -1};
  const auto move = [&](GridCell c, int a) {
    GridCell n{c.row + dr[a], c.col + dc[a]};
    return inside(n) ? n : c;
  };

  std::vector<std::vector<Transition>> tr(static_cast<std::size_t>(S * A));
  Eigen::MatrixXd reward = Eigen::MatrixXd::Zero(S, A);
  for (int row = 0; row < g.height; ++row) {
    for (int col = 0; col < g.width; ++col) {
      const GridCell c{row, col};
      const State s = id(c);
      for (int a = 0; a < A; ++a) {
        auto& out = tr[static_cast<std::size_t>(s * A + a)];
        if (terminal[static_cast<std::size_t>(s)]) {
          out = {{s, 1.0}};
          continue;
        }
        out.push_back({id(move(c, a)), 1.0 - g.slip});
        if (g.slip > 0.0) {
          out.push_back({id(move(c, (a + 1) % A)), g.slip / 2.0});
          out.push_back({id(move(c, (a + 3) % A)), g.slip / 2.0});
        }
        for (const auto& t : out)
          if (t.next_state == id(g.goal)) reward(s, a) += t.probability;
      }
    }
  }
  reward = reward.cwiseMin(1.0);
  return MdpSpec(S, A, std::move(tr), std::move(reward), g.discount, std::move(init),
                 std::move(terminal), g.horizon_cap);
}

GridSpec parse_grid_text(const std::string& text) {
  GridSpec g;
  g.starts.clear();
  std::vector<std::string> rows;
  bool have_goal = false;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (const auto eq = t.find('='); eq != std::string::npos) {
      if (!rows.empty()) throw ConfigError("grid file line " + std::to_string(line_no) + ": header after grid rows");
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      try {
        if (key == "slip") g.slip = std::stod(value);
        else throw ConfigError("grid file line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      } catch (const std::logic_error&) {
        throw ConfigError("grid file line " + std::to_string(line_no) + ": bad value for '" + key + "'");
      }
      continue;
    }
    if (!rows.empty() && t.size() != rows.front().size())
      throw ConfigError("grid file line " + std::to_string(line_no) + ": ragged row");
    const int r = static_cast<int>(rows.size());
    for (int c = 0; c < static_cast<int>(t.size()); ++c) {
      switch (t[static_cast<std::size_t>(c)]) {
        case '.': break;
        case 'P': g.pits.push_back({r, c}); break;
        case 'S': g.starts.push_back({r, c}); break;
        case 'G':
          if (have_goal) throw ConfigError("grid file: more than one goal");
          g.goal = {r, c};
          have_goal = true;
          break;
        default:
          throw ConfigError("grid file line " + std::to_string(line_no) + ": unexpected character '" +
                            std::string(1, t[static_cast<std::size_t>(c)]) + "'");
      }
    }
    rows.push_back(t);
  }
  if (rows.empty()) throw ConfigError("grid file: no grid rows");
  if (!have_goal) throw ConfigError("grid file: missing goal 'G'");
  if (g.starts.empty()) throw ConfigError("grid file: missing start 'S'");
  g.height = static_cast<int>(rows.size());
  g.width = static_cast<int>(rows.front().size());
  return g;
}

GridSpec load_grid_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open grid file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_grid_text(buf.str());
}

GridSpec gridworld5_layout() {
  return parse_grid_text(
      "S....\n"
      "..P.P\n"
      "...P.\n"
      ".....\n"
      "....G\n");
}

MdpSpec make_preset(const std::string& name) {
  if (name == "chain") return build_chain(10, 1.0);
  if (name == "gridworld5") return build_gridworld(gridworld5_layout());
  if (name == "gridworld5_slip") {
    auto g = gridworld5_layout();
    g.slip = 0.2;
    return build_gridworld(g);
  }
  throw ConfigError("unknown environment preset '" + name + "'");
}

std::vector<std::string> preset_names() { return {"chain", "gridworld5", "gridworld5_slip"}; }

bool is_deterministic(const MdpSpec& mdp) {
  for (State s = 0; s < mdp.state_count(); ++s)
    for (Action a = 0; a < mdp.action_count(); ++a)
      if (mdp.transitions(s, a).size() != 1) return false;
  return true;
}

DeterminizedModel::DeterminizedModel(const MdpSpec& base, Mode mode) : base_(&base), mode_(mode) {
  const int S = base.state_count();
  const int A = base.action_count();
  next_.resize(static_cast<std::size_t>(S) * static_cast<std::size_t>(A));
  for (State s = 0; s < S; ++s) {
    for (Action a = 0; a < A; ++a) {
      const auto row = base.transitions(s, a);
      if (mode == Mode::exact_deterministic && row.size() != 1)
        throw std::invalid_argument("DeterminizedModel: kernel row (" + std::to_string(s) + ", " +
                                    std::to_string(a) + ") is not degenerate");
      // Rows are ascending by state, so strict '>' keeps the lowest id on ties.
      const Transition* best = &row[0];
      for (const auto& t : row)
        if (t.probability > best->probability) best = &t;
      next_[static_cast<std::size_t>(s * A + a)] = best->next_state;
    }
  }
}

DeterminizedModel DeterminizedModel::for_planning(const MdpSpec& base) {
  return DeterminizedModel(base, is_deterministic(base) ? Mode::exact_deterministic : Mode::most_likely_successor);
}

std::pair<State, double> DeterminizedModel::successor(State s, Action a) const {
  base_->check_state(s);
  base_->check_action(a);
  return {next_[static_cast<std::size_t>(s * base_->action_count() + a)], base_->reward(s, a)};
}

}  // namespace stm
