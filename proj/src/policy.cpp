#include "stm/policy.hpp"

#include "stm/errors.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace stm {

namespace {

std::string describe_leaf(const Leaf& leaf) {
  std::ostringstream os;
  os << "path [";
  for (std::size_t i = 0; i < leaf.action_path.size(); ++i) os << (i ? " " : "") << leaf.action_path[i];
  os << "] state " << leaf.leaf_state << " action " << leaf.leaf_action;
  return os.str();
}

void check_pair(const PolicyDecision& decision, const ExpansionResult& expansion) {
  if (decision.leaf_count != expansion.total_leaves() || decision.root_state != expansion.root_state ||
      decision.depth != expansion.depth || decision.action_count() != expansion.action_count)
    throw std::invalid_argument("policy decision was not produced from this expansion");
}

}  // namespace

LeafValues::LeafValues(const MdpSpec& mdp, const ThetaParams& theta,
                       std::span<const ExpansionResult* const> expansions)
    : head_mode_(theta.head_mode) {
  validate_heads(theta, mdp.action_count());
  std::vector<State> states;
  for (const ExpansionResult* e : expansions) {
    for (const Leaf& leaf : e->leaves) {
      if (leaf.terminated) continue;
      if (column_.emplace(leaf.leaf_state, static_cast<Eigen::Index>(states.size())).second)
        states.push_back(leaf.leaf_state);
    }
  }
  if (states.empty()) return;
  Eigen::MatrixXd features = Eigen::MatrixXd::Zero(feature_dim(mdp), static_cast<Eigen::Index>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i)
    features.col(static_cast<Eigen::Index>(i)) = encode_features(mdp, states[i]);
  values_ = forward_batch(theta, features);
}

LeafValues::LeafValues(const MdpSpec& mdp, const ThetaParams& theta, const ExpansionResult& expansion)
    : LeafValues(mdp, theta, std::span<const ExpansionResult* const>(std::array{&expansion})) {}

double LeafValues::operator()(State s, Action leaf_action) const {
  const auto it = column_.find(s);
  if (it == column_.end()) throw std::out_of_range("state " + std::to_string(s) + " was not evaluated");
  const int head = head_mode_ == HeadMode::per_action ? leaf_action : 0;
  return values_(head, it->second);
}

LeafGradient::LeafGradient(const MdpSpec& mdp, const ThetaParams& theta) : mdp_(&mdp), theta_(&theta) {
  validate_heads(theta, mdp.action_count());
}

void LeafGradient::add_leaf(State s, Action leaf_action, double coefficient) {
  auto [it, inserted] = column_.emplace(s, states_.size());
  if (inserted) {
    states_.push_back(s);
    cotangents_.push_back(Eigen::VectorXd::Zero(theta_->output_dim()));
  }
  cotangents_[it->second](head_for_action(*theta_, leaf_action)) += coefficient;
}

void LeafGradient::add(const ExpansionResult& expansion, const Eigen::VectorXd& coefficients, double scale) {
  if (coefficients.size() != static_cast<Eigen::Index>(expansion.total_leaves()))
    throw std::invalid_argument("one coefficient per leaf expected");
  for (std::size_t h = 0; h < expansion.leaves.size(); ++h) {
    const Leaf& leaf = expansion.leaves[h];
    if (leaf.terminated) continue;
    add_leaf(leaf.leaf_state, leaf.leaf_action, scale * coefficients(static_cast<Eigen::Index>(h)));
  }
}

Eigen::VectorXd LeafGradient::gradient() const {
  if (states_.empty()) return Eigen::VectorXd::Zero(theta_->weights.size());
  const auto n = static_cast<Eigen::Index>(states_.size());
  Eigen::MatrixXd features = Eigen::MatrixXd::Zero(feature_dim(*mdp_), n);
  Eigen::MatrixXd cotangent(theta_->output_dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    features.col(i) = encode_features(*mdp_, states_[static_cast<std::size_t>(i)]);
    cotangent.col(i) = cotangents_[static_cast<std::size_t>(i)];
  }
  return backward_batch(*theta_, features, cotangent);
}

Eigen::VectorXd softmax_probs(const ThetaParams& theta, const Eigen::VectorXd& features, double beta) {
  const Eigen::VectorXd logits = beta * forward(theta, features);
  if (!logits.allFinite()) throw NumericError("non-finite soft-max logit");
  const Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

PolicyDecision softtreemax_probs(const MdpSpec& mdp, const ExpansionResult& expansion, const ThetaParams& theta,
                                 double beta) {
  return softtreemax_probs(expansion, LeafValues(mdp, theta, expansion), beta);
}

PolicyDecision softtreemax_probs(const ExpansionResult& expansion, const LeafValues& values, double beta) {
  const int A = expansion.action_count;
  const auto H = static_cast<Eigen::Index>(expansion.total_leaves());
  const double bootstrap_scale = std::pow(expansion.gamma, expansion.depth);

  PolicyDecision d;
  d.beta = beta;
  d.depth = expansion.depth;
  d.root_state = expansion.root_state;
  d.leaf_count = expansion.total_leaves();
  d.leaf_logits.resize(H);
  for (Eigen::Index h = 0; h < H; ++h) {
    const Leaf& leaf = expansion.leaves[static_cast<std::size_t>(h)];
    const double weight =
        leaf.terminated ? leaf.path_reward : leaf.path_reward + bootstrap_scale * values(leaf.leaf_state, leaf.leaf_action);
    d.leaf_logits(h) = beta * weight;
    if (!std::isfinite(d.leaf_logits(h))) throw NumericError("non-finite logit at leaf " + describe_leaf(leaf));
  }

  const double global_max = d.leaf_logits.maxCoeff();
  const Eigen::VectorXd e = (d.leaf_logits.array() - global_max).exp();
  const double total = e.sum();
  const double log_total = global_max + std::log(total);
  d.global_weights = e / total;
  d.group_weights.resize(H);
  d.probs.resize(A);
  d.log_probs.resize(A);
  for (Action a = 0; a < A; ++a) {
    const auto begin = static_cast<Eigen::Index>(expansion.group_offsets[static_cast<std::size_t>(a)]);
    const auto size = static_cast<Eigen::Index>(expansion.group_offsets[static_cast<std::size_t>(a) + 1]) - begin;
    if (size == 0) throw InvariantViolation("empty root-action group " + std::to_string(a));
    d.probs(a) = e.segment(begin, size).sum() / total;
    // Group-local shift keeps u and log pi finite even when the group's
    // global mass underflows.
    const double group_max = d.leaf_logits.segment(begin, size).maxCoeff();
    const Eigen::VectorXd eg = (d.leaf_logits.segment(begin, size).array() - group_max).exp();
    const double group_total = eg.sum();
    d.group_weights.segment(begin, size) = eg / group_total;
    d.log_probs(a) = group_max + std::log(group_total) - log_total;
  }
  return d;
}

Eigen::VectorXd logprob_leaf_coefficients(const PolicyDecision& decision, const ExpansionResult& expansion,
                                          Action a) {
  check_pair(decision, expansion);
  if (a < 0 || a >= decision.action_count()) throw std::out_of_range("action out of range");
  const double scale = decision.beta * std::pow(expansion.gamma, expansion.depth);
  Eigen::VectorXd c = -scale * decision.global_weights;
  const auto begin = static_cast<Eigen::Index>(expansion.group_offsets[static_cast<std::size_t>(a)]);
  const auto size = static_cast<Eigen::Index>(expansion.group_offsets[static_cast<std::size_t>(a) + 1]) - begin;
  c.segment(begin, size) += scale * decision.group_weights.segment(begin, size);
  for (std::size_t h = 0; h < expansion.leaves.size(); ++h)
    if (expansion.leaves[h].terminated) c(static_cast<Eigen::Index>(h)) = 0.0;
  return c;
}

Eigen::VectorXd entropy_leaf_coefficients(const PolicyDecision& decision, const ExpansionResult& expansion) {
  check_pair(decision, expansion);
  const double scale = decision.beta * std::pow(expansion.gamma, expansion.depth);
  const double h_ent = entropy(decision);
  Eigen::VectorXd c(static_cast<Eigen::Index>(expansion.total_leaves()));
  for (std::size_t h = 0; h < expansion.leaves.size(); ++h) {
    const Leaf& leaf = expansion.leaves[h];
    const auto i = static_cast<Eigen::Index>(h);
    c(i) = leaf.terminated ? 0.0
                           : -scale * decision.global_weights(i) * (decision.log_probs(leaf.root_action) + h_ent);
  }
  return c;
}

Eigen::VectorXd softtreemax_logprob_grad(const MdpSpec& mdp, const PolicyDecision& decision,
                                         const ExpansionResult& expansion, const ThetaParams& theta, Action a) {
  LeafGradient acc(mdp, theta);
  acc.add(expansion, logprob_leaf_coefficients(decision, expansion, a));
  return acc.gradient();
}

Action sample_action(const PolicyDecision& decision, Rng& rng) {
  return sample_categorical(std::span<const double>(decision.probs.data(), static_cast<std::size_t>(decision.probs.size())),
                            rng);
}

Action greedy_action(const PolicyDecision& decision) {
  Eigen::Index best = 0;
  decision.log_probs.maxCoeff(&best);  // first maximum wins
  return static_cast<Action>(best);
}

double entropy(const Eigen::VectorXd& probs) {
  double h = 0.0;
  for (Eigen::Index a = 0; a < probs.size(); ++a)
    if (probs(a) > 0.0) h -= probs(a) * std::log(probs(a));
  return h;
}

double entropy(const PolicyDecision& decision) {
  double h = 0.0;
  for (Eigen::Index a = 0; a < decision.probs.size(); ++a)
    if (decision.probs(a) > 0.0) h -= decision.probs(a) * decision.log_probs(a);
  return h;
}

}  // namespace stm
