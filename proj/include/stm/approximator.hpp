#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

enum class HeadMode { per_action, single_head };

/// Parameters of a tanh multilayer perceptron stored as one flat vector.
///
/// Layer l maps layer_sizes[l] inputs to layer_sizes[l+1] outputs. Its block
/// in `weights` is the column-major weight matrix (out x in) followed by the
/// bias vector (out). Hidden layers use tanh; the output layer is linear.
template <typename Scalar>
struct NetworkParams {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  std::vector<int> layer_sizes;
  Vector weights;
  HeadMode head_mode = HeadMode::per_action;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int layer_count() const { return static_cast<int>(layer_sizes.size()) - 1; }
};

using ThetaParams = NetworkParams<double>;
using CriticParams = NetworkParams<double>;

inline Eigen::Index parameter_count(const std::vector<int>& layer_sizes) {
  Eigen::Index p = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l)
    p += static_cast<Eigen::Index>(layer_sizes[l + 1]) * (layer_sizes[l] + 1);
  return p;
}

// Offset of layer l's weight block inside the flat vector.
inline Eigen::Index layer_offset(const std::vector<int>& layer_sizes, int l) {
  Eigen::Index off = 0;
  for (int k = 0; k < l; ++k)
    off += static_cast<Eigen::Index>(layer_sizes[static_cast<std::size_t>(k) + 1]) *
           (layer_sizes[static_cast<std::size_t>(k)] + 1);
  return off;
}

template <typename Scalar>
void validate(const NetworkParams<Scalar>& p) {
  if (p.layer_sizes.size() < 2) throw std::invalid_argument("network needs at least input and output sizes");
  for (int n : p.layer_sizes)
    if (n <= 0) throw std::invalid_argument("layer sizes must be positive");
  if (p.weights.size() != parameter_count(p.layer_sizes))
    throw std::invalid_argument("parameter vector length does not match layer sizes");
  if (p.head_mode == HeadMode::single_head && p.output_dim() != 1)
    throw std::invalid_argument("single_head network must have exactly one output");
}

// Checks the head layout against an action count.
template <typename Scalar>
void validate_heads(const NetworkParams<Scalar>& p, int action_count) {
  validate(p);
  const int expected = p.head_mode == HeadMode::per_action ? action_count : 1;
  if (p.output_dim() != expected)
    throw std::invalid_argument("network has " + std::to_string(p.output_dim()) + " outputs, expected " +
                                std::to_string(expected));
}

template <typename Scalar>
inline int head_for_action(const NetworkParams<Scalar>& p, int action) {
  return p.head_mode == HeadMode::per_action ? action : 0;
}

namespace detail {

template <typename Scalar>
auto weight_map(const NetworkParams<Scalar>& p, int l) {
  const auto in = p.layer_sizes[static_cast<std::size_t>(l)];
  const auto out = p.layer_sizes[static_cast<std::size_t>(l) + 1];
  return Eigen::Map<const typename NetworkParams<Scalar>::Matrix>(
      p.weights.data() + layer_offset(p.layer_sizes, l), out, in);
}

template <typename Scalar>
auto bias_map(const NetworkParams<Scalar>& p, int l) {
  const auto in = p.layer_sizes[static_cast<std::size_t>(l)];
  const auto out = p.layer_sizes[static_cast<std::size_t>(l) + 1];
  return Eigen::Map<const typename NetworkParams<Scalar>::Vector>(
      p.weights.data() + layer_offset(p.layer_sizes, l) + static_cast<Eigen::Index>(out) * in, out);
}

}  // namespace detail

/// Batched forward pass: one input per column of `inputs`.
template <typename Scalar, typename Derived>
typename NetworkParams<Scalar>::Matrix forward_batch(const NetworkParams<Scalar>& p,
                                                     const Eigen::MatrixBase<Derived>& inputs) {
  if (inputs.rows() != p.input_dim()) throw std::invalid_argument("feature dimension mismatch");
  typename NetworkParams<Scalar>::Matrix a = inputs;
  for (int l = 0; l < p.layer_count(); ++l) {
    typename NetworkParams<Scalar>::Matrix z = detail::weight_map(p, l) * a;
    z.colwise() += detail::bias_map(p, l);
    a = (l + 1 < p.layer_count()) ? typename NetworkParams<Scalar>::Matrix(z.array().tanh()) : z;
  }
  return a;
}

template <typename Scalar, typename Derived>
typename NetworkParams<Scalar>::Vector forward(const NetworkParams<Scalar>& p,
                                               const Eigen::MatrixBase<Derived>& features) {
  if (features.cols() != 1) throw std::invalid_argument("forward expects a single feature vector");
  return forward_batch(p, features).col(0);
}

/// Reverse-mode accumulation: returns sum over columns b of J_b^T cotangent_b,
/// where J_b is the Jacobian of the network output at inputs.col(b) with
/// respect to the flat parameter vector.
template <typename Scalar, typename DerivedX, typename DerivedG>
typename NetworkParams<Scalar>::Vector backward_batch(const NetworkParams<Scalar>& p,
                                                      const Eigen::MatrixBase<DerivedX>& inputs,
                                                      const Eigen::MatrixBase<DerivedG>& cotangent) {
  using Matrix = typename NetworkParams<Scalar>::Matrix;
  using Vector = typename NetworkParams<Scalar>::Vector;
  if (inputs.rows() != p.input_dim()) throw std::invalid_argument("feature dimension mismatch");
  if (cotangent.rows() != p.output_dim() || cotangent.cols() != inputs.cols())
    throw std::invalid_argument("cotangent shape mismatch");

  const int L = p.layer_count();
  std::vector<Matrix> acts;
  acts.reserve(static_cast<std::size_t>(L));
  acts.emplace_back(inputs);
  for (int l = 0; l + 1 < L; ++l) {
    Matrix z = detail::weight_map(p, l) * acts.back();
    z.colwise() += detail::bias_map(p, l);
    acts.emplace_back(z.array().tanh());
  }

  Vector grad = Vector::Zero(p.weights.size());
  Matrix delta = cotangent;
  for (int l = L - 1; l >= 0; --l) {
    const auto in = p.layer_sizes[static_cast<std::size_t>(l)];
    const auto out = p.layer_sizes[static_cast<std::size_t>(l) + 1];
    const Eigen::Index off = layer_offset(p.layer_sizes, l);
    const Matrix& a = acts[static_cast<std::size_t>(l)];
    Eigen::Map<Matrix>(grad.data() + off, out, in).noalias() = delta * a.transpose();
    Eigen::Map<Vector>(grad.data() + off + static_cast<Eigen::Index>(out) * in, out) = delta.rowwise().sum();
    if (l > 0) {
      Matrix back = detail::weight_map(p, l).transpose() * delta;
      delta = back.array() * (Scalar(1) - a.array().square());
    }
  }
  return grad;
}

/// Gradient of output `head` with respect to every parameter.
template <typename Scalar, typename Derived>
typename NetworkParams<Scalar>::Vector grad_leaf(const NetworkParams<Scalar>& p,
                                                 const Eigen::MatrixBase<Derived>& features, int head) {
  if (head < 0 || head >= p.output_dim())
    throw std::out_of_range("head index " + std::to_string(head) + " out of range");
  using Vector = typename NetworkParams<Scalar>::Vector;
  return backward_batch(p, features, Vector::Unit(p.output_dim(), head));
}

/// Zero-mean normal weights with standard deviation 1/sqrt(fan_in), zero
/// biases. Deterministic in `seed`.
template <typename Scalar = double>
NetworkParams<Scalar> init_params(const std::vector<int>& layer_sizes, HeadMode head_mode, std::uint64_t seed) {
  NetworkParams<Scalar> p;
  p.layer_sizes = layer_sizes;
  p.head_mode = head_mode;
  p.weights = NetworkParams<Scalar>::Vector::Zero(parameter_count(layer_sizes));
  validate(p);
  std::mt19937_64 rng(seed);
  for (int l = 0; l < p.layer_count(); ++l) {
    const auto in = layer_sizes[static_cast<std::size_t>(l)];
    const auto out = layer_sizes[static_cast<std::size_t>(l) + 1];
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
    const Eigen::Index off = layer_offset(layer_sizes, l);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(out) * in; ++i)
      p.weights(off + i) = static_cast<Scalar>(dist(rng));
  }
  return p;
}

// Hidden sizes between an input and an output layer.
inline std::vector<int> make_layer_sizes(int input_dim, const std::vector<int>& hidden, int output_dim) {
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(output_dim);
  return sizes;
}

/// Binary checkpoint layout (all integers and floats little-endian):
///   "STMP" | u32 version=1 | u32 head_mode (0 per_action, 1 single_head)
///   | u32 layer count L | u32 x L layer sizes | u64 parameter count P
///   | f64 x P parameters
void save_params(const std::string& path, const ThetaParams& params);
ThetaParams load_params(const std::string& path);

}  // namespace stm
