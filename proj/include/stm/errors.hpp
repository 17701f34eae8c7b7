#pragma once

#include <stdexcept>
#include <string>

namespace stm {

// Invalid run configuration or malformed environment description.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite logits, losses or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A structural guarantee of the engine was broken (e.g. an empty action group).
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace stm
