#pragma once

#include <stdexcept>
#include <string>

namespace mvc {

/// Bad configuration or CLI usage. Mapped to exit code 2 by the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing or malformed inputs: datasets, checkpoints, bitstreams. Exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss encountered during training. Exit code 4.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, long step)
      : std::runtime_error(msg + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

/// Tensor dimension mismatch.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace mvc
