#pragma once

#include <stdexcept>
#include <string>

namespace lipshift {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `field()` names the offending key when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::string field = {})
      : Error(msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed file contents (checkpoints, datasets).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during training or attacks (NaN gradients and the like).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace lipshift
