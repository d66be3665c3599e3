#pragma once

#include <stdexcept>
#include <string>

namespace serpent {

/// Violated operation precondition (shape mismatch, bad argument).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model or run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (files, manifests, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values encountered during optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void contract_fail(const std::string& what) { throw ContractError(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) contract_fail(what);
}

}  // namespace detail
}  // namespace serpent
