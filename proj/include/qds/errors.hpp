#pragma once

#include <stdexcept>
#include <string>

namespace qds {

// Exit-code mapping used by the CLI: ConfigError/ContractError/FormatError -> 2, NumericError -> 3.

/// Invalid configuration: bad shapes, unsupported variants, inconsistent settings.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Caller violated a precondition of an operation.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Non-finite value or other numeric breakdown.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace qds
