// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mmkd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/matrix dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite values, degenerate norms, and similar numeric failures.
struct NumericError : Error {
  using Error::Error;
};

// A caller violated an API precondition.
struct ContractError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A sequence does not fit the model's maximum length.
struct CapacityError : Error {
  using Error::Error;
};

// Malformed recipe label or config text.
struct ParseError : Error {
  using Error::Error;
};

// Unreadable, truncated, or version-mismatched checkpoint.
struct CheckpointError : Error {
  using Error::Error;
};

// Text outside the closed lexicon.
struct TokenizeError : Error {
  using Error::Error;
};

}  // namespace mmkd
