#pragma once

#include <stdexcept>
#include <string>

namespace decaps {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension/shape contract violations (mismatched operands, bad axes).
struct ShapeError : Error {
  using Error::Error;
};

// Bad user-supplied configuration (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

// Dataset / file problems: parse errors, missing images (CLI exit code 3).
struct DataError : Error {
  using Error::Error;
};

// Non-finite values, guarded divisions (CLI exit code 4).
struct NumericError : Error {
  using Error::Error;
};

// API misuse: non-scalar loss, double backward, empty vote set.
struct ContractError : Error {
  using Error::Error;
};

// A verification oracle could not run (e.g. non-deterministic function
// handed to the gradient checker).
struct OracleError : Error {
  using Error::Error;
};

}  // namespace decaps
