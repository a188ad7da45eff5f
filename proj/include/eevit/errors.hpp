#pragma once

#include <stdexcept>
#include <string>

namespace eevit {

// Bad tensor extents or incompatible operands.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration; maps to CLI exit code 1.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input values that violate a documented precondition (e.g. a vector that is
// not a probability distribution).
struct ValueError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed files and streams.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace eevit
