#pragma once

#include <stdexcept>
#include <string>

namespace kduda {

// Shapes of operands do not agree.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A scalar parameter is outside its admissible range.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An API precondition was violated by the caller.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Experiment configuration could not be parsed or validated.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kduda
