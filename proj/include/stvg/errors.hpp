#pragma once

#include <stdexcept>
#include <string>

namespace stvg {

// Invalid or inconsistent configuration (shapes, counts, toggles).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidBoxError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IntervalError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// No admissible (start, end) pair exists, e.g. strict mode with T = 1.
struct NoValidIntervalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TokenizerError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Missing files, unreadable images, schema violations.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or parameters during training.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace stvg
