#pragma once

#include <stdexcept>

namespace mmfuse {

// Error taxonomy. The CLI maps ConfigError to exit code 1 and every other
// failure to exit code 2.
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct DataError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MetricError : std::runtime_error { using std::runtime_error::runtime_error; };

}  // namespace mmfuse
