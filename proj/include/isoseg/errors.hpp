#pragma once

#include <stdexcept>
#include <string>

namespace isoseg {

// Error categories map one-to-one onto CLI exit codes so scripts can
// distinguish failure modes without parsing messages.
enum class ErrorCategory {
  config = 2,      // bad configuration value or unknown key
  dimension = 3,   // shape/extent mismatch
  parameter = 4,   // out-of-range numeric parameter
  contract = 5,    // violated operation precondition
  io = 6,          // file format or filesystem failure
  degenerate = 7,  // statistically/numerically degenerate input
  generation = 8,  // phantom generation could not satisfy its spec
  internal = 9,    // broken internal invariant
};

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::dimension: return "dimension";
    case ErrorCategory::parameter: return "parameter";
    case ErrorCategory::contract: return "contract";
    case ErrorCategory::io: return "io";
    case ErrorCategory::degenerate: return "degenerate";
    case ErrorCategory::generation: return "generation";
    case ErrorCategory::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory cat, const std::string& msg)
      : std::runtime_error(std::string(category_name(cat)) + ": " + msg), cat_(cat) {}
  ErrorCategory category() const { return cat_; }
  int exit_code() const { return static_cast<int>(cat_); }

 private:
  ErrorCategory cat_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(ErrorCategory::config, m) {}
};
struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error(ErrorCategory::dimension, m) {}
};
struct ParameterError : Error {
  explicit ParameterError(const std::string& m) : Error(ErrorCategory::parameter, m) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error(ErrorCategory::contract, m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error(ErrorCategory::io, m) {}
};
struct DegenerateError : Error {
  explicit DegenerateError(const std::string& m) : Error(ErrorCategory::degenerate, m) {}
};
struct GenerationError : Error {
  explicit GenerationError(const std::string& m) : Error(ErrorCategory::generation, m) {}
};
struct InternalError : Error {
  explicit InternalError(const std::string& m) : Error(ErrorCategory::internal, m) {}
};

}  // namespace isoseg
