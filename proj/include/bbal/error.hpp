#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bbal {

enum class ErrorCode {
  invalid_input,
  index,
  invalid_distribution,
  capability,
  state,
  configuration,
  training,
  infeasible_mapping,
  budget,
  io,
  gate,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; the code distinguishes failure
/// classes so callers (and the CLI exit-code mapping) can branch on them.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::index: return "index";
    case ErrorCode::invalid_distribution: return "invalid-distribution";
    case ErrorCode::capability: return "capability";
    case ErrorCode::state: return "state";
    case ErrorCode::configuration: return "configuration";
    case ErrorCode::training: return "training";
    case ErrorCode::infeasible_mapping: return "infeasible-mapping";
    case ErrorCode::budget: return "budget";
    case ErrorCode::io: return "io";
    case ErrorCode::gate: return "gate";
  }
  return "unknown";
}

}  // namespace bbal
