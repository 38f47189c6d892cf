#pragma once

#include <stdexcept>
#include <string>

namespace dalace {

// Error taxonomy shared by all modules. The code string is stable and
// machine-checkable; the message carries context (paths, shapes, values).
enum class ErrorCode {
  ShapeMismatch,
  DomainError,
  LayoutInfeasible,
  UnknownExperiment,
  VersionMismatch,
  NonfiniteLoss,
  AnatomiesTooFew,
  IoError,
  InvalidConfig,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::DomainError: return "DOMAIN_ERROR";
    case ErrorCode::LayoutInfeasible: return "LAYOUT_INFEASIBLE";
    case ErrorCode::UnknownExperiment: return "UNKNOWN_EXPERIMENT";
    case ErrorCode::VersionMismatch: return "VERSION_MISMATCH";
    case ErrorCode::NonfiniteLoss: return "NONFINITE_LOSS";
    case ErrorCode::AnatomiesTooFew: return "ANATOMIES_TOO_FEW";
    case ErrorCode::IoError: return "IO_ERROR";
    case ErrorCode::InvalidConfig: return "INVALID_CONFIG";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace dalace
