#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace implicit_lqg {

enum class ErrorCode {
  kDimensionMismatch,
  kNotControllable,
  kNotObservable,
  kNotPositiveDefinite,
  kNotPsd,
  kNotInvertible,
  kNoConvergence,
  kSingularInnerMatrix,
  kUnstable,
  kInfeasibleBudget,
  kTooShort,
  kPowerExceedsBudget,
  kParseError,
  kValidationError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kNotControllable: return "NotControllable";
    case ErrorCode::kNotObservable: return "NotObservable";
    case ErrorCode::kNotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::kNotPsd: return "NotPSD";
    case ErrorCode::kNotInvertible: return "NotInvertible";
    case ErrorCode::kNoConvergence: return "NoConvergence";
    case ErrorCode::kSingularInnerMatrix: return "SingularInnerMatrix";
    case ErrorCode::kUnstable: return "Unstable";
    case ErrorCode::kInfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::kTooShort: return "TooShort";
    case ErrorCode::kPowerExceedsBudget: return "PowerExceedsBudget";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kValidationError: return "ValidationError";
  }
  return "Unknown";
}

/// Every failure in the library is reported through this exception. `subject`
/// names the offending matrix or field (e.g. "psi_w") when there is one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string subject, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) +
                           (subject.empty() ? "" : "(" + subject + ")") +
                           (detail.empty() ? "" : ": " + detail)),
        code_(code),
        subject_(std::move(subject)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  ErrorCode code_;
  std::string subject_;
};

/// Scenario file problem at a 1-based line (0 when unknown).
class ParseError : public Error {
 public:
  ParseError(std::string field, std::size_t line, const std::string& detail)
      : Error(ErrorCode::kParseError, std::move(field),
              (line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + detail),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace implicit_lqg
