#pragma once

#include <stdexcept>
#include <string>

namespace histloss {

/// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  InvalidConfig,
  Shape,
  DegenerateEmbedding,
  Numerical,
  EmptySet,
  BatchComposition,
  ContractViolation,
  Data,
  Io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidConfig: return "invalid config";
    case ErrorKind::Shape: return "shape mismatch";
    case ErrorKind::DegenerateEmbedding: return "degenerate embedding";
    case ErrorKind::Numerical: return "numerical error";
    case ErrorKind::EmptySet: return "empty set";
    case ErrorKind::BatchComposition: return "batch composition";
    case ErrorKind::ContractViolation: return "contract violation";
    case ErrorKind::Data: return "data error";
    case ErrorKind::Io: return "I/O error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace histloss
