#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace model_tailor {

enum class ErrorCode {
  // validation
  Shape,
  InvalidArgument,
  DuplicateName,
  Overflow,
  Misaligned,
  MissingCalibration,
  Provenance,
  InvariantViolation,
  // numerical
  Definiteness,
  SingularPivot,
  AlreadyEliminated,
  Divergence,
  // container format
  BadMagic,
  VersionMismatch,
  Truncated,
  OffsetOverlap,
  HeaderCorrupt,
  PayloadChecksum,
  // environment
  Io,
};

std::string_view error_code_name(ErrorCode code);

/// Exception carrying a machine-readable code. Every failure raised by the
/// library goes through this type so callers (CLI, bindings) can map codes to
/// exit statuses or Python exceptions.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

enum class ErrorClass { Validation, Numerical, Io };

ErrorClass classify(ErrorCode code);

}  // namespace model_tailor
