#include "model_tailor/error.hpp"

namespace model_tailor {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Shape: return "shape";
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::DuplicateName: return "duplicate-name";
    case ErrorCode::Overflow: return "overflow";
    case ErrorCode::Misaligned: return "misaligned";
    case ErrorCode::MissingCalibration: return "missing-calibration";
    case ErrorCode::Provenance: return "provenance";
    case ErrorCode::InvariantViolation: return "invariant-violation";
    case ErrorCode::Definiteness: return "definiteness";
    case ErrorCode::SingularPivot: return "singular-pivot";
    case ErrorCode::AlreadyEliminated: return "already-eliminated";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::BadMagic: return "bad-magic";
    case ErrorCode::VersionMismatch: return "version-mismatch";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::OffsetOverlap: return "offset-overlap";
    case ErrorCode::HeaderCorrupt: return "header-corrupt";
    case ErrorCode::PayloadChecksum: return "payload-checksum";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

ErrorClass classify(ErrorCode code) {
  switch (code) {
    case ErrorCode::Definiteness:
    case ErrorCode::SingularPivot:
    case ErrorCode::Divergence:
      return ErrorClass::Numerical;
    case ErrorCode::Io:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
    case ErrorCode::Truncated:
    case ErrorCode::OffsetOverlap:
    case ErrorCode::HeaderCorrupt:
    case ErrorCode::PayloadChecksum:
      return ErrorClass::Io;
    default:
      return ErrorClass::Validation;
  }
}

}  // namespace model_tailor
