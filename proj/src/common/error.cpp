#include "fedkappa/common/error.hpp"

namespace fedkappa {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidShape: return "InvalidShape";
    case ErrorCode::SpecMismatch: return "SpecMismatch";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::NoUpdates: return "NoUpdates";
    case ErrorCode::StaleUpdate: return "StaleUpdate";
    case ErrorCode::DuplicateClient: return "DuplicateClient";
    case ErrorCode::UnknownClient: return "UnknownClient";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::Malformed: return "Malformed";
    case ErrorCode::FederationAborted: return "FederationAborted";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::NoCandidates: return "NoCandidates";
    case ErrorCode::InvalidProfile: return "InvalidProfile";
    case ErrorCode::TooFewPatients: return "TooFewPatients";
    case ErrorCode::DegenerateMarginals: return "DegenerateMarginals";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

FederationAborted::FederationAborted(std::uint32_t round, const std::string& reason)
    : Error(ErrorCode::FederationAborted, "round " + std::to_string(round) + ": " + reason),
      round_(round) {}

}  // namespace fedkappa
