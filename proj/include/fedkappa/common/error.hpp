#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedkappa {

enum class ErrorCode {
  InvalidShape,
  SpecMismatch,
  InvalidLabel,
  NoUpdates,
  StaleUpdate,
  DuplicateClient,
  UnknownClient,
  BadMagic,
  VersionMismatch,
  Truncated,
  Malformed,
  FederationAborted,
  EmptySplit,
  NoCandidates,
  InvalidProfile,
  TooFewPatients,
  DegenerateMarginals,
  IoError,
  InvalidConfig,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can dispatch on the kind rather than the message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised when a synchronous round cannot complete, e.g. a client dropped.
class FederationAborted : public Error {
 public:
  FederationAborted(std::uint32_t round, const std::string& reason);

  std::uint32_t round() const noexcept { return round_; }

 private:
  std::uint32_t round_;
};

}  // namespace fedkappa
