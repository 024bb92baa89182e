#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nv {

// Every failure raised by the library carries one of these codes so callers
// (CLI, HTTP service) can map it without parsing messages.
enum class Errc {
  ShapeMismatch,
  InvalidAxis,
  InvalidArgument,
  AllIgnored,
  OutOfRange,
  NotScalar,
  DetachedLoss,
  BadImageShape,
  MissingRoleToken,
  MissingImage,
  TooLong,
  EmptyBatch,
  CannotFalsify,
  UnknownPolicy,
  IOError,
  ParseError,
  BadMagic,
  UnsupportedVersion,
  TruncatedFile,
  NaNGradient,
  ConfigError,
  MissingCorpus,
  MissingTeacher,
  MissingHead,
  EmptySplit,
  EmptyQuestion,
  EmptyCandidates,
  NegativeEcho,
  UnknownWaypoint,
  NoPath,
  UnknownModule,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace nv
