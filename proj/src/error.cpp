#include "nv/error.hpp"

namespace nv {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::InvalidAxis: return "InvalidAxis";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::AllIgnored: return "AllIgnored";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::NotScalar: return "NotScalar";
    case Errc::DetachedLoss: return "DetachedLoss";
    case Errc::BadImageShape: return "BadImageShape";
    case Errc::MissingRoleToken: return "MissingRoleToken";
    case Errc::MissingImage: return "MissingImage";
    case Errc::TooLong: return "TooLong";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::CannotFalsify: return "CannotFalsify";
    case Errc::UnknownPolicy: return "UnknownPolicy";
    case Errc::IOError: return "IOError";
    case Errc::ParseError: return "ParseError";
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedVersion: return "UnsupportedVersion";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::NaNGradient: return "NaNGradient";
    case Errc::ConfigError: return "ConfigError";
    case Errc::MissingCorpus: return "MissingCorpus";
    case Errc::MissingTeacher: return "MissingTeacher";
    case Errc::MissingHead: return "MissingHead";
    case Errc::EmptySplit: return "EmptySplit";
    case Errc::EmptyQuestion: return "EmptyQuestion";
    case Errc::EmptyCandidates: return "EmptyCandidates";
    case Errc::NegativeEcho: return "NegativeEcho";
    case Errc::UnknownWaypoint: return "UnknownWaypoint";
    case Errc::NoPath: return "NoPath";
    case Errc::UnknownModule: return "UnknownModule";
  }
  return "Unknown";
}

}  // namespace nv
