#pragma once

#include <stdexcept>
#include <string>

namespace cstalk {

/// Base of every error raised by the library. Each subclass names one
/// failure family so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CSTALK_DEFINE_ERROR(Name)            \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  };

CSTALK_DEFINE_ERROR(SchemaError)
CSTALK_DEFINE_ERROR(ValidationError)
CSTALK_DEFINE_ERROR(ShapeError)
CSTALK_DEFINE_ERROR(SizeError)
CSTALK_DEFINE_ERROR(IndexError)
CSTALK_DEFINE_ERROR(ConfigError)
CSTALK_DEFINE_ERROR(DomainError)
CSTALK_DEFINE_ERROR(StateError)
CSTALK_DEFINE_ERROR(NumericError)
CSTALK_DEFINE_ERROR(DataError)
CSTALK_DEFINE_ERROR(AlignmentError)
CSTALK_DEFINE_ERROR(CompatibilityError)
CSTALK_DEFINE_ERROR(FormatError)
CSTALK_DEFINE_ERROR(VersionError)
CSTALK_DEFINE_ERROR(IoError)

#undef CSTALK_DEFINE_ERROR

}  // namespace cstalk
