#pragma once

#include <stdexcept>
#include <string>

namespace qalign {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
  validation,        // bad arguments or configuration
  format,            // malformed bundle / manifest
  corruption,        // payload does not match its manifest entry
  data,              // non-finite or otherwise unusable data
  dimension,         // shape mismatch between paired operands
  undefined_metric,  // metric has no value for this input (e.g. zero signal)
  numerical,         // decomposition failure, residual above threshold
  io,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define QALIGN_DEFINE_ERROR(Name, Kind)                                 \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

QALIGN_DEFINE_ERROR(ValidationError, validation)
QALIGN_DEFINE_ERROR(FormatError, format)
QALIGN_DEFINE_ERROR(CorruptionError, corruption)
QALIGN_DEFINE_ERROR(DataError, data)
QALIGN_DEFINE_ERROR(DimensionError, dimension)
QALIGN_DEFINE_ERROR(UndefinedMetricError, undefined_metric)
QALIGN_DEFINE_ERROR(NumericalError, numerical)
QALIGN_DEFINE_ERROR(IoError, io)

#undef QALIGN_DEFINE_ERROR

}  // namespace qalign
