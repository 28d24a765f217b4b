#pragma once

#include <stdexcept>
#include <string>

namespace vlmkit {

// Base of every domain error raised by the library. The CLI maps these to
// exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define VLMKIT_DEFINE_ERROR(Name)          \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

VLMKIT_DEFINE_ERROR(DimensionError);
VLMKIT_DEFINE_ERROR(AxisError);
VLMKIT_DEFINE_ERROR(ParameterError);
VLMKIT_DEFINE_ERROR(ShapeError);
VLMKIT_DEFINE_ERROR(EmptyLossError);
VLMKIT_DEFINE_ERROR(VocabularyError);
VLMKIT_DEFINE_ERROR(DivisibilityError);
VLMKIT_DEFINE_ERROR(EmptyInputError);
VLMKIT_DEFINE_ERROR(FormatError);
VLMKIT_DEFINE_ERROR(AssemblyError);
VLMKIT_DEFINE_ERROR(ConfigError);
VLMKIT_DEFINE_ERROR(RangeError);
VLMKIT_DEFINE_ERROR(DataError);
VLMKIT_DEFINE_ERROR(SequenceOverflowError);
VLMKIT_DEFINE_ERROR(IoError);
VLMKIT_DEFINE_ERROR(MetricError);
// A generator call that may succeed when retried (timeouts, 5xx).
VLMKIT_DEFINE_ERROR(TransientError);

#undef VLMKIT_DEFINE_ERROR

// Raised once the retry budget of a generator call is exhausted, or on a
// permanent failure. Carries the document being processed.
class GenerationError : public Error {
 public:
  GenerationError(std::string doc_id, const std::string& what)
      : Error("generation failed for doc '" + doc_id + "': " + what),
        doc_id_(std::move(doc_id)) {}
  const std::string& doc_id() const { return doc_id_; }

 private:
  std::string doc_id_;
};

}  // namespace vlmkit
