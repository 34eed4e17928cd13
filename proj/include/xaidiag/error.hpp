#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xaidiag {

enum class ErrorCode {
  kIndexOutOfVocab,
  kSequenceTooShort,
  kHeadMismatch,
  kNotScalar,
  kShapeMismatch,
  kDiverged,
  kEmptyInstance,
  kLengthMismatch,
  kSingularFit,
  kNoPositives,
  kConstantSeries,
  kDegenerateTarget,
  kTooFewPairs,
  kNotAscending,
  kNonFinite,
  kParseError,
  kUnknownLabel,
  kBadRatios,
  kBadConfig,
  kMissingCheckpoint,
  kCorpusHashMismatch,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace xaidiag
