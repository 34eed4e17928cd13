#include "xaidiag/error.hpp"

namespace xaidiag {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIndexOutOfVocab: return "IndexOutOfVocab";
    case ErrorCode::kSequenceTooShort: return "SequenceTooShort";
    case ErrorCode::kHeadMismatch: return "HeadMismatch";
    case ErrorCode::kNotScalar: return "NotScalar";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kDiverged: return "Diverged";
    case ErrorCode::kEmptyInstance: return "EmptyInstance";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kSingularFit: return "SingularFit";
    case ErrorCode::kNoPositives: return "NoPositives";
    case ErrorCode::kConstantSeries: return "ConstantSeries";
    case ErrorCode::kDegenerateTarget: return "DegenerateTarget";
    case ErrorCode::kTooFewPairs: return "TooFewPairs";
    case ErrorCode::kNotAscending: return "NotAscending";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kUnknownLabel: return "UnknownLabel";
    case ErrorCode::kBadRatios: return "BadRatios";
    case ErrorCode::kBadConfig: return "BadConfig";
    case ErrorCode::kMissingCheckpoint: return "MissingCheckpoint";
    case ErrorCode::kCorpusHashMismatch: return "CorpusHashMismatch";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace xaidiag
