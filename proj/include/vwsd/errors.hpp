#pragma once

#include <stdexcept>
#include <string>

namespace vwsd {

// Every failure the library can raise, named after its contract.
enum class ErrorCode {
  // dataset
  MalformedLine,
  GoldMismatch,
  CountMismatch,
  // embeddings
  BackendUnavailable,
  EmptyInput,
  ImageUnreadable,
  DimMismatch,
  // scoring
  ZeroVector,
  EmptyPhraseSet,
  MissingEmbedding,
  PenaltyMissingCandidate,
  // enhancement
  RateLimited,
  // captions
  MissingCaptions,
  // kb retrieval
  NetworkError,
  SpaceMismatch,
  // features / ltr
  NonFiniteScore,
  GroupMisalignment,
  NoLabels,
  DegenerateSplit,
  SchemaMismatch,
  // qa
  CaptionCountMismatch,
  // evaluation
  MissingGold,
  // pipeline
  ConfigInvalid,
  MissingUpstreamArtifact,
  // generic contract violation
  InvalidArgument,
  IoError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vwsd
