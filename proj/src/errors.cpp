#include "vwsd/errors.hpp"

namespace vwsd {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedLine: return "MalformedLine";
    case ErrorCode::GoldMismatch: return "GoldMismatch";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ImageUnreadable: return "ImageUnreadable";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::EmptyPhraseSet: return "EmptyPhraseSet";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::PenaltyMissingCandidate: return "PenaltyMissingCandidate";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::MissingCaptions: return "MissingCaptions";
    case ErrorCode::NetworkError: return "NetworkError";
    case ErrorCode::SpaceMismatch: return "SpaceMismatch";
    case ErrorCode::NonFiniteScore: return "NonFiniteScore";
    case ErrorCode::GroupMisalignment: return "GroupMisalignment";
    case ErrorCode::NoLabels: return "NoLabels";
    case ErrorCode::DegenerateSplit: return "DegenerateSplit";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::CaptionCountMismatch: return "CaptionCountMismatch";
    case ErrorCode::MissingGold: return "MissingGold";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::MissingUpstreamArtifact: return "MissingUpstreamArtifact";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace vwsd
