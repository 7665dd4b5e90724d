#include "morphflow/error.hpp"

namespace morphflow {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::DegenerateCloud: return "DegenerateCloud";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::MTooLarge: return "MTooLarge";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::CoordinateOverflow: return "CoordinateOverflow";
    case ErrorCode::GridTooFine: return "GridTooFine";
    case ErrorCode::CloudSmallerThanWindow: return "CloudSmallerThanWindow";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonScalarOutput: return "NonScalarOutput";
    case ErrorCode::RecordMismatch: return "RecordMismatch";
    case ErrorCode::GraphMismatch: return "GraphMismatch";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::IOError: return "IOError";
    case ErrorCode::EmptyAfterFiltering: return "EmptyAfterFiltering";
    case ErrorCode::PresetMismatch: return "PresetMismatch";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
  }
  return "Unknown";
}

}  // namespace morphflow
