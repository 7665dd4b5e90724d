#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace morphflow {

enum class ErrorCode {
  EmptyCloud,
  DegenerateCloud,
  KTooLarge,
  MTooLarge,
  InvalidArgument,
  CoordinateOverflow,
  GridTooFine,
  CloudSmallerThanWindow,
  ShapeMismatch,
  NonScalarOutput,
  RecordMismatch,
  GraphMismatch,
  ZeroVector,
  SizeMismatch,
  MissingLabel,
  NonFinite,
  TooFewSamples,
  IOError,
  EmptyAfterFiltering,
  PresetMismatch,
  CorruptCheckpoint,
  ConfigMismatch,
  NonFiniteLoss,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace morphflow
