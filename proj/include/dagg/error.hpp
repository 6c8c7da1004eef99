#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dagg {

enum class ErrorCode {
  ShapeMismatch,
  NotScalar,
  DetachedValue,
  BadShape,
  UnknownTap,
  AdapterMissing,
  DegenerateInput,
  NotConverged,
  UnknownParameter,
  WeightLengthMismatch,
  MissingGradient,
  ParseError,
  ValidationError,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  LabelRange,
  RowArity,
  NonNumericField,
  EmptyDataset,
  IoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotScalar: return "NotScalar";
    case ErrorCode::DetachedValue: return "DetachedValue";
    case ErrorCode::BadShape: return "BadShape";
    case ErrorCode::UnknownTap: return "UnknownTap";
    case ErrorCode::AdapterMissing: return "AdapterMissing";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::UnknownParameter: return "UnknownParameter";
    case ErrorCode::WeightLengthMismatch: return "WeightLengthMismatch";
    case ErrorCode::MissingGradient: return "MissingGradient";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::ValidationError: return "ValidationError";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::LabelRange: return "LabelRange";
    case ErrorCode::RowArity: return "RowArity";
    case ErrorCode::NonNumericField: return "NonNumericField";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// All library failures are reported through this type; `code()` identifies
// the failure class and `what()` carries "<Code>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code), detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& detail) { throw Error(code, detail); }

}  // namespace dagg
