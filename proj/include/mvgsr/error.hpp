#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mvgsr {

enum class Errc {
  MalformedFile,
  UnsupportedModel,
  NonUnitQuaternion,
  DanglingCameraRef,
  DuplicateViewId,
  IoError,
  SchemaVersionMismatch,
  SingularIntrinsics,
  DegeneratePair,
  ZeroLine,
  EmptySegment,
  UnknownView,
  NotEnoughViews,
  ShapeMismatch,
  NonFiniteInput,
  NonScalarLoss,
  GraphConsumed,
  BudgetExceeded,
  NonFiniteLoss,
  NonDivisibleExtent,
  LambdaOutOfRange,
  PlaneBehindCamera,
  InvalidArgument,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::MalformedFile: return "MalformedFile";
    case Errc::UnsupportedModel: return "UnsupportedModel";
    case Errc::NonUnitQuaternion: return "NonUnitQuaternion";
    case Errc::DanglingCameraRef: return "DanglingCameraRef";
    case Errc::DuplicateViewId: return "DuplicateViewId";
    case Errc::IoError: return "IoError";
    case Errc::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case Errc::SingularIntrinsics: return "SingularIntrinsics";
    case Errc::DegeneratePair: return "DegeneratePair";
    case Errc::ZeroLine: return "ZeroLine";
    case Errc::EmptySegment: return "EmptySegment";
    case Errc::UnknownView: return "UnknownView";
    case Errc::NotEnoughViews: return "NotEnoughViews";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteInput: return "NonFiniteInput";
    case Errc::NonScalarLoss: return "NonScalarLoss";
    case Errc::GraphConsumed: return "GraphConsumed";
    case Errc::BudgetExceeded: return "BudgetExceeded";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::NonDivisibleExtent: return "NonDivisibleExtent";
    case Errc::LambdaOutOfRange: return "LambdaOutOfRange";
    case Errc::PlaneBehindCamera: return "PlaneBehindCamera";
    case Errc::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace mvgsr
