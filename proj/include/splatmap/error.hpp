#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splatmap {

enum class ErrorCode {
  InvalidArgument,
  NonPositiveDepth,
  DegenerateTrajectory,
  TooFewPoints,
  DegenerateSpectrum,
  DimensionMismatch,
  EmptySegment,
  SingularCov2d,
  EmptyMask,
  EmptyTarget,
  NoCorrespondences,
  NotConverged,
  SingularSystem,
  IoError,
  MissingViews,
};

std::string_view to_string(ErrorCode code);

// Every failure carries the module that raised it so the CLI can name it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string module, const std::string& what)
      : std::runtime_error(module + ": " + std::string(to_string(code)) + ": " + what),
        code_(code),
        module_(std::move(module)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorCode code_;
  std::string module_;
};

}  // namespace splatmap
