// include/purify/error.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace purify {

enum class Errc {
  // signal
  UnsupportedFormat,
  CorruptFile,
  IoError,
  SilentSignal,
  LengthMismatch,
  EmptySignal,
  BadFraming,
  // tfa
  SignalTooShort,
  BadConfig,
  InconsistentConfig,
  GridTooSmall,
  MissingSourceDims,
  // pencil
  NonConvergence,
  NonFinite,
  // ccgan
  ShapeMismatch,
  StaleTrace,
  ZeroMatrix,
  EmptyClass,
  DivergedLoss,
  // defense
  GeneratorUnavailable,
  // eval
  EmptyReference,
  EmptyBatch,
  GradientUnavailable,
  MissingArtifact,
  RecognizerFailure,
  ProcessFailure,
  Timeout,
};

std::string_view errc_name(Errc code) noexcept;

/// Broad failure class, used by the CLI to pick an exit status.
enum class ErrorKind { Data, Numerical };

ErrorKind error_kind(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }
  ErrorKind kind() const noexcept { return error_kind(code_); }

 private:
  Errc code_;
};

}  // namespace purify
