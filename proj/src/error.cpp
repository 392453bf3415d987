// src/error.cpp
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

#include "purify/error.hpp"

namespace purify {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::UnsupportedFormat: return "UnsupportedFormat";
    case Errc::CorruptFile: return "CorruptFile";
    case Errc::IoError: return "IoError";
    case Errc::SilentSignal: return "SilentSignal";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptySignal: return "EmptySignal";
    case Errc::BadFraming: return "BadFraming";
    case Errc::SignalTooShort: return "SignalTooShort";
    case Errc::BadConfig: return "BadConfig";
    case Errc::InconsistentConfig: return "InconsistentConfig";
    case Errc::GridTooSmall: return "GridTooSmall";
    case Errc::MissingSourceDims: return "MissingSourceDims";
    case Errc::NonConvergence: return "NonConvergence";
    case Errc::NonFinite: return "NonFinite";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::StaleTrace: return "StaleTrace";
    case Errc::ZeroMatrix: return "ZeroMatrix";
    case Errc::EmptyClass: return "EmptyClass";
    case Errc::DivergedLoss: return "DivergedLoss";
    case Errc::GeneratorUnavailable: return "GeneratorUnavailable";
    case Errc::EmptyReference: return "EmptyReference";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::GradientUnavailable: return "GradientUnavailable";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::RecognizerFailure: return "RecognizerFailure";
    case Errc::ProcessFailure: return "ProcessFailure";
    case Errc::Timeout: return "Timeout";
  }
  return "Unknown";
}

ErrorKind error_kind(Errc code) noexcept {
  switch (code) {
    case Errc::NonConvergence:
    case Errc::NonFinite:
    case Errc::DivergedLoss:
    case Errc::ZeroMatrix:
    case Errc::GradientUnavailable:
      return ErrorKind::Numerical;
    default:
      return ErrorKind::Data;
  }
}

}  // namespace purify
