// include/purify/defense.hpp
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

// Latent-space purification: find z* whose generated grid is closest to the
// input under the chordal loss, then resynthesise the waveform from G(z*)'s
// magnitude and the input's own phase.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "purify/ccgan.hpp"
#include "purify/pencil.hpp"
#include "purify/signal.hpp"
#include "purify/tfa.hpp"

namespace purify {

enum class ClassStrategy { Known, SearchAll };

struct DefenseConfig {
  int k_max = 400;
  double xi_coeff = 0.05;
  double perturb_std = 0.4;
  int restarts = 4;
  ClassStrategy class_strategy = ClassStrategy::Known;
  bool use_gradient_refinement = false;
  std::uint64_t seed = 0;
  double tol_beta = kDefaultTolBeta;

  void validate() const;
};

struct SearchResult {
  Eigen::VectorXd z_star;
  int k_used = 0;
  /// Best loss so far, appended whenever it improves; starts with the first
  /// restart's initial loss.
  std::vector<double> loss_trace;
  double final_loss = 0.0;
  double xi = 0.0;
  bool converged = false;
};

struct DefenseResult {
  Eigen::VectorXd z_star;
  int class_used = 0;
  int k_used = 0;
  std::vector<double> loss_trace;
  double final_loss = 0.0;
  double xi = 0.0;
  bool converged = false;
  Waveform output;
  /// Synthesised magnitude with the analysis phase, as passed to cwt_inverse.
  Spectrogram spectrogram;
};

/// Accept-if-better random search over z for one class. `x` holds values in
/// [-1, 1] at the generator's resolution. Throws GeneratorUnavailable when
/// `gen` is null.
SearchResult latent_search(const SquareGrid& x, int class_id, const Generator* gen, const DefenseConfig& cfg);

/// cwt -> resize -> normalise -> search -> G(z*) -> dB -> unresize ->
/// inverse with the original phase. `class_id` is required for
/// ClassStrategy::Known and ignored for SearchAll.
DefenseResult defend(const Waveform& x, const Generator* gen, std::optional<int> class_id,
                     const TfaConfig& tfa, const DefenseConfig& cfg);

/// The generator of a checkpoint file; load failures become
/// GeneratorUnavailable.
Generator load_generator(const std::filesystem::path& checkpoint);

/// Key=value text with loss_trace, k_used, class_used, final_loss, xi,
/// converged.
std::string defense_trace_text(const DefenseResult& r);

}  // namespace purify
