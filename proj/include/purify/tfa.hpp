// include/purify/tfa.hpp
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

// Time-frequency analysis with the complex Morlet wavelet.
//
// The "wavelet spectrogram" here is a discretised continuous wavelet
// transform: n_scales log-spaced centre frequencies, every scale evaluated at
// the same hop, so each column holds complex coefficients whose magnitude and
// phase can be edited independently and inverted again. A critically sampled
// orthogonal DWT would not give a per-cell phase.
//
// Wavelet convention (scale s in samples, L2-normalised, analytic):
//
//   psi_s(t)   = s^-1/2 pi^-1/4 exp(i w0 t / s) exp(-t^2 / (2 s^2))
//   psihat_s(w) = sqrt(2 pi s) pi^-1/4 exp(-(s w - w0)^2 / 2),  w > 0
//   W_s(b)     = sum_t x(t) conj(psi_s(t - b))
//
// and a scale's centre frequency is w0 / (2 pi s) cycles per sample.

#pragma once

#include <array>
#include <complex>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "purify/signal.hpp"

namespace purify {

struct TfaConfig {
  int n_scales = 128;
  double freq_min = 80.0;
  double freq_max = 7600.0;
  double frame_len_ms = 50.0;
  int hop = 1;
  double morlet_center = 6.0;
  double log_floor_eps = 1e-10;

  /// Throws BadConfig when an invariant is violated.
  void validate() const;

  int frame_len_samples() const;
  /// Centre frequencies in Hz, ascending; row i of a spectrogram.
  std::vector<double> center_frequencies() const;
  /// Scales in samples matching center_frequencies().
  std::vector<double> scales() const;

  bool operator==(const TfaConfig&) const = default;
};

/// Reads overrides from a JSON object; unknown keys are rejected.
TfaConfig tfa_config_from_json(const std::string& text);
TfaConfig load_tfa_config(const std::filesystem::path& path);
std::string tfa_config_to_json(const TfaConfig& cfg);

struct Spectrogram {
  Eigen::MatrixXd magnitude_db;  // n_scales x n_frames
  Eigen::MatrixXd phase;         // n_scales x n_frames, in (-pi, pi]
  TfaConfig config;
  Eigen::Index original_length = 0;

  Eigen::Index n_scales() const { return magnitude_db.rows(); }
  Eigen::Index n_frames() const { return magnitude_db.cols(); }
  double floor_db() const;
};

/// S x S grid plus the dimensions it was resized from.
struct SquareGrid {
  Eigen::MatrixXd values;
  std::optional<std::pair<Eigen::Index, Eigen::Index>> source_dims;

  Eigen::Index size() const { return values.rows(); }
};

/// Min-max normalised copy of a grid replicated into three channels, with the
/// range used so that the mapping can be undone.
struct RgbGrid {
  std::array<Eigen::MatrixXd, 3> channels;
  double lo = 0.0;
  double hi = 0.0;

  bool degenerate() const { return !(hi > lo); }
};

// ---------------------------------------------------------------------------

Spectrogram cwt_forward(const Waveform& w, const TfaConfig& cfg = {});

/// Complex coefficients W (n_scales x n_frames) before the log/phase split.
Eigen::MatrixXcd cwt_coefficients(const Eigen::Ref<const Eigen::VectorXd>& x, const TfaConfig& cfg);

/// Adjoint of cwt_coefficients with respect to x: given dL/dRe W + i dL/dIm W
/// per coefficient, returns dL/dx. Only defined for hop == 1.
Eigen::VectorXd cwt_coefficients_adjoint(const Eigen::MatrixXcd& grad, Eigen::Index length,
                                         const TfaConfig& cfg);

/// Delta-function reconstruction followed by the quantisation filter
/// (peak-normalise, round to the 16-bit grid). An all-floor spectrogram
/// yields zeros.
Waveform cwt_inverse(const Spectrogram& s);

/// Reconstruction before the quantisation filter.
Eigen::VectorXd cwt_reconstruct_raw(const Spectrogram& s);

/// Peak-normalise to [-1, 1] and round to the PCM16 grid; zeros stay zeros.
Eigen::VectorXd quantization_filter(const Eigen::Ref<const Eigen::VectorXd>& x);

// ---------------------------------------------------------------------------
// Bilinear resizing with corner-aligned sampling.

/// Interpolation matrix R (to x from) such that resized = R_rows * G * R_cols^T.
Eigen::MatrixXd bilinear_weights(Eigen::Index to, Eigen::Index from);

SquareGrid resize_bilinear(const Eigen::Ref<const Eigen::MatrixXd>& grid, Eigen::Index target);
SquareGrid resize_bilinear(const SquareGrid& grid, Eigen::Index target);

/// Adjoint of resize_bilinear: maps a gradient on the S x S grid back to the
/// source dims.
Eigen::MatrixXd resize_bilinear_adjoint(const Eigen::Ref<const Eigen::MatrixXd>& grad,
                                        Eigen::Index rows, Eigen::Index cols);

Eigen::MatrixXd unresize_bilinear(const SquareGrid& g);

RgbGrid to_rgb(const SquareGrid& g);

/// Inverse of the to_rgb normalisation for one channel.
Eigen::MatrixXd from_unit_range(const Eigen::Ref<const Eigen::MatrixXd>& v, double lo, double hi);

// ---------------------------------------------------------------------------
// Spectrogram container: "PSPG" magic, version byte, config, dims, then
// row-major magnitude_db and phase as little-endian float64.

void save_spectrogram(const Spectrogram& s, const std::filesystem::path& path);
Spectrogram load_spectrogram(const std::filesystem::path& path);
std::string encode_spectrogram(const Spectrogram& s);
Spectrogram decode_spectrogram(const std::string& bytes);

}  // namespace purify
