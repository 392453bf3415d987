// include/purify/signal.hpp
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

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>

#include <Eigen/Dense>

namespace purify {

inline constexpr int kSampleRate = 16000;

/// Mono 16 kHz waveform with samples in [-1, 1].
struct Waveform {
  Eigen::VectorXd samples;
  int sample_rate = kSampleRate;
  std::optional<std::string> source_path;

  Eigen::Index size() const { return samples.size(); }
  bool empty() const { return samples.size() == 0; }

  static Waveform from_samples(Eigen::VectorXd s) {
    Waveform w;
    w.samples = std::move(s);
    return w;
  }
};

/// Additive perturbation with its loudness relative to the carrier it was
/// crafted for (NaN when not yet measured).
struct Perturbation {
  Eigen::VectorXd delta;
  double loudness_db_rel = std::numeric_limits<double>::quiet_NaN();
};

// ---------------------------------------------------------------------------
// WAV I/O. RIFF/WAVE, PCM16 little-endian, mono, 16000 Hz only.

Waveform load_wav(const std::filesystem::path& path);
void save_wav(const Waveform& w, const std::filesystem::path& path);

/// Encode/decode without touching the filesystem; load_wav/save_wav use these.
std::string encode_wav(const Waveform& w);
Waveform decode_wav(const std::string& bytes);

/// Maps a sample in [-1, 1] to the PCM16 grid (1.0 -> 32767).
std::int16_t to_pcm16(double v);

// ---------------------------------------------------------------------------
// Distortion measurements.

/// 20*log10(max |x|). Throws SilentSignal for an all-zero input.
double loudness_db(const Eigen::Ref<const Eigen::VectorXd>& x);
double loudness_db(const Waveform& w);

/// loudness_db(delta) - loudness_db(x).
double relative_loudness_db(const Waveform& x, const Perturbation& d);

/// Framed periodogram with a periodic Hann window. Rows are frames, columns
/// are the frame_len/2 + 1 one-sided bins; each entry is |DFT|^2 / frame_len.
Eigen::MatrixXd psd(const Eigen::Ref<const Eigen::VectorXd>& x, int frame_len, int hop);
Eigen::MatrixXd psd(const Waveform& w, int frame_len, int hop);

/// 10*log10(max|rho_delta|^2) - 10*log10(max|rho_x|^2), max over all bins.
double psd_distortion_db(const Waveform& x, const Perturbation& d, int frame_len, int hop);

/// Per-bin version of the above, 10*log10(|rho_delta|^2 / |rho_x|^2), with
/// both PSDs floored at `floor` to keep entries finite.
Eigen::MatrixXd psd_distortion_bins_db(const Waveform& x, const Perturbation& d, int frame_len,
                                       int hop, double floor = 1e-30);

/// SNR of `test` against `ref` after scaling both to unit peak, in dB.
double aligned_snr_db(const Eigen::Ref<const Eigen::VectorXd>& ref,
                      const Eigen::Ref<const Eigen::VectorXd>& test);

Waveform inject_perturbation(const Waveform& x, const Perturbation& d, bool clamp);

/// Fills in d.loudness_db_rel against x.
Perturbation measured(const Waveform& x, Perturbation d);

}  // namespace purify
