// src/eval.cpp
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

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <random>

#include "purify/error.hpp"
#include "purify/eval.hpp"

namespace purify {

using Eigen::Index;

// ---------------------------------------------------------------------------
// Transcripts

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::size_t a = i, b = j;
    while (a < b && std::ispunct(static_cast<unsigned char>(text[a]))) ++a;
    while (b > a && std::ispunct(static_cast<unsigned char>(text[b - 1]))) --b;
    if (b > a) {
      std::string w(text.substr(a, b - a));
      for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.push_back(std::move(w));
    }
    i = j;
  }
  return out;
}

TranscriptPair TranscriptPair::from_text(std::string_view reference, std::string_view hypothesis) {
  return {tokenize(reference), tokenize(hypothesis)};
}

EditCounts align_words(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1), d[i][j - 1] + 1, d[i - 1][j] + 1});

  EditCounts e;
  e.reference_words = static_cast<int>(n);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int diag = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (d[i][j] == d[i - 1][j - 1] + diag) {
        e.substitutions += diag;
        --i, --j;
        continue;
      }
    }
    if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++e.insertions;
      --j;
    } else {
      ++e.deletions;
      --i;
    }
  }
  return e;
}

double wer(const TranscriptPair& p) {
  if (p.reference.empty()) throw Error(Errc::EmptyReference, "reference transcript has no words");
  const EditCounts e = align_words(p.reference, p.hypothesis);
  return 100.0 * e.total() / static_cast<double>(e.reference_words);
}

double sla(const std::vector<TranscriptPair>& pairs) {
  if (pairs.empty()) throw Error(Errc::EmptyBatch, "no transcript pairs");
  const auto hits = std::count_if(pairs.begin(), pairs.end(), [](const TranscriptPair& p) {
    return p.reference == p.hypothesis;
  });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Synthetic audio

void SyntheticConfig::validate() const {
  if (n_classes < 1 || per_class < 1 || bands_per_class < 1)
    throw Error(Errc::BadConfig, "synthetic counts must be positive");
  if (length < 1) throw Error(Errc::BadConfig, "synthetic length must be positive");
  if (!(freq_lo > 0.0 && freq_hi > freq_lo && freq_hi < kSampleRate / 2.0))
    throw Error(Errc::BadConfig, "synthetic band range must satisfy 0 < lo < hi < Nyquist");
}

std::vector<double> synthetic_band_frequencies(const SyntheticConfig& cfg, int class_id) {
  cfg.validate();
  if (class_id < 0 || class_id >= cfg.n_classes) throw Error(Errc::BadConfig, "class id out of range");
  const int total = cfg.bands_per_class * cfg.n_classes;
  std::vector<double> f;
  for (int j = class_id; j < total; j += cfg.n_classes) {
    const double t = total > 1 ? static_cast<double>(j) / (total - 1) : 0.0;
    f.push_back(cfg.freq_lo * std::pow(cfg.freq_hi / cfg.freq_lo, t));
  }
  return f;
}

std::vector<LabeledWave> make_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double fs = kSampleRate;
  const Index L = cfg.length;
  // 10 ms raised-cosine fade at both ends keeps clip edges from smearing
  // energy across every scale.
  const Index fade = std::min<Index>(L / 2, static_cast<Index>(0.01 * fs));
  std::vector<LabeledWave> out;
  for (int c = 0; c < cfg.n_classes; ++c) {
    const std::vector<double> bands = synthetic_band_frequencies(cfg, c);
    for (int k = 0; k < cfg.per_class; ++k) {
      std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                        static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(k)};
      std::mt19937_64 rng(seq);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::normal_distribution<double> nd;
      Eigen::VectorXd x = Eigen::VectorXd::Zero(L);
      for (double f0 : bands) {
        const double f = f0 * (1.0 + 0.06 * (u(rng) - 0.5));
        const double amp = 0.6 + 0.4 * u(rng);
        const double phase = two_pi * u(rng);
        const double f_am = 2.0 + 6.0 * u(rng);
        const double phase_am = two_pi * u(rng);
        for (Index t = 0; t < L; ++t) {
          const double tt = static_cast<double>(t) / fs;
          x[t] += amp * (0.6 + 0.4 * std::sin(two_pi * f_am * tt + phase_am)) * std::sin(two_pi * f * tt + phase);
        }
      }
      for (Index t = 0; t < fade; ++t) {
        const double g = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(fade));
        x[t] *= g;
        x[L - 1 - t] *= g;
      }
      const double peak = x.cwiseAbs().maxCoeff();
      if (peak > 0.0) x *= 0.9 / peak;
      const double sd = 0.9 * std::pow(10.0, cfg.noise_db / 20.0);
      for (auto& v : x) v = std::clamp(v + sd * nd(rng), -1.0, 1.0);
      out.push_back({Waveform::from_samples(std::move(x)), c});
    }
  }
  return out;
}

std::string class_word(int class_id) {
  static const char* names[] = {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"};
  if (class_id >= 0 && class_id < 10) return names[class_id];
  return "class" + std::to_string(class_id);
}

SquareGrid analysis_grid(const Waveform& w, const TfaConfig& tfa, Index S) {
  const Spectrogram s = cwt_forward(w, tfa);
  const SquareGrid g = resize_bilinear(s.magnitude_db, S);
  return {to_rgb(g).channels[0], g.source_dims};
}

}  // namespace purify
