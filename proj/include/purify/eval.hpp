// include/purify/eval.hpp
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

// Scoring, the desk-scale probe classifier and its gradient-sign attack,
// synthetic band-pattern audio, the external recognizer bridge, and the
// attack -> defend -> transcribe -> score experiment loop.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "purify/ccgan.hpp"
#include "purify/defense.hpp"
#include "purify/nn.hpp"
#include "purify/signal.hpp"
#include "purify/tfa.hpp"

namespace purify {

// ---------------------------------------------------------------------------
// Transcripts

/// Lowercase, split on whitespace, strip leading/trailing punctuation; tokens
/// left empty are dropped.
std::vector<std::string> tokenize(std::string_view text);

struct TranscriptPair {
  std::vector<std::string> reference;
  std::vector<std::string> hypothesis;

  static TranscriptPair from_text(std::string_view reference, std::string_view hypothesis);
};

struct EditCounts {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  int reference_words = 0;

  int total() const { return substitutions + insertions + deletions; }
};

/// Minimum unit-cost word alignment; ties prefer substitution, then
/// insertion, then deletion.
EditCounts align_words(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

/// 100 (I + S + D) / N. Throws EmptyReference.
double wer(const TranscriptPair& p);

/// Percentage of pairs whose hypothesis equals the reference. Throws
/// EmptyBatch.
double sla(const std::vector<TranscriptPair>& pairs);

// ---------------------------------------------------------------------------
// Synthetic band-pattern audio

struct SyntheticConfig {
  int n_classes = 2;
  int per_class = 64;
  Eigen::Index length = 4000;
  int bands_per_class = 3;
  double freq_lo = 150.0;
  double freq_hi = 6000.0;
  double noise_db = -40.0;  // white floor relative to the tone peak
  std::uint64_t seed = 0;

  void validate() const;
};

struct LabeledWave {
  Waveform wave;
  int label = 0;
};

/// Tone frequencies (Hz) owned by a class: bands_per_class * n_classes
/// log-spaced frequencies dealt out round-robin.
std::vector<double> synthetic_band_frequencies(const SyntheticConfig& cfg, int class_id);

/// per_class items for each class, ordered by class then index. Each item is
/// a sum of the class's tones with jittered frequency, random phase and a
/// slow amplitude envelope, over a white noise floor, peak-normalised to 0.9.
std::vector<LabeledWave> make_synthetic(const SyntheticConfig& cfg);

/// Spoken form of a class label used as a one-word transcript.
std::string class_word(int class_id);

/// cwt -> resize to S -> to_rgb, first channel: the grid the generator and
/// the probe see.
SquareGrid analysis_grid(const Waveform& w, const TfaConfig& tfa, Eigen::Index S);

// ---------------------------------------------------------------------------
// Probe classifier: conv3 -> relu -> maxpool -> conv3 -> relu -> avgpool ->
// linear, softmax cross-entropy.

struct ProbeConfig {
  int resolution = 32;
  int channels = 8;
  int n_classes = 2;
  int epochs = 5;
  int batch_size = 16;
  double lr = 1e-3;
  double holdout = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ProbeConfig&) const = default;
};

struct ProbeReport {
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

class ProbeClassifier {
 public:
  ProbeClassifier() = default;
  ProbeClassifier(const ProbeConfig& cfg, std::uint64_t seed);

  const ProbeConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  /// x is N x S*S (row-major grids); returns N x n_classes logits.
  nn::Batch logits(const nn::Batch& x) const;
  int predict(const Eigen::MatrixXd& grid) const;
  /// Mean cross-entropy against `labels`; accumulates parameter gradients
  /// when `grads` is set and returns dL/dx in `dx` when non-null.
  double loss(const nn::Batch& x, const std::vector<int>& labels, bool grads, nn::Batch* dx);

  bool operator==(const ProbeClassifier&) const = default;

 private:
  ProbeConfig cfg_;
  nn::ParamSet params_;
};

/// Row-major flattening of an S x S grid into a 1 x S*S batch row.
nn::Batch grid_batch(const Eigen::MatrixXd& grid);

/// Adam on shuffled mini-batches. The last `holdout` fraction of a seeded
/// per-class shuffle is held out. Throws EmptyClass.
ProbeClassifier train_probe(const std::vector<LabeledGrid>& data, const ProbeConfig& cfg,
                            ProbeReport* report = nullptr);

std::string encode_probe(const ProbeClassifier& p);
ProbeClassifier decode_probe(const std::string& bytes);
void save_probe(const ProbeClassifier& p, const std::filesystem::path& path);
ProbeClassifier load_probe(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Gradient-sign attack against the probe

struct AttackConfig {
  double loudness_bound_db = -15.0;  // max |delta| relative to max |x|
  int steps = 20;
  bool clamp = true;

  void validate() const;
};

struct AttackResult {
  Perturbation perturbation;
  Waveform adversarial;
  int target = 0;
  int clean_prediction = 0;
  int adversarial_prediction = 0;
  double loudness_db = 0.0;
  double psd_distortion_db = 0.0;

  bool success() const { return adversarial_prediction == target; }
};

/// dL/dx of the probe's cross-entropy for `target`, through the wavelet
/// transform, dB, resize and normalisation (min/max held fixed). Requires
/// tfa.hop == 1; otherwise throws GradientUnavailable.
Eigen::VectorXd probe_input_gradient(const Waveform& x, ProbeClassifier& probe, int target, const TfaConfig& tfa);

/// Targeted sign steps of size 2 eps/steps on a momentum (0.9) average of
/// L1-normalised gradients, clipped to |delta| <= eps
/// and to the loudness bound; stops once the target is predicted. eps is an
/// absolute amplitude; eps = 0 yields a zero perturbation.
AttackResult craft_perturbation(const Waveform& x, ProbeClassifier& probe, int target, double eps,
                                const TfaConfig& tfa, const AttackConfig& cfg = {});

/// Largest eps allowed by the loudness bound for carrier x.
double loudness_eps(const Waveform& x, double bound_db);

// ---------------------------------------------------------------------------
// External recognizer: `command` runs through /bin/sh with the WAV bytes on
// standard input and must print the transcript on standard output.

std::vector<std::string> recognizer_bridge(const Waveform& w, const std::string& command, double timeout_s = 60.0);

// ---------------------------------------------------------------------------
// Experiments

/// filename<TAB>class_id[<TAB>transcript] lines; relative names resolve
/// against the index's directory. Blank lines and '#' comments are skipped.
struct IndexEntry {
  std::filesystem::path path;
  int label = 0;
  std::string transcript;
};
std::vector<IndexEntry> read_index(const std::filesystem::path& index);
void write_index(const std::vector<IndexEntry>& entries, const std::filesystem::path& index);

enum class RecognizerKind { Echo, Probe, Command };

struct ExperimentConfig {
  std::filesystem::path dataset;  // index file
  std::filesystem::path generator;
  std::filesystem::path probe;
  std::uint64_t seed = 0;
  bool attack = true;
  AttackConfig attack_cfg;
  bool defense = true;
  DefenseConfig defense_cfg;
  TfaConfig tfa;
  RecognizerKind recognizer = RecognizerKind::Probe;
  std::string recognizer_command;
  double recognizer_timeout_s = 60.0;
  /// Only items whose attack succeeds are scored in either arm.
  bool successful_attacks_only = true;
  std::filesystem::path report;  // key=value output, optional
};

/// INI-style text: [section] headers and key = value lines.
ExperimentConfig parse_experiment_config(const std::string& text, const std::filesystem::path& base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ItemRecord {
  std::string name;
  int label = 0;
  bool attacked = false;
  bool attack_success = false;
  double loudness_db = 0.0;
  std::vector<std::string> reference;
  std::vector<std::string> hypothesis;
  double wer = 0.0;
  int k_used = 0;
  bool converged = false;
};

struct ArmReport {
  std::string name;
  double wer_percent = 0.0;
  double sla_percent = 0.0;
  int n_total = 0;
  double mean_k = 0.0;
  std::vector<ItemRecord> items;
};

struct EvalReport {
  ArmReport undefended;
  std::optional<ArmReport> defended;
  int n_items = 0;
  int n_attack_success = 0;
};

EvalReport run_experiment(const ExperimentConfig& cfg);
EvalReport run_experiment(const std::filesystem::path& cfg_file);

/// Human-readable table, one row per arm.
std::string report_table(const EvalReport& r);
/// key=value lines; bitwise stable for identical reports.
std::string report_text(const EvalReport& r);

}  // namespace purify
