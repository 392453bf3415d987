// include/purify/ccgan.hpp
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

// Class-conditional GAN over S x S spectrogram grids.
//
// Generator: [z | embed(c)] -> linear -> 4x4xC0 -> residual up-blocks to S
// (channels halve per block down to min_channels) -> non-local block ahead of
// the last up-block -> batch norm -> ReLU -> 3x3 conv to one channel -> tanh.
// Every generator weight is spectrally normalised.
//
// Discriminator: one residual block (two 3x3 convs with a 1x1 skip, average
// pooling) -> non-local block at S/2 -> ReLU -> max pooling -> linear logit,
// plus a class projection <embed_D(c), spatial sum of the final features>.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "purify/nn.hpp"

namespace purify {

struct GeneratorConfig {
  int latent_dim = 32;
  int embed_dim = 16;
  int n_classes = 2;
  int base_channels = 16;
  int min_channels = 4;
  int resolution = 32;
  bool use_nonlocal = true;
  bool spectral_norm = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static GeneratorConfig paper_preset(int n_classes);
  static GeneratorConfig desk_preset(int n_classes);

  void validate() const;
  /// Up-blocks between 4x4 and S x S.
  int n_blocks() const;
  /// Channels entering block i; the last entry is the final feature width.
  std::vector<int> channels() const;

  bool operator==(const GeneratorConfig&) const = default;
};

struct DiscriminatorConfig {
  int resolution = 32;
  int channels = 16;
  int n_classes = 2;
  bool use_nonlocal = true;

  static DiscriminatorConfig matching(const GeneratorConfig& g, int channels = 16);

  void validate() const;
  bool operator==(const DiscriminatorConfig&) const = default;
};

struct TrainingConfig {
  int batch_size = 32;
  double lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  int g_steps_per_d = 2;
  double lr_decay = 0.99;  // per epoch
  int max_iters = 2000;    // discriminator updates
  int collapse_window = 100;
  double collapse_accuracy = 0.99;
  int checkpoint_every = 100;
  double ortho_beta = 1e-4;
  std::uint64_t seed = 0;

  /// Small-resolution schedule: lr 1e-3, 500 iterations.
  static TrainingConfig desk_preset();
  void validate() const;
};

// ---------------------------------------------------------------------------

struct GeneratorTrace;
struct DiscriminatorTrace;

class Generator {
 public:
  struct BnStats {
    Eigen::VectorXd mean, var;
    bool operator==(const BnStats&) const = default;
  };

  Generator() = default;
  /// Orthogonal initialisation from `seed`.
  Generator(const GeneratorConfig& cfg, std::uint64_t seed);

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  std::vector<BnStats>& bn_stats() { return bn_; }
  const std::vector<BnStats>& bn_stats() const { return bn_; }

  /// z is N x latent_dim; returns N x S*S with entries in (-1, 1). With
  /// batch_stats false the running batch-norm statistics are used, which
  /// makes the output a pure function of (z, class).
  nn::Batch forward(const nn::Batch& z, const std::vector<int>& classes, bool batch_stats,
                    GeneratorTrace* trace = nullptr) const;

  /// Accumulates parameter gradients and returns dL/dz. Throws StaleTrace if
  /// the parameters changed since the forward call.
  nn::Batch backward(const GeneratorTrace& trace, const nn::Batch& dout);

  /// One power-iteration step for every spectrally normalised weight.
  void advance_spectral();
  /// Exponential moving average of the batch statistics in `trace`.
  void update_running_stats(const GeneratorTrace& trace);

  /// Largest singular value of each normalised weight, from the current u, v.
  std::vector<double> normalized_sigmas() const;

  bool operator==(const Generator& o) const;

 private:
  friend struct GeneratorLayout;
  GeneratorConfig cfg_;
  nn::ParamSet params_;
  std::vector<BnStats> bn_;
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

  const DiscriminatorConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  /// x is N x 3*S*S (channel-major); returns N x 1 logits.
  nn::Batch forward(const nn::Batch& x, const std::vector<int>& classes, DiscriminatorTrace* trace = nullptr) const;
  /// Accumulates parameter gradients and returns dL/dx.
  nn::Batch backward(const DiscriminatorTrace& trace, const nn::Batch& dlogit);

  /// Spatially summed final features (N x channels) that the class
  /// projection multiplies.
  nn::Batch pooled_features(const nn::Batch& x) const;

  bool operator==(const Discriminator& o) const { return cfg_ == o.cfg_ && params_ == o.params_; }

 private:
  DiscriminatorConfig cfg_;
  nn::ParamSet params_;
};

struct GeneratorTrace {
  std::uint64_t version = 0;
  const Generator* owner = nullptr;
  bool batch_stats = false;
  std::vector<int> classes;
  nn::Batch h;                               // [z | embedding]
  std::vector<Eigen::MatrixXd> weights;      // effective (normalised) weights per parameter
  std::vector<nn::SpectralState> spectral;   // u, v, sigma used per parameter
  struct Block {
    nn::Batch x, b1, r1, u1, c1, b2, r2, us;
    nn::BatchNormCache bn1, bn2;
  };
  std::vector<Block> blocks;
  nn::Batch nl_in;
  nn::NonLocalCache nl;
  nn::Batch final_in, bf, rf, y;
  nn::BatchNormCache bnf;
};

struct DiscriminatorTrace {
  std::uint64_t version = 0;
  const Discriminator* owner = nullptr;
  std::vector<int> classes;
  nn::Batch x, h1, r1, p, q, m, e, pooled;
  nn::NonLocalCache nl;
  std::vector<Eigen::Index> argmax;
};

/// Replicates an N x S*S batch into three channels and back (summing).
nn::Batch to_three_channels(const nn::Batch& g);
nn::Batch sum_three_channels(const nn::Batch& g3);

/// Single-sample inference with running statistics: an S x S tensor.
nn::Tensor generator_forward(const Generator& g, const Eigen::Ref<const Eigen::VectorXd>& z, int class_id);
Eigen::MatrixXd generate_grid(const Generator& g, const Eigen::Ref<const Eigen::VectorXd>& z, int class_id);
/// x has shape {3, S, S}.
double discriminator_forward(const Discriminator& d, const nn::Tensor& x, int class_id);

// ---------------------------------------------------------------------------
// Training.

struct LabeledGrid {
  Eigen::MatrixXd grid;  // S x S, values in [-1, 1]
  int label = 0;
};

struct TrainHistory {
  std::vector<double> d_loss;      // one per discriminator update
  std::vector<double> d_accuracy;  // real/fake accuracy of that update's batch
  std::vector<double> g_loss;      // one per generator update
  std::int64_t d_updates = 0;
  std::int64_t g_updates = 0;

  bool operator==(const TrainHistory&) const = default;
};

struct Checkpoint {
  Generator generator;
  Discriminator discriminator;
  nn::AdamState g_opt, d_opt;
  std::int64_t iteration = 0;
  TrainHistory history;
  std::string rng_state;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::size_t selected = 0;
  /// First iteration of the window that tripped the collapse detector.
  std::optional<std::int64_t> collapse_start;

  const Checkpoint& model() const { return checkpoints.at(selected); }
};

using TrainProgress = std::function<void(std::int64_t iteration, const TrainHistory&)>;

/// Alternating non-saturating GAN training. Throws EmptyClass, DivergedLoss,
/// BadConfig.
TrainResult gan_train(const std::vector<LabeledGrid>& data, const GeneratorConfig& gcfg,
                      const DiscriminatorConfig& dcfg, const TrainingConfig& tcfg,
                      const TrainProgress& progress = {});

/// Running statistics re-estimated from `batches` batch-statistic passes over
/// N(0, I) latents and uniform classes.
void standing_statistics(Generator& g, int batches, int batch_size, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Checkpoint file: "PCKP", version byte, config block as key=value text, then
// little-endian float64 arrays in declaration order.

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace purify
