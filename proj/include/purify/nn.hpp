// include/purify/nn.hpp
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

// Tensor core for the GAN and the probe classifier.
//
// A batch of feature maps is a row-major matrix with one sample per row; a
// row holds C*H*W values, channel-major, so it is the NCHW tensor laid flat.
// Every forward op has a backward op that accumulates parameter gradients
// into caller-owned buffers and returns the input gradient.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace purify::nn {

using Index = Eigen::Index;
using Batch = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dims {
  Index c = 1, h = 1, w = 1;

  Index plane() const { return h * w; }
  Index size() const { return c * h * w; }
  bool operator==(const Dims&) const = default;
};

/// Shape plus row-major values.
struct Tensor {
  std::vector<Index> shape;
  Eigen::VectorXd values;

  Tensor() = default;
  Tensor(std::vector<Index> s, Eigen::VectorXd v);

  Index numel() const;
  /// Throws ShapeMismatch or NonFinite.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Layers. Weight matrices are (out x in); a k x k convolution flattens its
// filter as (cout x cin*k*k) in (ci, ky, kx) order.

Batch linear(const Batch& x, const Eigen::MatrixXd& w, const Eigen::Ref<const Eigen::VectorXd>& b);
Batch linear_backward(const Batch& x, const Eigen::MatrixXd& w, const Batch& dy, Eigen::MatrixXd& dw,
                      Eigen::Ref<Eigen::VectorXd> db);

/// Stride 1, zero padding k/2, k odd.
Batch conv2d(const Batch& x, Dims in, const Eigen::MatrixXd& w, const Eigen::Ref<const Eigen::VectorXd>& b, int k);
Batch conv2d_backward(const Batch& x, Dims in, const Eigen::MatrixXd& w, int k, const Batch& dy,
                      Eigen::MatrixXd& dw, Eigen::Ref<Eigen::VectorXd> db);

Batch relu(const Batch& x);
Batch relu_backward(const Batch& x, const Batch& dy);

Batch tanh(const Batch& x);
/// Takes the forward output.
Batch tanh_backward(const Batch& y, const Batch& dy);

/// Nearest-neighbour x2.
Batch upsample2(const Batch& x, Dims in);
Batch upsample2_backward(const Batch& dy, Dims in);

Batch avgpool2(const Batch& x, Dims in);
Batch avgpool2_backward(const Batch& dy, Dims in);

/// Records the flat index of each window maximum (first on ties).
Batch maxpool2(const Batch& x, Dims in, std::vector<Index>* argmax);
Batch maxpool2_backward(const Batch& dy, Dims in, const std::vector<Index>& argmax);

/// Sum over spatial positions: (N, C*H*W) -> (N, C).
Batch spatial_sum(const Batch& x, Dims in);
Batch spatial_sum_backward(const Batch& dy, Dims in);

struct BatchNormCache {
  Eigen::VectorXd mean, var, inv_std;
  Batch xhat;
};

/// Per-channel normalisation. In training mode the batch statistics are
/// used and returned in the cache; otherwise mean/var are the running ones.
Batch batchnorm(const Batch& x, Dims d, const Eigen::Ref<const Eigen::VectorXd>& gamma,
                const Eigen::Ref<const Eigen::VectorXd>& beta, const Eigen::Ref<const Eigen::VectorXd>& mean,
                const Eigen::Ref<const Eigen::VectorXd>& var, bool training, double eps, BatchNormCache* cache);
Batch batchnorm_backward(const BatchNormCache& cache, Dims d, const Eigen::Ref<const Eigen::VectorXd>& gamma,
                         bool training, const Batch& dy, Eigen::Ref<Eigen::VectorXd> dgamma,
                         Eigen::Ref<Eigen::VectorXd> dbeta);

/// Dot-product self-attention over the H*W positions:
///   out = x + gamma * W_o (W_g x) softmax((W_theta x)^T (W_phi x))^T
struct NonLocalWeights {
  const Eigen::MatrixXd& theta;  // c1 x C
  const Eigen::MatrixXd& phi;    // c1 x C
  const Eigen::MatrixXd& g;      // c2 x C
  const Eigen::MatrixXd& out;    // C x c2
  double gamma;
};

struct NonLocalGrads {
  Eigen::MatrixXd& theta;
  Eigen::MatrixXd& phi;
  Eigen::MatrixXd& g;
  Eigen::MatrixXd& out;
  double& gamma;
};

struct NonLocalCache {
  // attn is keys x queries: column q is the softmax weight vector of query q.
  std::vector<Eigen::MatrixXd> theta, phi, g, attn, y;
};

Batch nonlocal(const Batch& x, Dims d, const NonLocalWeights& w, NonLocalCache* cache);
Batch nonlocal_backward(const Batch& x, Dims d, const NonLocalWeights& w, const NonLocalCache& cache,
                        const Batch& dy, NonLocalGrads grads);

/// Rows of `table` selected by id.
Batch embedding(const Eigen::MatrixXd& table, const std::vector<int>& ids);
void embedding_backward(const std::vector<int>& ids, const Batch& dy, Eigen::MatrixXd& dtable);

/// Column-wise concatenation [a | b].
Batch concat(const Batch& a, const Batch& b);

/// log(1 + exp(x)) without overflow.
double softplus(double x);
double sigmoid(double x);

// ---------------------------------------------------------------------------
// Weight conditioning.

/// Orthogonal matrix from the QR factorisation of a Gaussian draw, with the
/// signs of R's diagonal folded into Q; the smaller-side Gram is gain^2 I.
Eigen::MatrixXd orthogonal_init(Index rows, Index cols, double gain, std::mt19937_64& rng);

struct OrthoPenalty {
  double penalty = 0.0;
  Eigen::MatrixXd gradient;
};

/// beta * ||W^T W (.) (1 - I)||_F^2 and its gradient 4 beta W (W^T W (.) (1 - I)).
OrthoPenalty orthogonal_regularizer(const Eigen::Ref<const Eigen::MatrixXd>& w, double beta);

/// Power-iteration state; u has w.rows() entries.
struct SpectralState {
  Eigen::VectorXd u, v;
  double sigma = 1.0;
};

/// Fresh state with a deterministic unit start vector.
SpectralState spectral_state(Index rows, std::mt19937_64& rng);

/// One power-iteration step on `st`, then w / sigma. Throws ZeroMatrix.
Eigen::MatrixXd spectral_normalize(const Eigen::MatrixXd& w, SpectralState& st);

/// sigma estimate for the current u without advancing the iteration.
double spectral_sigma(const Eigen::MatrixXd& w, SpectralState& st);

/// Gradient with respect to w given the gradient with respect to w / sigma,
/// holding u and v fixed: (G - <G, w/sigma> u v^T) / sigma.
Eigen::MatrixXd spectral_normalize_backward(const Eigen::MatrixXd& w, const SpectralState& st,
                                            const Eigen::MatrixXd& grad_normalized);

// ---------------------------------------------------------------------------
// Adam.

struct AdamHyper {
  double lr = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

struct AdamMoments {
  Eigen::MatrixXd m, v;
};

/// Bias-corrected Adam update of `param` in place, t >= 1. Throws ShapeMismatch.
void adam_step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamMoments& state, std::int64_t t,
               const AdamHyper& h);

// ---------------------------------------------------------------------------
// Named parameter list shared by the models.

struct Param {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  bool spectral = false;    // divided by its largest singular value on use
  bool orthogonal = false;  // enters the orthogonal regulariser
  SpectralState sn;
};

class ParamSet {
 public:
  std::size_t add(std::string name, Eigen::MatrixXd value, bool spectral, bool orthogonal);

  Param& operator[](std::size_t i) { return items_[i]; }
  const Param& operator[](std::size_t i) const { return items_[i]; }
  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  void zero_grad();
  Index count() const;

  /// Bumped on every in-place update; traces remember it.
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  bool operator==(const ParamSet& o) const;

 private:
  std::vector<Param> items_;
  std::uint64_t version_ = 0;
};

struct AdamState {
  std::vector<AdamMoments> moments;
  std::int64_t t = 0;
};

/// One Adam step over every parameter with its accumulated gradient.
void adam_step(ParamSet& params, AdamState& state, const AdamHyper& h);

/// Adds the orthogonal penalty of every flagged parameter to its gradient
/// and returns the summed penalty. Filters are the rows of the weight.
double add_orthogonal_penalty(ParamSet& params, double beta);

}  // namespace purify::nn
