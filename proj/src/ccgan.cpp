// src/ccgan.cpp
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

#include "purify/ccgan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "purify/binio.hpp"
#include "purify/error.hpp"

namespace purify {

using nn::Batch;
using nn::Dims;
using Eigen::Index;

namespace {

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

Eigen::MatrixXd column(Index n, double v) { return Eigen::MatrixXd::Constant(n, 1, v); }

}  // namespace

// ---------------------------------------------------------------------------
// Configs

GeneratorConfig GeneratorConfig::paper_preset(int n_classes) {
  GeneratorConfig c;
  c.latent_dim = 128;
  c.embed_dim = 50;
  c.n_classes = n_classes;
  c.base_channels = 16;
  c.min_channels = 1;
  c.resolution = 128;
  return c;
}

GeneratorConfig GeneratorConfig::desk_preset(int n_classes) {
  GeneratorConfig c;
  c.n_classes = n_classes;
  return c;
}

void GeneratorConfig::validate() const {
  if (!is_pow2(resolution) || resolution < 8)
    throw Error(Errc::BadConfig, "generator resolution must be a power of two >= 8");
  if (latent_dim < 1 || embed_dim < 1 || n_classes < 1 || base_channels < 1 || min_channels < 1)
    throw Error(Errc::BadConfig, "generator sizes must be positive");
  if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0))
    throw Error(Errc::BadConfig, "batch-norm eps/momentum out of range");
}

int GeneratorConfig::n_blocks() const { return std::countr_zero(static_cast<unsigned>(resolution / 4)); }

std::vector<int> GeneratorConfig::channels() const {
  std::vector<int> c{base_channels};
  for (int i = 0; i < n_blocks(); ++i) c.push_back(std::max(c.back() / 2, std::min(min_channels, c.back())));
  return c;
}

DiscriminatorConfig DiscriminatorConfig::matching(const GeneratorConfig& g, int channels) {
  DiscriminatorConfig d;
  d.resolution = g.resolution;
  d.n_classes = g.n_classes;
  d.channels = channels;
  d.use_nonlocal = g.use_nonlocal;
  return d;
}

void DiscriminatorConfig::validate() const {
  if (!is_pow2(resolution) || resolution < 8)
    throw Error(Errc::BadConfig, "discriminator resolution must be a power of two >= 8");
  if (channels < 1 || n_classes < 1) throw Error(Errc::BadConfig, "discriminator sizes must be positive");
}

TrainingConfig TrainingConfig::desk_preset() {
  TrainingConfig t;
  t.lr = 1e-3;
  t.max_iters = 500;
  return t;
}

void TrainingConfig::validate() const {
  if (!(lr > 0.0)) throw Error(Errc::BadConfig, "lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw Error(Errc::BadConfig, "Adam betas must lie in [0, 1)");
  if (batch_size < 1 || g_steps_per_d < 1 || max_iters < 0 || collapse_window < 1 || checkpoint_every < 1)
    throw Error(Errc::BadConfig, "training counts must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw Error(Errc::BadConfig, "lr_decay must lie in (0, 1]");
  if (!(ortho_beta >= 0.0)) throw Error(Errc::BadConfig, "ortho_beta must be >= 0");
}

// ---------------------------------------------------------------------------
// Parameter layouts. Both the constructors and the forward passes walk the
// same declaration order.

struct NonLocalIdx {
  std::size_t theta, phi, g, out, gamma;
};

struct GeneratorLayout {
  struct Block {
    std::size_t bn1_g, bn1_b, conv1_w, conv1_b, bn2_g, bn2_b, conv2_w, conv2_b, skip_w, skip_b;
  };
  std::size_t embed, lin_w, lin_b;
  std::vector<Block> blocks;
  std::optional<NonLocalIdx> nl;
  std::size_t bnf_g, bnf_b, out_w, out_b;

  template <class Add>
  static GeneratorLayout build(const GeneratorConfig& c, Add&& add) {
    GeneratorLayout l;
    const auto ch = c.channels();
    l.embed = add("embed", c.n_classes, c.embed_dim, false, false, 0);
    l.lin_w = add("linear.w", 16 * ch[0], c.latent_dim + c.embed_dim, true, true, 1);
    l.lin_b = add("linear.b", 16 * ch[0], 1, false, false, 2);
    for (int i = 0; i < c.n_blocks(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      const int ci = ch[static_cast<std::size_t>(i)], co = ch[static_cast<std::size_t>(i) + 1];
      if (c.use_nonlocal && i == c.n_blocks() - 1) l.nl = nonlocal_layout(ci, add);
      Block b;
      b.bn1_g = add(p + "bn1.gamma", ci, 1, false, false, 3);
      b.bn1_b = add(p + "bn1.beta", ci, 1, false, false, 2);
      b.conv1_w = add(p + "conv1.w", co, ci * 9, true, true, 1);
      b.conv1_b = add(p + "conv1.b", co, 1, false, false, 2);
      b.bn2_g = add(p + "bn2.gamma", co, 1, false, false, 3);
      b.bn2_b = add(p + "bn2.beta", co, 1, false, false, 2);
      b.conv2_w = add(p + "conv2.w", co, co * 9, true, true, 1);
      b.conv2_b = add(p + "conv2.b", co, 1, false, false, 2);
      b.skip_w = add(p + "skip.w", co, ci * 9, true, true, 1);
      b.skip_b = add(p + "skip.b", co, 1, false, false, 2);
      l.blocks.push_back(b);
    }
    const int cl = ch.back();
    l.bnf_g = add("final.bn.gamma", cl, 1, false, false, 3);
    l.bnf_b = add("final.bn.beta", cl, 1, false, false, 2);
    l.out_w = add("final.conv.w", 1, cl * 9, true, true, 1);
    l.out_b = add("final.conv.b", 1, 1, false, false, 2);
    return l;
  }

  template <class Add>
  static NonLocalIdx nonlocal_layout(int c, Add&& add) {
    const int c1 = std::max(c / 8, 1), c2 = std::max(c / 2, 1);
    NonLocalIdx n;
    n.theta = add("nonlocal.theta", c1, c, true, true, 1);
    n.phi = add("nonlocal.phi", c1, c, true, true, 1);
    n.g = add("nonlocal.g", c2, c, true, true, 1);
    n.out = add("nonlocal.out", c, c2, true, true, 1);
    n.gamma = add("nonlocal.gamma", 1, 1, false, false, 2);
    return n;
  }

  static GeneratorLayout of(const GeneratorConfig& c) {
    std::size_t next = 0;
    return build(c, [&](const std::string&, Index, Index, bool, bool, int) { return next++; });
  }
};

struct DiscriminatorLayout {
  std::size_t conv1_w, conv1_b, conv2_w, conv2_b, skip_w, skip_b;
  std::optional<NonLocalIdx> nl;
  std::size_t lin_w, lin_b, embed;

  template <class Add>
  static DiscriminatorLayout build(const DiscriminatorConfig& c, Add&& add) {
    DiscriminatorLayout l;
    const int ch = c.channels, q = c.resolution / 4;
    l.conv1_w = add("conv1.w", ch, 27, false, true, 1);
    l.conv1_b = add("conv1.b", ch, 1, false, false, 2);
    l.conv2_w = add("conv2.w", ch, ch * 9, false, true, 1);
    l.conv2_b = add("conv2.b", ch, 1, false, false, 2);
    l.skip_w = add("skip.w", ch, 3, false, true, 1);
    l.skip_b = add("skip.b", ch, 1, false, false, 2);
    if (c.use_nonlocal) {
      const int c1 = std::max(ch / 8, 1), c2 = std::max(ch / 2, 1);
      NonLocalIdx n;
      n.theta = add("nonlocal.theta", c1, ch, false, true, 1);
      n.phi = add("nonlocal.phi", c1, ch, false, true, 1);
      n.g = add("nonlocal.g", c2, ch, false, true, 1);
      n.out = add("nonlocal.out", ch, c2, false, true, 1);
      n.gamma = add("nonlocal.gamma", 1, 1, false, false, 2);
      l.nl = n;
    }
    l.lin_w = add("linear.w", 1, ch * q * q, false, true, 1);
    l.lin_b = add("linear.b", 1, 1, false, false, 2);
    l.embed = add("embed", c.n_classes, ch, false, false, 4);
    return l;
  }

  static DiscriminatorLayout of(const DiscriminatorConfig& c) {
    std::size_t next = 0;
    return build(c, [&](const std::string&, Index, Index, bool, bool, int) { return next++; });
  }
};

namespace {

// Initialiser kinds used by the layouts: 0 scaled embedding, 1 orthogonal
// weight, 2 zeros, 3 ones, 4 small embedding.
Eigen::MatrixXd init_param(int kind, Index rows, Index cols, std::mt19937_64& rng) {
  switch (kind) {
    case 0: return nn::orthogonal_init(rows, cols, std::sqrt(static_cast<double>(cols)), rng);
    case 1: return nn::orthogonal_init(rows, cols, 1.0, rng);
    case 3: return column(rows, 1.0);
    case 4: return nn::orthogonal_init(rows, cols, 0.1, rng);
    default: return Eigen::MatrixXd::Zero(rows, cols);
  }
}

nn::NonLocalWeights nl_weights(const std::vector<Eigen::MatrixXd>& w, const NonLocalIdx& n) {
  return {w[n.theta], w[n.phi], w[n.g], w[n.out], w[n.gamma](0, 0)};
}

nn::NonLocalGrads nl_grads(std::vector<Eigen::MatrixXd>& g, const NonLocalIdx& n) {
  return {g[n.theta], g[n.phi], g[n.g], g[n.out], g[n.gamma](0, 0)};
}

std::vector<Eigen::MatrixXd> zeros_like(const nn::ParamSet& ps) {
  std::vector<Eigen::MatrixXd> g;
  g.reserve(ps.size());
  for (const auto& p : ps) g.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
  return g;
}

void check_batch(const Batch& x, Index cols, std::size_t n_classes_given, const char* what) {
  if (x.cols() != cols)
    throw Error(Errc::ShapeMismatch, std::string(what) + ": expected " + std::to_string(cols) + " columns, got " +
                                         std::to_string(x.cols()));
  if (static_cast<std::size_t>(x.rows()) != n_classes_given)
    throw Error(Errc::ShapeMismatch, std::string(what) + ": one class id per sample required");
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  GeneratorLayout::build(cfg_, [&](const std::string& name, Index r, Index c, bool spectral, bool orth, int kind) {
    const std::size_t i = params_.add(name, init_param(kind, r, c, rng), spectral && cfg_.spectral_norm, orth);
    if (params_[i].spectral) params_[i].sn = nn::spectral_state(r, rng);
    return i;
  });
  const auto ch = cfg_.channels();
  for (int i = 0; i < cfg_.n_blocks(); ++i) {
    for (int c : {ch[static_cast<std::size_t>(i)], ch[static_cast<std::size_t>(i) + 1]})
      bn_.push_back({Eigen::VectorXd::Zero(c), Eigen::VectorXd::Ones(c)});
  }
  bn_.push_back({Eigen::VectorXd::Zero(ch.back()), Eigen::VectorXd::Ones(ch.back())});
  advance_spectral();
}

void Generator::advance_spectral() {
  for (auto& p : params_) {
    if (!p.spectral || p.value.cwiseAbs().maxCoeff() == 0.0) continue;
    nn::spectral_normalize(p.value, p.sn);
  }
}

std::vector<double> Generator::normalized_sigmas() const {
  std::vector<double> out;
  for (const auto& p : params_) {
    if (!p.spectral) continue;
    const double s = p.sn.u.dot(p.value * p.sn.v);
    const Eigen::MatrixXd wn = s > 0.0 ? Eigen::MatrixXd(p.value / s) : p.value;
    out.push_back(Eigen::JacobiSVD<Eigen::MatrixXd>(wn).singularValues()(0));
  }
  return out;
}

bool Generator::operator==(const Generator& o) const {
  if (!(cfg_ == o.cfg_ && params_ == o.params_ && bn_ == o.bn_)) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].sn.v != o.params_[i].sn.v) return false;
  return true;
}

Batch Generator::forward(const Batch& z, const std::vector<int>& classes, bool batch_stats,
                         GeneratorTrace* trace) const {
  if (params_.size() == 0) throw Error(Errc::GeneratorUnavailable, "generator has no parameters");
  check_batch(z, cfg_.latent_dim, classes.size(), "generator");
  const GeneratorLayout L = GeneratorLayout::of(cfg_);
  const auto ch = cfg_.channels();
  const double eps = cfg_.bn_eps;

  GeneratorTrace local;
  GeneratorTrace& t = trace ? *trace : local;
  t = GeneratorTrace{};
  t.version = params_.version();
  t.owner = this;
  t.batch_stats = batch_stats;
  t.classes = classes;
  t.weights.resize(params_.size());
  t.spectral.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    if (p.spectral) {
      nn::SpectralState s = p.sn;
      s.sigma = s.u.dot(p.value * s.v);
      t.weights[i] = s.sigma > 0.0 ? Eigen::MatrixXd(p.value / s.sigma) : p.value;
      t.spectral[i] = std::move(s);
    } else {
      t.weights[i] = p.value;
    }
  }
  const auto& W = t.weights;
  auto bn_fwd = [&](const Batch& x, Dims d, std::size_t g, std::size_t b, std::size_t stat, nn::BatchNormCache* c) {
    return nn::batchnorm(x, d, W[g].col(0), W[b].col(0), bn_[stat].mean, bn_[stat].var, batch_stats, eps, c);
  };

  t.h = nn::concat(z, nn::embedding(W[L.embed], classes));
  Batch x = nn::linear(t.h, W[L.lin_w], W[L.lin_b].col(0));
  Index r = 4;
  t.blocks.resize(L.blocks.size());
  for (std::size_t i = 0; i < L.blocks.size(); ++i) {
    const auto& B = L.blocks[i];
    auto& T = t.blocks[i];
    const Dims din{ch[i], r, r}, dup{ch[i], 2 * r, 2 * r}, dout{ch[i + 1], 2 * r, 2 * r};
    if (L.nl && i + 1 == L.blocks.size()) {
      t.nl_in = x;
      x = nn::nonlocal(x, din, nl_weights(W, *L.nl), &t.nl);
    }
    T.x = x;
    T.b1 = bn_fwd(x, din, B.bn1_g, B.bn1_b, 2 * i, &T.bn1);
    T.r1 = nn::relu(T.b1);
    T.u1 = nn::upsample2(T.r1, din);
    T.c1 = nn::conv2d(T.u1, dup, W[B.conv1_w], W[B.conv1_b].col(0), 3);
    T.b2 = bn_fwd(T.c1, dout, B.bn2_g, B.bn2_b, 2 * i + 1, &T.bn2);
    T.r2 = nn::relu(T.b2);
    T.us = nn::upsample2(x, din);
    x = nn::conv2d(T.r2, dout, W[B.conv2_w], W[B.conv2_b].col(0), 3) +
        nn::conv2d(T.us, dup, W[B.skip_w], W[B.skip_b].col(0), 3);
    r *= 2;
  }
  const Dims df{ch.back(), r, r};
  t.final_in = x;
  t.bf = bn_fwd(x, df, L.bnf_g, L.bnf_b, bn_.size() - 1, &t.bnf);
  t.rf = nn::relu(t.bf);
  t.y = nn::tanh(nn::conv2d(t.rf, df, W[L.out_w], W[L.out_b].col(0), 3));
  return t.y;
}

Batch Generator::backward(const GeneratorTrace& t, const Batch& dy) {
  if (t.owner != this || t.version != params_.version())
    throw Error(Errc::StaleTrace, "generator parameters changed since the forward pass");
  if (dy.rows() != t.y.rows() || dy.cols() != t.y.cols())
    throw Error(Errc::ShapeMismatch, "generator output gradient has the wrong shape");
  const GeneratorLayout L = GeneratorLayout::of(cfg_);
  const auto ch = cfg_.channels();
  const auto& W = t.weights;
  auto G = zeros_like(params_);
  const bool train = t.batch_stats;
  const Index S = cfg_.resolution;

  const Dims df{ch.back(), S, S};
  Batch g = nn::tanh_backward(t.y, dy);
  g = nn::conv2d_backward(t.rf, df, W[L.out_w], 3, g, G[L.out_w], G[L.out_b].col(0));
  g = nn::relu_backward(t.bf, g);
  g = nn::batchnorm_backward(t.bnf, df, W[L.bnf_g].col(0), train, g, G[L.bnf_g].col(0), G[L.bnf_b].col(0));

  Index r = S / 2;
  for (std::size_t k = L.blocks.size(); k-- > 0;) {
    const auto& B = L.blocks[k];
    const auto& T = t.blocks[k];
    const Dims din{ch[k], r, r}, dup{ch[k], 2 * r, 2 * r}, dout{ch[k + 1], 2 * r, 2 * r};
    Batch m = nn::conv2d_backward(T.r2, dout, W[B.conv2_w], 3, g, G[B.conv2_w], G[B.conv2_b].col(0));
    m = nn::relu_backward(T.b2, m);
    m = nn::batchnorm_backward(T.bn2, dout, W[B.bn2_g].col(0), train, m, G[B.bn2_g].col(0), G[B.bn2_b].col(0));
    m = nn::conv2d_backward(T.u1, dup, W[B.conv1_w], 3, m, G[B.conv1_w], G[B.conv1_b].col(0));
    m = nn::upsample2_backward(m, din);
    m = nn::relu_backward(T.b1, m);
    m = nn::batchnorm_backward(T.bn1, din, W[B.bn1_g].col(0), train, m, G[B.bn1_g].col(0), G[B.bn1_b].col(0));
    Batch s = nn::conv2d_backward(T.us, dup, W[B.skip_w], 3, g, G[B.skip_w], G[B.skip_b].col(0));
    g = m + nn::upsample2_backward(s, din);
    if (L.nl && k + 1 == L.blocks.size())
      g = nn::nonlocal_backward(t.nl_in, din, nl_weights(W, *L.nl), t.nl, g, nl_grads(G, *L.nl));
    r /= 2;
  }
  const Batch dh = nn::linear_backward(t.h, W[L.lin_w], g, G[L.lin_w], G[L.lin_b].col(0));
  nn::embedding_backward(t.classes, dh.rightCols(cfg_.embed_dim), G[L.embed]);

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.spectral && t.spectral[i].sigma > 0.0)
      p.grad += nn::spectral_normalize_backward(p.value, t.spectral[i], G[i]);
    else
      p.grad += G[i];
  }
  return dh.leftCols(cfg_.latent_dim);
}

void Generator::update_running_stats(const GeneratorTrace& t) {
  if (!t.batch_stats) return;
  const double m = cfg_.bn_momentum;
  auto upd = [&](BnStats& s, const nn::BatchNormCache& c) {
    s.mean = (1.0 - m) * s.mean + m * c.mean;
    s.var = (1.0 - m) * s.var + m * c.var;
  };
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    upd(bn_[2 * i], t.blocks[i].bn1);
    upd(bn_[2 * i + 1], t.blocks[i].bn2);
  }
  upd(bn_.back(), t.bnf);
}

// ---------------------------------------------------------------------------
// Discriminator

Discriminator::Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  DiscriminatorLayout::build(cfg_, [&](const std::string& name, Index r, Index c, bool, bool orth, int kind) {
    return params_.add(name, init_param(kind, r, c, rng), false, orth);
  });
}

Batch Discriminator::forward(const Batch& x, const std::vector<int>& classes, DiscriminatorTrace* trace) const {
  const Index S = cfg_.resolution, C = cfg_.channels;
  check_batch(x, 3 * S * S, classes.size(), "discriminator");
  const DiscriminatorLayout L = DiscriminatorLayout::of(cfg_);
  const auto& P = params_;
  auto w = [&](std::size_t i) -> const Eigen::MatrixXd& { return P[i].value; };

  DiscriminatorTrace local;
  DiscriminatorTrace& t = trace ? *trace : local;
  t = DiscriminatorTrace{};
  t.version = P.version();
  t.owner = this;
  t.classes = classes;
  t.x = x;
  const Dims din{3, S, S}, dc{C, S, S}, dh{C, S / 2, S / 2};
  t.h1 = nn::conv2d(x, din, w(L.conv1_w), w(L.conv1_b).col(0), 3);
  t.r1 = nn::relu(t.h1);
  const Batch s = nn::conv2d(t.r1, dc, w(L.conv2_w), w(L.conv2_b).col(0), 3) +
                  nn::conv2d(x, din, w(L.skip_w), w(L.skip_b).col(0), 1);
  t.p = nn::avgpool2(s, dc);
  if (L.nl) {
    const NonLocalIdx& n = *L.nl;
    t.q = nn::nonlocal(t.p, dh, {w(n.theta), w(n.phi), w(n.g), w(n.out), w(n.gamma)(0, 0)}, &t.nl);
  } else {
    t.q = t.p;
  }
  t.m = nn::maxpool2(nn::relu(t.q), dh, &t.argmax);
  t.e = nn::embedding(w(L.embed), classes);
  t.pooled = nn::spatial_sum(t.m, {C, S / 4, S / 4});
  Batch logit = nn::linear(t.m, w(L.lin_w), w(L.lin_b).col(0));
  logit.col(0) += (t.e.array() * t.pooled.array()).rowwise().sum().matrix();
  return logit;
}

Batch Discriminator::pooled_features(const Batch& x) const {
  DiscriminatorTrace t;
  forward(x, std::vector<int>(static_cast<std::size_t>(x.rows()), 0), &t);
  return t.pooled;
}

Batch Discriminator::backward(const DiscriminatorTrace& t, const Batch& dlogit) {
  if (t.owner != this || t.version != params_.version())
    throw Error(Errc::StaleTrace, "discriminator parameters changed since the forward pass");
  if (dlogit.rows() != t.x.rows() || dlogit.cols() != 1)
    throw Error(Errc::ShapeMismatch, "discriminator logit gradient has the wrong shape");
  const Index S = cfg_.resolution, C = cfg_.channels;
  const DiscriminatorLayout L = DiscriminatorLayout::of(cfg_);
  auto& P = params_;
  auto w = [&](std::size_t i) -> const Eigen::MatrixXd& { return P[i].value; };
  auto gr = [&](std::size_t i) -> Eigen::MatrixXd& { return P[i].grad; };
  const Dims din{3, S, S}, dc{C, S, S}, dh{C, S / 2, S / 2}, dq{C, S / 4, S / 4};

  Batch dm = nn::linear_backward(t.m, w(L.lin_w), dlogit, gr(L.lin_w), gr(L.lin_b).col(0));
  const Batch de = (t.pooled.array().colwise() * dlogit.col(0).array()).matrix();
  const Batch dpool = (t.e.array().colwise() * dlogit.col(0).array()).matrix();
  nn::embedding_backward(t.classes, de, gr(L.embed));
  dm += nn::spatial_sum_backward(dpool, dq);
  Batch g = nn::relu_backward(t.q, nn::maxpool2_backward(dm, dh, t.argmax));
  if (L.nl) {
    const NonLocalIdx& n = *L.nl;
    double dgamma = 0.0;
    g = nn::nonlocal_backward(t.p, dh, {w(n.theta), w(n.phi), w(n.g), w(n.out), w(n.gamma)(0, 0)}, t.nl, g,
                              {gr(n.theta), gr(n.phi), gr(n.g), gr(n.out), dgamma});
    gr(n.gamma)(0, 0) += dgamma;
  }
  g = nn::avgpool2_backward(g, dc);
  Batch dx = nn::conv2d_backward(t.x, din, w(L.skip_w), 1, g, gr(L.skip_w), gr(L.skip_b).col(0));
  Batch m = nn::conv2d_backward(t.r1, dc, w(L.conv2_w), 3, g, gr(L.conv2_w), gr(L.conv2_b).col(0));
  m = nn::relu_backward(t.h1, m);
  dx += nn::conv2d_backward(t.x, din, w(L.conv1_w), 3, m, gr(L.conv1_w), gr(L.conv1_b).col(0));
  return dx;
}

// ---------------------------------------------------------------------------

Batch to_three_channels(const Batch& g) {
  Batch y(g.rows(), 3 * g.cols());
  y << g, g, g;
  return y;
}

Batch sum_three_channels(const Batch& g3) {
  const Index n = g3.cols() / 3;
  return g3.leftCols(n) + g3.middleCols(n, n) + g3.rightCols(n);
}

Eigen::MatrixXd generate_grid(const Generator& g, const Eigen::Ref<const Eigen::VectorXd>& z, int class_id) {
  const Index S = g.config().resolution;
  const Batch y = g.forward(z.transpose(), {class_id}, false);
  // Row-major S x S plane into a column-major grid.
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(y.data(), S, S);
}

nn::Tensor generator_forward(const Generator& g, const Eigen::Ref<const Eigen::VectorXd>& z, int class_id) {
  const Index S = g.config().resolution;
  const Batch y = g.forward(z.transpose(), {class_id}, false);
  return nn::Tensor({S, S}, y.row(0).transpose());
}

double discriminator_forward(const Discriminator& d, const nn::Tensor& x, int class_id) {
  const Index S = d.config().resolution;
  if (x.shape != std::vector<Index>{3, S, S}) throw Error(Errc::ShapeMismatch, "discriminator input must be 3 x S x S");
  x.validate();
  return d.forward(x.values.transpose(), {class_id})(0, 0);
}

// ---------------------------------------------------------------------------
// Training

namespace {

Batch grid_row(const Eigen::MatrixXd& grid) {
  Batch r(1, grid.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(r.data(), grid.rows(),
                                                                                     grid.cols()) = grid;
  return r;
}

Batch normal_batch(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Batch z(rows, cols);
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = nd(rng);
  return z;
}

std::vector<int> uniform_classes(Index n, int n_classes, std::mt19937_64& rng) {
  std::vector<int> c(static_cast<std::size_t>(n));
  for (auto& v : c) v = static_cast<int>(rng() % static_cast<std::uint64_t>(n_classes));
  return c;
}

std::string rng_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

void standing_statistics(Generator& g, int batches, int batch_size, std::mt19937_64& rng) {
  auto& st = g.bn_stats();
  std::vector<Generator::BnStats> acc(st.size());
  for (std::size_t i = 0; i < st.size(); ++i) {
    acc[i].mean = Eigen::VectorXd::Zero(st[i].mean.size());
    acc[i].var = Eigen::VectorXd::Zero(st[i].var.size());
  }
  GeneratorTrace t;
  for (int b = 0; b < batches; ++b) {
    const Batch z = normal_batch(batch_size, g.config().latent_dim, rng);
    g.forward(z, uniform_classes(batch_size, g.config().n_classes, rng), true, &t);
    for (std::size_t i = 0; i < t.blocks.size(); ++i) {
      acc[2 * i].mean += t.blocks[i].bn1.mean;
      acc[2 * i].var += t.blocks[i].bn1.var;
      acc[2 * i + 1].mean += t.blocks[i].bn2.mean;
      acc[2 * i + 1].var += t.blocks[i].bn2.var;
    }
    acc.back().mean += t.bnf.mean;
    acc.back().var += t.bnf.var;
  }
  for (std::size_t i = 0; i < st.size(); ++i) {
    st[i].mean = acc[i].mean / batches;
    st[i].var = acc[i].var / batches;
  }
}

TrainResult gan_train(const std::vector<LabeledGrid>& data, const GeneratorConfig& gcfg,
                      const DiscriminatorConfig& dcfg, const TrainingConfig& tcfg, const TrainProgress& progress) {
  gcfg.validate();
  dcfg.validate();
  tcfg.validate();
  if (dcfg.resolution != gcfg.resolution || dcfg.n_classes != gcfg.n_classes)
    throw Error(Errc::BadConfig, "generator and discriminator disagree on resolution or classes");
  const Index S = gcfg.resolution;
  std::vector<int> per_class(static_cast<std::size_t>(gcfg.n_classes), 0);
  for (const auto& d : data) {
    if (d.label < 0 || d.label >= gcfg.n_classes) throw Error(Errc::BadConfig, "label out of range");
    if (d.grid.rows() != S || d.grid.cols() != S) throw Error(Errc::ShapeMismatch, "training grid is not S x S");
    if (!d.grid.allFinite()) throw Error(Errc::NonFinite, "training grid has non-finite values");
    ++per_class[static_cast<std::size_t>(d.label)];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (per_class[c] == 0) throw Error(Errc::EmptyClass, "class " + std::to_string(c) + " has no samples");
  if (static_cast<std::size_t>(tcfg.batch_size) > data.size())
    throw Error(Errc::BadConfig, "batch_size exceeds the dataset size");

  std::mt19937_64 rng(tcfg.seed);
  Generator G(gcfg, rng());
  Discriminator D(dcfg, rng());
  nn::AdamState g_opt, d_opt;
  TrainHistory hist;
  TrainResult out;

  const Index N = tcfg.batch_size;
  const auto n_data = static_cast<Index>(data.size());
  const Index per_epoch = n_data / N;
  std::vector<Index> order(static_cast<std::size_t>(n_data));
  std::iota(order.begin(), order.end(), Index{0});
  Index cursor = n_data;

  auto snapshot = [&](std::int64_t it) {
    Checkpoint c;
    c.generator = G;
    std::mt19937_64 srng(tcfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(it + 1)));
    standing_statistics(c.generator, 8, static_cast<int>(N), srng);
    c.discriminator = D;
    c.g_opt = g_opt;
    c.d_opt = d_opt;
    c.iteration = it;
    c.history = hist;
    c.rng_state = rng_string(rng);
    out.checkpoints.push_back(std::move(c));
  };
  snapshot(0);

  int high_acc_run = 0;
  GeneratorTrace gt;
  DiscriminatorTrace tr, tf;
  for (std::int64_t it = 1; it <= tcfg.max_iters; ++it) {
    const double lr = tcfg.lr * std::pow(tcfg.lr_decay, static_cast<double>((it - 1) / per_epoch));
    const nn::AdamHyper hyper{lr, tcfg.beta1, tcfg.beta2, 1e-8};

    // Discriminator ascent on log D(x) + log(1 - D(G(z))).
    if (cursor + N > n_data) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    Batch real(N, 3 * S * S);
    std::vector<int> real_cls(static_cast<std::size_t>(N));
    for (Index n = 0; n < N; ++n) {
      const auto& item = data[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor + n)])];
      real.row(n) = to_three_channels(grid_row(item.grid));
      real_cls[static_cast<std::size_t>(n)] = item.label;
    }
    cursor += N;
    Batch z = normal_batch(N, gcfg.latent_dim, rng);
    std::vector<int> fake_cls = uniform_classes(N, gcfg.n_classes, rng);
    G.advance_spectral();
    const Batch fake = G.forward(z, fake_cls, true, &gt);
    G.update_running_stats(gt);

    D.params().zero_grad();
    const Batch lr_real = D.forward(real, real_cls, &tr);
    const Batch lr_fake = D.forward(to_three_channels(fake), fake_cls, &tf);
    double d_loss = 0.0;
    Batch dr(N, 1), dfk(N, 1);
    int correct = 0;
    for (Index n = 0; n < N; ++n) {
      d_loss += nn::softplus(-lr_real(n, 0)) + nn::softplus(lr_fake(n, 0));
      dr(n, 0) = -nn::sigmoid(-lr_real(n, 0)) / static_cast<double>(N);
      dfk(n, 0) = nn::sigmoid(lr_fake(n, 0)) / static_cast<double>(N);
      correct += (lr_real(n, 0) > 0.0) + (lr_fake(n, 0) < 0.0);
    }
    d_loss /= static_cast<double>(N);
    D.backward(tr, dr);
    D.backward(tf, dfk);
    d_loss += nn::add_orthogonal_penalty(D.params(), tcfg.ortho_beta);
    if (!std::isfinite(d_loss)) throw Error(Errc::DivergedLoss, "discriminator loss at iteration " + std::to_string(it));
    nn::adam_step(D.params(), d_opt, hyper);
    const double acc = correct / (2.0 * static_cast<double>(N));
    hist.d_loss.push_back(d_loss);
    hist.d_accuracy.push_back(acc);
    ++hist.d_updates;

    // Non-saturating generator steps: maximise log D(G(z)).
    for (int s = 0; s < tcfg.g_steps_per_d; ++s) {
      z = normal_batch(N, gcfg.latent_dim, rng);
      fake_cls = uniform_classes(N, gcfg.n_classes, rng);
      G.advance_spectral();
      G.params().zero_grad();
      const Batch f = G.forward(z, fake_cls, true, &gt);
      G.update_running_stats(gt);
      const Batch lf = D.forward(to_three_channels(f), fake_cls, &tf);
      double g_loss = 0.0;
      Batch dl(N, 1);
      for (Index n = 0; n < N; ++n) {
        g_loss += nn::softplus(-lf(n, 0));
        dl(n, 0) = -nn::sigmoid(-lf(n, 0)) / static_cast<double>(N);
      }
      g_loss /= static_cast<double>(N);
      G.backward(gt, sum_three_channels(D.backward(tf, dl)));
      g_loss += nn::add_orthogonal_penalty(G.params(), tcfg.ortho_beta);
      if (!std::isfinite(g_loss)) throw Error(Errc::DivergedLoss, "generator loss at iteration " + std::to_string(it));
      nn::adam_step(G.params(), g_opt, hyper);
      hist.g_loss.push_back(g_loss);
      ++hist.g_updates;
    }

    if (progress) progress(it, hist);

    high_acc_run = acc > tcfg.collapse_accuracy ? high_acc_run + 1 : 0;
    if (high_acc_run >= tcfg.collapse_window) {
      out.collapse_start = it - tcfg.collapse_window + 1;
      break;
    }
    if (it % tcfg.checkpoint_every == 0 || it == tcfg.max_iters) snapshot(it);
  }

  out.selected = 0;
  for (std::size_t i = 0; i < out.checkpoints.size(); ++i)
    if (!out.collapse_start || out.checkpoints[i].iteration < *out.collapse_start) out.selected = i;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kCkptMagic[4] = {'P', 'C', 'K', 'P'};
constexpr std::uint8_t kCkptVersion = 1;

std::string config_text(const GeneratorConfig& g, const DiscriminatorConfig& d) {
  std::ostringstream os;
  os.precision(17);
  os << "generator.latent_dim=" << g.latent_dim << "\n"
     << "generator.embed_dim=" << g.embed_dim << "\n"
     << "generator.n_classes=" << g.n_classes << "\n"
     << "generator.base_channels=" << g.base_channels << "\n"
     << "generator.min_channels=" << g.min_channels << "\n"
     << "generator.resolution=" << g.resolution << "\n"
     << "generator.use_nonlocal=" << g.use_nonlocal << "\n"
     << "generator.spectral_norm=" << g.spectral_norm << "\n"
     << "generator.bn_eps=" << g.bn_eps << "\n"
     << "generator.bn_momentum=" << g.bn_momentum << "\n"
     << "discriminator.resolution=" << d.resolution << "\n"
     << "discriminator.channels=" << d.channels << "\n"
     << "discriminator.n_classes=" << d.n_classes << "\n"
     << "discriminator.use_nonlocal=" << d.use_nonlocal << "\n";
  return os.str();
}

void parse_config(const std::string& text, GeneratorConfig& g, DiscriminatorConfig& d) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(Errc::CorruptFile, "bad config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw Error(Errc::CorruptFile, "checkpoint config lacks " + k);
    return it->second;
  };
  auto geti = [&](const std::string& k) {
    try {
      return std::stoi(get(k));
    } catch (const std::logic_error&) {
      throw Error(Errc::CorruptFile, "bad integer for " + k);
    }
  };
  auto getd = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw Error(Errc::CorruptFile, "bad number for " + k);
    }
  };
  g.latent_dim = geti("generator.latent_dim");
  g.embed_dim = geti("generator.embed_dim");
  g.n_classes = geti("generator.n_classes");
  g.base_channels = geti("generator.base_channels");
  g.min_channels = geti("generator.min_channels");
  g.resolution = geti("generator.resolution");
  g.use_nonlocal = geti("generator.use_nonlocal") != 0;
  g.spectral_norm = geti("generator.spectral_norm") != 0;
  g.bn_eps = getd("generator.bn_eps");
  g.bn_momentum = getd("generator.bn_momentum");
  d.resolution = geti("discriminator.resolution");
  d.channels = geti("discriminator.channels");
  d.n_classes = geti("discriminator.n_classes");
  d.use_nonlocal = geti("discriminator.use_nonlocal") != 0;
  try {
    g.validate();
    d.validate();
  } catch (const Error& e) {
    throw Error(Errc::CorruptFile, std::string("checkpoint config invalid: ") + e.what());
  }
}

void put(binio::Writer& w, const Eigen::MatrixXd& m) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) w.f64(m(i, j));
}

void get(binio::Reader& r, Eigen::MatrixXd& m) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = r.f64();
}

void put_vec(binio::Writer& w, const Eigen::VectorXd& v) {
  w.u64(static_cast<std::uint64_t>(v.size()));
  for (Index i = 0; i < v.size(); ++i) w.f64(v[i]);
}

Eigen::VectorXd get_vec(binio::Reader& r, Index max_len) {
  const std::uint64_t n = r.u64();
  if (n > static_cast<std::uint64_t>(max_len)) throw Error(Errc::CorruptFile, "vector length out of range");
  Eigen::VectorXd v(static_cast<Index>(n));
  for (Index i = 0; i < v.size(); ++i) v[i] = r.f64();
  return v;
}

void put_params(binio::Writer& w, const nn::ParamSet& ps) {
  for (const auto& p : ps) {
    put(w, p.value);
    if (p.spectral) {
      put_vec(w, p.sn.u);
      put_vec(w, p.sn.v);
      w.f64(p.sn.sigma);
    }
  }
}

void get_params(binio::Reader& r, nn::ParamSet& ps) {
  for (auto& p : ps) {
    get(r, p.value);
    if (p.spectral) {
      p.sn.u = get_vec(r, p.value.rows());
      p.sn.v = get_vec(r, p.value.cols());
      p.sn.sigma = r.f64();
    }
  }
}

void put_adam(binio::Writer& w, const nn::AdamState& a, const nn::ParamSet& ps) {
  w.i64(a.t);
  w.u8(a.moments.empty() ? 0 : 1);
  if (a.moments.empty()) return;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& m = a.moments[i];
    w.u8(m.m.size() ? 1 : 0);
    if (m.m.size()) {
      put(w, m.m);
      put(w, m.v);
    }
  }
}

void get_adam(binio::Reader& r, nn::AdamState& a, const nn::ParamSet& ps) {
  a.t = r.i64();
  if (r.u8() == 0) return;
  a.moments.resize(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (r.u8() == 0) continue;
    auto& m = a.moments[i];
    m.m.resize(ps[i].value.rows(), ps[i].value.cols());
    m.v.resize(ps[i].value.rows(), ps[i].value.cols());
    get(r, m.m);
    get(r, m.v);
  }
}

void put_series(binio::Writer& w, const std::vector<double>& s) {
  w.u64(s.size());
  for (double v : s) w.f64(v);
}

std::vector<double> get_series(binio::Reader& r) {
  const std::uint64_t n = r.u64();
  if (n > (1ULL << 32)) throw Error(Errc::CorruptFile, "history length out of range");
  std::vector<double> s(static_cast<std::size_t>(n));
  for (auto& v : s) v = r.f64();
  return s;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  binio::Writer w;
  w.bytes(std::string(kCkptMagic, 4));
  w.u8(kCkptVersion);
  w.str(config_text(c.generator.config(), c.discriminator.config()));
  put_params(w, c.generator.params());
  for (const auto& s : c.generator.bn_stats()) {
    put_vec(w, s.mean);
    put_vec(w, s.var);
  }
  put_params(w, c.discriminator.params());
  put_adam(w, c.g_opt, c.generator.params());
  put_adam(w, c.d_opt, c.discriminator.params());
  w.i64(c.iteration);
  put_series(w, c.history.d_loss);
  put_series(w, c.history.d_accuracy);
  put_series(w, c.history.g_loss);
  w.i64(c.history.d_updates);
  w.i64(c.history.g_updates);
  w.str(c.rng_state);
  return w.data();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != std::string(kCkptMagic, 4)) throw Error(Errc::CorruptFile, "not a checkpoint file");
  if (const auto v = r.u8(); v != kCkptVersion)
    throw Error(Errc::CorruptFile, "unsupported checkpoint version " + std::to_string(v));
  GeneratorConfig gc;
  DiscriminatorConfig dc;
  parse_config(r.str(), gc, dc);
  Checkpoint c;
  c.generator = Generator(gc, 0);
  c.discriminator = Discriminator(dc, 0);
  get_params(r, c.generator.params());
  for (auto& s : c.generator.bn_stats()) {
    const Index n = s.mean.size();
    s.mean = get_vec(r, n);
    s.var = get_vec(r, n);
    if (s.mean.size() != n || s.var.size() != n) throw Error(Errc::CorruptFile, "batch-norm statistics truncated");
  }
  get_params(r, c.discriminator.params());
  get_adam(r, c.g_opt, c.generator.params());
  get_adam(r, c.d_opt, c.discriminator.params());
  c.iteration = r.i64();
  c.history.d_loss = get_series(r);
  c.history.d_accuracy = get_series(r);
  c.history.g_loss = get_series(r);
  c.history.d_updates = r.i64();
  c.history.g_updates = r.i64();
  c.rng_state = r.str();
  if (!r.done()) throw Error(Errc::CorruptFile, "trailing bytes after checkpoint");
  c.generator.params().touch();
  c.discriminator.params().touch();
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace purify
