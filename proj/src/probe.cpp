// src/probe.cpp
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
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "purify/binio.hpp"
#include "purify/error.hpp"
#include "purify/eval.hpp"

namespace purify {

using Eigen::Index;
using nn::Batch;
using nn::Dims;

void ProbeConfig::validate() const {
  if (resolution < 4 || resolution % 4 != 0) throw Error(Errc::BadConfig, "probe resolution must be a multiple of 4");
  if (channels < 1 || n_classes < 2) throw Error(Errc::BadConfig, "probe needs channels >= 1 and >= 2 classes");
  if (epochs < 1 || batch_size < 1) throw Error(Errc::BadConfig, "probe epochs and batch size must be positive");
  if (!(lr > 0.0)) throw Error(Errc::BadConfig, "probe lr must be positive");
  if (!(holdout >= 0.0 && holdout < 1.0)) throw Error(Errc::BadConfig, "probe holdout must be in [0, 1)");
}

namespace {

enum : std::size_t { kC1w, kC1b, kC2w, kC2b, kLw, kLb };

struct ProbeTrace {
  Batch h1, p1, h2, p2;
  std::vector<Index> argmax;
};

Batch probe_forward(const nn::ParamSet& P, const ProbeConfig& c, const Batch& x, ProbeTrace& t) {
  const Index S = c.resolution, C = c.channels;
  if (x.cols() != S * S) throw Error(Errc::ShapeMismatch, "probe input must be N x S*S");
  t.h1 = nn::conv2d(x, {1, S, S}, P[kC1w].value, P[kC1b].value.col(0), 3);
  t.p1 = nn::maxpool2(nn::relu(t.h1), {C, S, S}, &t.argmax);
  t.h2 = nn::conv2d(t.p1, {C, S / 2, S / 2}, P[kC2w].value, P[kC2b].value.col(0), 3);
  t.p2 = nn::avgpool2(nn::relu(t.h2), {C, S / 2, S / 2});
  return nn::linear(t.p2, P[kLw].value, P[kLb].value.col(0));
}

// Row-wise softmax.
Batch softmax(const Batch& logits) {
  Batch p = logits;
  for (Index n = 0; n < p.rows(); ++n) {
    auto r = p.row(n);
    r.array() = (r.array() - r.maxCoeff()).exp();
    r /= r.sum();
  }
  return p;
}

}  // namespace

ProbeClassifier::ProbeClassifier(const ProbeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const Index S = cfg_.resolution, C = cfg_.channels;
  const double relu_gain = std::numbers::sqrt2;
  params_.add("conv1.w", nn::orthogonal_init(C, 9, relu_gain, rng), false, false);
  params_.add("conv1.b", Eigen::MatrixXd::Zero(C, 1), false, false);
  params_.add("conv2.w", nn::orthogonal_init(C, 9 * C, relu_gain, rng), false, false);
  params_.add("conv2.b", Eigen::MatrixXd::Zero(C, 1), false, false);
  params_.add("linear.w", nn::orthogonal_init(cfg_.n_classes, C * (S / 4) * (S / 4), 1.0, rng), false, false);
  params_.add("linear.b", Eigen::MatrixXd::Zero(cfg_.n_classes, 1), false, false);
}

Batch ProbeClassifier::logits(const Batch& x) const {
  ProbeTrace t;
  return probe_forward(params_, cfg_, x, t);
}

int ProbeClassifier::predict(const Eigen::MatrixXd& grid) const {
  const Batch l = logits(grid_batch(grid));
  Index best = 0;
  l.row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

double ProbeClassifier::loss(const Batch& x, const std::vector<int>& labels, bool grads, Batch* dx) {
  if (static_cast<Index>(labels.size()) != x.rows()) throw Error(Errc::ShapeMismatch, "one label per probe input");
  ProbeTrace t;
  const Batch l = probe_forward(params_, cfg_, x, t);
  const Batch p = softmax(l);
  const auto N = static_cast<double>(x.rows());
  double ce = 0.0;
  Batch dl = p / N;
  for (Index n = 0; n < x.rows(); ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= cfg_.n_classes) throw Error(Errc::BadConfig, "probe label out of range");
    ce -= std::log(std::max(p(n, y), 1e-300));
    dl(n, y) -= 1.0 / N;
  }
  if (!grads && !dx) return ce / N;

  const Index S = cfg_.resolution, C = cfg_.channels;
  std::vector<Eigen::MatrixXd> scratch;
  if (!grads)
    for (const auto& prm : params_) scratch.push_back(Eigen::MatrixXd::Zero(prm.value.rows(), prm.value.cols()));
  auto grad = [&](std::size_t i) -> Eigen::MatrixXd& { return grads ? params_[i].grad : scratch[i]; };
  const auto& P = params_;
  Batch g = nn::linear_backward(t.p2, P[kLw].value, dl, grad(kLw), grad(kLb).col(0));
  g = nn::relu_backward(t.h2, nn::avgpool2_backward(g, {C, S / 2, S / 2}));
  g = nn::conv2d_backward(t.p1, {C, S / 2, S / 2}, P[kC2w].value, 3, g, grad(kC2w), grad(kC2b).col(0));
  g = nn::relu_backward(t.h1, nn::maxpool2_backward(g, {C, S, S}, t.argmax));
  g = nn::conv2d_backward(x, {1, S, S}, P[kC1w].value, 3, g, grad(kC1w), grad(kC1b).col(0));
  if (dx) *dx = std::move(g);
  return ce / N;
}

Batch grid_batch(const Eigen::MatrixXd& grid) {
  Batch r(1, grid.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(r.data(), grid.rows(),
                                                                                     grid.cols()) = grid;
  return r;
}

ProbeClassifier train_probe(const std::vector<LabeledGrid>& data, const ProbeConfig& cfg, ProbeReport* report) {
  cfg.validate();
  const Index S = cfg.resolution;
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(cfg.n_classes));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& d = data[i];
    if (d.label < 0 || d.label >= cfg.n_classes) throw Error(Errc::BadConfig, "probe label out of range");
    if (d.grid.rows() != S || d.grid.cols() != S) throw Error(Errc::ShapeMismatch, "probe grid is not S x S");
    by_class[static_cast<std::size_t>(d.label)].push_back(i);
  }
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].empty()) throw Error(Errc::EmptyClass, "class " + std::to_string(c) + " has no samples");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> train, held;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_held = static_cast<std::size_t>(std::floor(cfg.holdout * static_cast<double>(idx.size())));
    train.insert(train.end(), idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_held));
    held.insert(held.end(), idx.end() - static_cast<std::ptrdiff_t>(n_held), idx.end());
  }
  if (train.empty()) throw Error(Errc::EmptyBatch, "no training items after the holdout split");

  ProbeClassifier probe(cfg, rng());
  nn::AdamState opt;
  const nn::AdamHyper hyper{cfg.lr, 0.9, 0.999, 1e-8};
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t b = 0; b < train.size(); b += bs) {
      const std::size_t n = std::min(bs, train.size() - b);
      Batch x(static_cast<Index>(n), S * S);
      std::vector<int> y(n);
      for (std::size_t k = 0; k < n; ++k) {
        x.row(static_cast<Index>(k)) = grid_batch(data[train[b + k]].grid);
        y[k] = data[train[b + k]].label;
      }
      probe.params().zero_grad();
      probe.loss(x, y, true, nullptr);
      nn::adam_step(probe.params(), opt, hyper);
    }
  }

  if (report) {
    auto accuracy = [&](const std::vector<std::size_t>& idx) {
      if (idx.empty()) return 0.0;
      std::size_t hits = 0;
      for (std::size_t i : idx) hits += probe.predict(data[i].grid) == data[i].label;
      return static_cast<double>(hits) / static_cast<double>(idx.size());
    };
    report->train_accuracy = accuracy(train);
    report->heldout_accuracy = accuracy(held);
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Probe container: "PPRB", version byte, config, then each parameter as
// rows, cols and column-major float64.

namespace {
constexpr char kProbeMagic[4] = {'P', 'P', 'R', 'B'};
constexpr std::uint8_t kProbeVersion = 1;
}  // namespace

std::string encode_probe(const ProbeClassifier& p) {
  binio::Writer w;
  w.bytes(std::string(kProbeMagic, 4));
  w.u8(kProbeVersion);
  const ProbeConfig& c = p.config();
  for (int v : {c.resolution, c.channels, c.n_classes, c.epochs, c.batch_size}) w.u32(static_cast<std::uint32_t>(v));
  w.f64(c.lr);
  w.f64(c.holdout);
  w.u64(c.seed);
  w.u64(p.params().size());
  for (const auto& prm : p.params()) {
    w.u64(static_cast<std::uint64_t>(prm.value.rows()));
    w.u64(static_cast<std::uint64_t>(prm.value.cols()));
    for (Index i = 0; i < prm.value.size(); ++i) w.f64(prm.value.data()[i]);
  }
  return w.data();
}

ProbeClassifier decode_probe(const std::string& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != std::string(kProbeMagic, 4)) throw Error(Errc::CorruptFile, "not a probe file");
  if (r.u8() != kProbeVersion) throw Error(Errc::CorruptFile, "unsupported probe version");
  ProbeConfig c;
  c.resolution = static_cast<int>(r.u32());
  c.channels = static_cast<int>(r.u32());
  c.n_classes = static_cast<int>(r.u32());
  c.epochs = static_cast<int>(r.u32());
  c.batch_size = static_cast<int>(r.u32());
  c.lr = r.f64();
  c.holdout = r.f64();
  c.seed = r.u64();
  ProbeClassifier p(c, 0);
  if (r.u64() != p.params().size()) throw Error(Errc::CorruptFile, "probe parameter count mismatch");
  for (auto& prm : p.params()) {
    if (r.u64() != static_cast<std::uint64_t>(prm.value.rows()) ||
        r.u64() != static_cast<std::uint64_t>(prm.value.cols()))
      throw Error(Errc::CorruptFile, "probe parameter shape mismatch for " + prm.name);
    for (Index i = 0; i < prm.value.size(); ++i) prm.value.data()[i] = r.f64();
    if (!prm.value.allFinite()) throw Error(Errc::CorruptFile, "non-finite probe parameter " + prm.name);
  }
  if (!r.done()) throw Error(Errc::CorruptFile, "trailing bytes after probe parameters");
  return p;
}

void save_probe(const ProbeClassifier& p, const std::filesystem::path& path) {
  binio::write_file(path, encode_probe(p));
}

ProbeClassifier load_probe(const std::filesystem::path& path) { return decode_probe(binio::read_file(path)); }

// ---------------------------------------------------------------------------
// Attack

void AttackConfig::validate() const {
  if (steps < 1) throw Error(Errc::BadConfig, "attack steps must be >= 1");
  if (!std::isfinite(loudness_bound_db)) throw Error(Errc::BadConfig, "attack loudness bound must be finite");
}

double loudness_eps(const Waveform& x, double bound_db) {
  return x.samples.cwiseAbs().maxCoeff() * std::pow(10.0, bound_db / 20.0);
}

Eigen::VectorXd probe_input_gradient(const Waveform& x, ProbeClassifier& probe, int target, const TfaConfig& tfa) {
  if (tfa.hop != 1) throw Error(Errc::GradientUnavailable, "the wavelet adjoint needs hop == 1");
  const Index S = probe.config().resolution;
  const Eigen::MatrixXcd W = cwt_coefficients(x.samples, tfa);
  Eigen::MatrixXd M(W.rows(), W.cols());
  for (Index i = 0; i < W.size(); ++i) M.data()[i] = 20.0 * std::log10(std::abs(W.data()[i]) + tfa.log_floor_eps);
  const SquareGrid g = resize_bilinear(M, S);
  const RgbGrid rgb = to_rgb(g);
  if (rgb.degenerate()) throw Error(Errc::GradientUnavailable, "constant spectrogram has no normalisation gradient");

  Batch dx;
  probe.loss(grid_batch(rgb.channels[0]), {target}, false, &dx);
  const Eigen::MatrixXd dv =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(dx.data(), S, S);
  const Eigen::MatrixXd dm = resize_bilinear_adjoint(dv * (2.0 / (rgb.hi - rgb.lo)), M.rows(), M.cols());
  const double k = 20.0 / std::numbers::ln10;
  Eigen::MatrixXcd dw(W.rows(), W.cols());
  for (Index i = 0; i < W.size(); ++i) {
    const double a = std::abs(W.data()[i]);
    dw.data()[i] = a > 0.0 ? dm.data()[i] * k / (a * (a + tfa.log_floor_eps)) * W.data()[i] : 0.0;
  }
  return cwt_coefficients_adjoint(dw, x.size(), tfa);
}

AttackResult craft_perturbation(const Waveform& x, ProbeClassifier& probe, int target, double eps,
                                const TfaConfig& tfa, const AttackConfig& cfg) {
  cfg.validate();
  if (!(eps >= 0.0)) throw Error(Errc::BadConfig, "attack eps must be non-negative");
  if (target < 0 || target >= probe.config().n_classes) throw Error(Errc::BadConfig, "attack target out of range");
  const Index S = probe.config().resolution;
  // A hair under the bound so that the measured loudness never rounds above it.
  const double bound = loudness_eps(x, cfg.loudness_bound_db) * (1.0 - 1e-9);
  const double e = std::min(eps, bound);

  AttackResult r;
  r.target = target;
  r.clean_prediction = probe.predict(analysis_grid(x, tfa, S).values);
  r.adversarial_prediction = r.clean_prediction;
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd momentum = Eigen::VectorXd::Zero(x.size());
  Waveform adv = x;
  const double step = 2.0 * e / cfg.steps;
  for (int k = 0; k < cfg.steps && e > 0.0 && r.adversarial_prediction != target; ++k) {
    const Eigen::VectorXd g = probe_input_gradient(adv, probe, target, tfa);
    const double l1 = g.lpNorm<1>();
    if (l1 > 0.0) momentum = 0.9 * momentum + g / l1;
    delta -= step * momentum.array().sign().matrix();
    delta = delta.cwiseMax(-e).cwiseMin(e);
    if (cfg.clamp) delta = (x.samples + delta).cwiseMax(-1.0).cwiseMin(1.0) - x.samples;
    adv.samples = x.samples + delta;
    r.adversarial_prediction = probe.predict(analysis_grid(adv, tfa, S).values);
  }

  r.perturbation.delta = delta;
  r.adversarial = adv;
  if (delta.cwiseAbs().maxCoeff() > 0.0) {
    r.perturbation = measured(x, r.perturbation);
    r.loudness_db = r.perturbation.loudness_db_rel;
    r.psd_distortion_db = psd_distortion_db(x, r.perturbation, 512, 256);
  } else {
    r.loudness_db = -std::numeric_limits<double>::infinity();
    r.psd_distortion_db = -std::numeric_limits<double>::infinity();
  }
  return r;
}

}  // namespace purify
