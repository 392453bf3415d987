// src/tfa.cpp
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

#include "purify/tfa.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "purify/binio.hpp"
#include "purify/error.hpp"
#include "purify/fft.hpp"

namespace purify {

namespace {

constexpr double kPi = std::numbers::pi;

// Frequencies where the Gaussian has decayed below exp(-kGaussCut) are skipped.
constexpr double kGaussCut = 40.0;

// Equalisation floor, relative to the peak of the scale-sum response.
constexpr double kEqualizeFloor = 1e-2;

// Samples of zero padding per unit of the largest scale.
constexpr double kPadScales = 6.0;

double morlet_hat(double s, double omega, double w0) {
  const double d = s * omega - w0;
  const double e = 0.5 * d * d;
  if (e > kGaussCut) return 0.0;
  return std::sqrt(2.0 * kPi * s) * std::pow(kPi, -0.25) * std::exp(-e);
}

struct Plan {
  std::size_t n_fft = 0;
  std::vector<double> scales;
  // Nonzero bin range [first, last] of each scale's filter.
  std::vector<std::pair<std::size_t, std::size_t>> bins;
};

Plan make_plan(Eigen::Index length, const TfaConfig& cfg) {
  Plan p;
  p.scales = cfg.scales();
  const double s_max = *std::max_element(p.scales.begin(), p.scales.end());
  p.n_fft = next_fast_len(static_cast<std::size_t>(length) +
                      static_cast<std::size_t>(std::ceil(kPadScales * s_max)));
  const double dw = 2.0 * kPi / static_cast<double>(p.n_fft);
  const double half_width = std::sqrt(2.0 * kGaussCut);
  for (double s : p.scales) {
    const double lo = (cfg.morlet_center - half_width) / s;
    const double hi = (cfg.morlet_center + half_width) / s;
    const auto first = static_cast<std::size_t>(std::max(1.0, std::floor(lo / dw)));
    const auto last = static_cast<std::size_t>(
        std::min(static_cast<double>(p.n_fft / 2), std::ceil(hi / dw)));
    p.bins.emplace_back(first, last);
  }
  return p;
}

double wrap_phase(double phi) { return phi <= -kPi ? kPi : phi; }

void check_finite(const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (!x.allFinite()) throw Error(Errc::NonFinite, "waveform has non-finite samples");
}

// Resample a grid to (rows, cols) with corner-aligned bilinear weights.
Eigen::MatrixXd resample(const Eigen::Ref<const Eigen::MatrixXd>& g, Eigen::Index rows,
                         Eigen::Index cols) {
  struct Tap {
    Eigen::Index i0;
    double frac;
  };
  auto taps = [](Eigen::Index to, Eigen::Index from) {
    std::vector<Tap> t(static_cast<std::size_t>(to));
    for (Eigen::Index i = 0; i < to; ++i) {
      if (to == 1 || from == 1) {
        t[static_cast<std::size_t>(i)] = {0, 0.0};
        continue;
      }
      const double pos = static_cast<double>(i) * static_cast<double>(from - 1) /
                         static_cast<double>(to - 1);
      auto i0 = static_cast<Eigen::Index>(std::floor(pos));
      double frac = pos - static_cast<double>(i0);
      if (i0 >= from - 1) {
        i0 = from - 1;
        frac = 0.0;
      }
      t[static_cast<std::size_t>(i)] = {i0, frac};
    }
    return t;
  };
  const auto tr = taps(rows, g.rows());
  const auto tc = taps(cols, g.cols());
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    const Tap c = tc[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < rows; ++i) {
      const Tap r = tr[static_cast<std::size_t>(i)];
      // std::lerp keeps constants exact and results inside the source range.
      const Eigen::Index i1 = r.frac > 0.0 ? r.i0 + 1 : r.i0;
      const Eigen::Index j1 = c.frac > 0.0 ? c.i0 + 1 : c.i0;
      const double top = std::lerp(g(r.i0, c.i0), g(r.i0, j1), c.frac);
      const double bot = std::lerp(g(i1, c.i0), g(i1, j1), c.frac);
      const double v = std::lerp(top, bot, r.frac);
      out(i, j) = v;
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// TfaConfig

void TfaConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(Errc::BadConfig, msg); };
  if (n_scales < 2) bad("n_scales must be at least 2");
  if (!(freq_min > 0.0 && freq_min < freq_max)) bad("need 0 < freq_min < freq_max");
  if (freq_max > kSampleRate / 2.0) bad("freq_max above Nyquist");
  if (hop < 1) bad("hop must be at least 1");
  if (!(morlet_center >= 5.0)) bad("morlet_center must be at least 5");
  if (!(log_floor_eps > 0.0)) bad("log_floor_eps must be positive");
  if (!(frame_len_ms > 0.0)) bad("frame_len_ms must be positive");
  // The lowest-frequency wavelet's +-2 sigma window has to fit in one frame.
  const double s_max = morlet_center * kSampleRate / (2.0 * kPi * freq_min);
  if (4.0 * s_max > frame_len_samples())
    bad("freq_min too low for the frame length: wavelet window " +
        std::to_string(4.0 * s_max) + " > " + std::to_string(frame_len_samples()) + " samples");
}

int TfaConfig::frame_len_samples() const {
  return static_cast<int>(std::lround(frame_len_ms * kSampleRate / 1000.0));
}

std::vector<double> TfaConfig::center_frequencies() const {
  std::vector<double> f(static_cast<std::size_t>(n_scales));
  const double ratio = std::log(freq_max / freq_min);
  for (int i = 0; i < n_scales; ++i)
    f[static_cast<std::size_t>(i)] = freq_min * std::exp(ratio * i / (n_scales - 1));
  return f;
}

std::vector<double> TfaConfig::scales() const {
  auto f = center_frequencies();
  for (auto& v : f) v = morlet_center * kSampleRate / (2.0 * kPi * v);
  return f;
}

TfaConfig tfa_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadConfig, std::string("tfa config: ") + e.what());
  }
  if (!j.is_object()) throw Error(Errc::BadConfig, "tfa config must be a JSON object");
  TfaConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      if (k == "n_scales") c.n_scales = it->get<int>();
      else if (k == "freq_min") c.freq_min = it->get<double>();
      else if (k == "freq_max") c.freq_max = it->get<double>();
      else if (k == "frame_len_ms") c.frame_len_ms = it->get<double>();
      else if (k == "hop") c.hop = it->get<int>();
      else if (k == "morlet_center") c.morlet_center = it->get<double>();
      else if (k == "log_floor_eps") c.log_floor_eps = it->get<double>();
      else throw Error(Errc::BadConfig, "unknown tfa config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadConfig, std::string("tfa config: ") + e.what());
  }
  c.validate();
  return c;
}

TfaConfig load_tfa_config(const std::filesystem::path& path) {
  return tfa_config_from_json(binio::read_file(path));
}

std::string tfa_config_to_json(const TfaConfig& c) {
  nlohmann::json j = {{"n_scales", c.n_scales},         {"freq_min", c.freq_min},
                      {"freq_max", c.freq_max},         {"frame_len_ms", c.frame_len_ms},
                      {"hop", c.hop},                   {"morlet_center", c.morlet_center},
                      {"log_floor_eps", c.log_floor_eps}};
  return j.dump(2);
}

double Spectrogram::floor_db() const { return 20.0 * std::log10(config.log_floor_eps); }

// ---------------------------------------------------------------------------
// Forward transform

Eigen::MatrixXcd cwt_coefficients(const Eigen::Ref<const Eigen::VectorXd>& x, const TfaConfig& cfg) {
  cfg.validate();
  check_finite(x);
  const Eigen::Index len = x.size();
  if (len < cfg.frame_len_samples())
    throw Error(Errc::SignalTooShort, std::to_string(len) + " samples, need at least " +
                                          std::to_string(cfg.frame_len_samples()));
  const Plan plan = make_plan(len, cfg);
  const std::size_t n = plan.n_fft;
  const double dw = 2.0 * kPi / static_cast<double>(n);

  Fft fft;
  cvec buf(n, 0.0), spec, prod(n), coef;
  for (Eigen::Index t = 0; t < len; ++t) buf[static_cast<std::size_t>(t)] = x[t];
  fft.forward(spec, buf);

  const Eigen::Index n_frames = (len + cfg.hop - 1) / cfg.hop;
  Eigen::MatrixXcd w(cfg.n_scales, n_frames);
  for (int j = 0; j < cfg.n_scales; ++j) {
    const double s = plan.scales[static_cast<std::size_t>(j)];
    std::fill(prod.begin(), prod.end(), std::complex<double>(0.0));
    const auto [first, last] = plan.bins[static_cast<std::size_t>(j)];
    for (std::size_t k = first; k <= last; ++k)
      prod[k] = spec[k] * morlet_hat(s, dw * static_cast<double>(k), cfg.morlet_center);
    fft.inverse(coef, prod);
    for (Eigen::Index f = 0; f < n_frames; ++f) w(j, f) = coef[static_cast<std::size_t>(f * cfg.hop)];
  }
  return w;
}

Eigen::VectorXd cwt_coefficients_adjoint(const Eigen::MatrixXcd& grad, Eigen::Index length,
                                         const TfaConfig& cfg) {
  cfg.validate();
  if (cfg.hop != 1) throw Error(Errc::InconsistentConfig, "adjoint needs hop == 1");
  if (grad.rows() != cfg.n_scales || grad.cols() != length)
    throw Error(Errc::InconsistentConfig, "gradient dims do not match the config");
  const Plan plan = make_plan(length, cfg);
  const std::size_t n = plan.n_fft;
  const double dw = 2.0 * kPi / static_cast<double>(n);

  // dL/dx = Re IFFT(sum_j Psi_j . FFT(G_j)).
  Fft fft;
  cvec buf(n), spec, acc(n, 0.0), out;
  for (int j = 0; j < cfg.n_scales; ++j) {
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0));
    for (Eigen::Index b = 0; b < length; ++b) buf[static_cast<std::size_t>(b)] = grad(j, b);
    fft.forward(spec, buf);
    const double s = plan.scales[static_cast<std::size_t>(j)];
    const auto [first, last] = plan.bins[static_cast<std::size_t>(j)];
    for (std::size_t k = first; k <= last; ++k)
      acc[k] += spec[k] * morlet_hat(s, dw * static_cast<double>(k), cfg.morlet_center);
  }
  fft.inverse(out, acc);
  Eigen::VectorXd dx(length);
  for (Eigen::Index t = 0; t < length; ++t) dx[t] = out[static_cast<std::size_t>(t)].real();
  return dx;
}

Spectrogram cwt_forward(const Waveform& w, const TfaConfig& cfg) {
  const Eigen::MatrixXcd coef = cwt_coefficients(w.samples, cfg);
  Spectrogram s;
  s.config = cfg;
  s.original_length = w.size();
  s.magnitude_db.resize(coef.rows(), coef.cols());
  s.phase.resize(coef.rows(), coef.cols());
  for (Eigen::Index f = 0; f < coef.cols(); ++f) {
    for (Eigen::Index j = 0; j < coef.rows(); ++j) {
      const std::complex<double> c = coef(j, f);
      s.magnitude_db(j, f) = 20.0 * std::log10(std::abs(c) + cfg.log_floor_eps);
      s.phase(j, f) = std::abs(c) > 0.0 ? wrap_phase(std::arg(c)) : 0.0;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Inverse transform

namespace {

// Delta-function reconstruction from complex coefficients on the hop grid.
Eigen::VectorXd delta_reconstruct(const Eigen::MatrixXcd& w, Eigen::Index len, const TfaConfig& cfg) {
  const Eigen::Index n_frames = w.cols();
  const Plan plan = make_plan(len, cfg);
  const std::size_t n = plan.n_fft;
  const double dw = 2.0 * kPi / static_cast<double>(n);

  // Spectrum of the sum of scale-normalised coefficients at every sample.
  Fft fft;
  cvec y(n, 0.0), spec, acc(n, 0.0);
  for (int j = 0; j < cfg.n_scales; ++j) {
    const double s_j = plan.scales[static_cast<std::size_t>(j)];
    const double inv_sqrt_s = 1.0 / std::sqrt(s_j);
    std::fill(y.begin(), y.end(), std::complex<double>(0.0));
    for (Eigen::Index f = 0; f < n_frames; ++f) y[static_cast<std::size_t>(f * cfg.hop)] = w(j, f) * inv_sqrt_s;
    fft.forward(spec, y);
    if (cfg.hop == 1) {
      for (std::size_t k = 0; k < n; ++k) acc[k] += spec[k];
      continue;
    }
    // Decimated grid: zero-stuffing leaves hop images of the scale's band;
    // keep the one within pi/hop of the centre frequency.
    const double w_j = cfg.morlet_center / s_j;
    const double half_band = kPi / cfg.hop;
    const auto k_lo = static_cast<std::size_t>(std::max(1.0, std::ceil((w_j - half_band) / dw)));
    const auto k_hi = static_cast<std::size_t>(
        std::min(static_cast<double>(n / 2), std::floor((w_j + half_band) / dw)));
    for (std::size_t k = k_lo; k <= k_hi; ++k) acc[k] += static_cast<double>(cfg.hop) * spec[k];
  }

  // Equalise by the per-frequency scale-sum response instead of a single
  // admissibility constant; keeps the band edges flat.
  std::vector<double> response(n / 2 + 1, 0.0);
  for (int j = 0; j < cfg.n_scales; ++j) {
    const double s_j = plan.scales[static_cast<std::size_t>(j)];
    const auto [first, last] = plan.bins[static_cast<std::size_t>(j)];
    for (std::size_t k = first; k <= last; ++k)
      response[k] += morlet_hat(s_j, dw * static_cast<double>(k), cfg.morlet_center) / std::sqrt(s_j);
  }
  const double peak = *std::max_element(response.begin(), response.end());

  cvec half(n, 0.0), out;
  if (peak > 0.0) {
    for (std::size_t k = 1; k <= n / 2; ++k)
      half[k] = acc[k] / std::max(response[k], kEqualizeFloor * peak);
  }
  fft.inverse(out, half);
  Eigen::VectorXd x(len);
  for (Eigen::Index t = 0; t < len; ++t) x[t] = 2.0 * out[static_cast<std::size_t>(t)].real();
  return x;
}

}  // namespace

Eigen::VectorXd cwt_reconstruct_raw(const Spectrogram& s) {
  const TfaConfig& cfg = s.config;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(Errc::InconsistentConfig, e.what());
  }
  const Eigen::Index len = s.original_length;
  const Eigen::Index n_frames = (len + cfg.hop - 1) / cfg.hop;
  if (s.magnitude_db.rows() != cfg.n_scales || s.phase.rows() != cfg.n_scales ||
      s.magnitude_db.cols() != n_frames || s.phase.cols() != n_frames || len < 1)
    throw Error(Errc::InconsistentConfig, "grid dims do not match config and original_length");

  Eigen::MatrixXcd w(cfg.n_scales, n_frames);
  for (Eigen::Index f = 0; f < n_frames; ++f)
    for (Eigen::Index j = 0; j < cfg.n_scales; ++j) {
      const double mag = std::max(0.0, std::pow(10.0, s.magnitude_db(j, f) / 20.0) - cfg.log_floor_eps);
      w(j, f) = std::polar(mag, s.phase(j, f));
    }

  return delta_reconstruct(w, len, cfg);
}

Eigen::VectorXd quantization_filter(const Eigen::Ref<const Eigen::VectorXd>& x) {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(x.size());
  const double peak = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
  if (!(peak > 0.0)) return q;
  for (Eigen::Index i = 0; i < x.size(); ++i) q[i] = to_pcm16(x[i] / peak) / 32768.0;
  return q;
}

Waveform cwt_inverse(const Spectrogram& s) {
  return Waveform::from_samples(quantization_filter(cwt_reconstruct_raw(s)));
}

// ---------------------------------------------------------------------------
// Resizing

Eigen::MatrixXd bilinear_weights(Eigen::Index to, Eigen::Index from) {
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(to, from);
  for (Eigen::Index i = 0; i < to; ++i) {
    if (to == 1 || from == 1) {
      r(i, 0) = 1.0;
      continue;
    }
    const double pos = static_cast<double>(i) * static_cast<double>(from - 1) / static_cast<double>(to - 1);
    auto i0 = static_cast<Eigen::Index>(std::floor(pos));
    double frac = pos - static_cast<double>(i0);
    if (i0 >= from - 1) {
      i0 = from - 1;
      frac = 0.0;
    }
    r(i, i0) += 1.0 - frac;
    if (frac > 0.0) r(i, i0 + 1) += frac;
  }
  return r;
}

SquareGrid resize_bilinear(const Eigen::Ref<const Eigen::MatrixXd>& grid, Eigen::Index target) {
  if (grid.rows() < 2 || grid.cols() < 2)
    throw Error(Errc::GridTooSmall, "source grid must be at least 2x2");
  if (target < 2) throw Error(Errc::GridTooSmall, "target size must be at least 2");
  SquareGrid out;
  out.source_dims = std::make_pair(grid.rows(), grid.cols());
  if (grid.rows() == target && grid.cols() == target)
    out.values = grid;
  else
    out.values = resample(grid, target, target);
  return out;
}

SquareGrid resize_bilinear(const SquareGrid& grid, Eigen::Index target) {
  SquareGrid out = resize_bilinear(grid.values, target);
  if (grid.source_dims) out.source_dims = grid.source_dims;
  return out;
}

Eigen::MatrixXd resize_bilinear_adjoint(const Eigen::Ref<const Eigen::MatrixXd>& grad,
                                        Eigen::Index rows, Eigen::Index cols) {
  // Both factors are sparse with two taps per row; forming them densely is
  // fine at the sizes used here (S x source).
  const Eigen::MatrixXd rr = bilinear_weights(grad.rows(), rows);
  const Eigen::MatrixXd rc = bilinear_weights(grad.cols(), cols);
  return rr.transpose() * (grad * rc);
}

Eigen::MatrixXd unresize_bilinear(const SquareGrid& g) {
  if (!g.source_dims) throw Error(Errc::MissingSourceDims, "grid has no recorded source dims");
  const auto [rows, cols] = *g.source_dims;
  if (rows == g.values.rows() && cols == g.values.cols()) return g.values;
  return resample(g.values, rows, cols);
}

RgbGrid to_rgb(const SquareGrid& g) {
  RgbGrid out;
  out.lo = g.values.minCoeff();
  out.hi = g.values.maxCoeff();
  Eigen::MatrixXd c;
  if (out.hi > out.lo)
    c = (2.0 * (g.values.array() - out.lo) / (out.hi - out.lo) - 1.0).matrix();
  else
    c = Eigen::MatrixXd::Zero(g.values.rows(), g.values.cols());
  out.channels = {c, c, c};
  return out;
}

Eigen::MatrixXd from_unit_range(const Eigen::Ref<const Eigen::MatrixXd>& v, double lo, double hi) {
  return (lo + (v.array() + 1.0) * (hi - lo) / 2.0).matrix();
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {
constexpr char kSpecMagic[4] = {'P', 'S', 'P', 'G'};
constexpr std::uint8_t kSpecVersion = 1;
}  // namespace

std::string encode_spectrogram(const Spectrogram& s) {
  binio::Writer w;
  w.bytes(std::string(kSpecMagic, 4));
  w.u8(kSpecVersion);
  const TfaConfig& c = s.config;
  w.i64(c.n_scales);
  w.f64(c.freq_min);
  w.f64(c.freq_max);
  w.f64(c.frame_len_ms);
  w.i64(c.hop);
  w.f64(c.morlet_center);
  w.f64(c.log_floor_eps);
  w.i64(s.original_length);
  w.i64(s.magnitude_db.rows());
  w.i64(s.magnitude_db.cols());
  for (const Eigen::MatrixXd* m : {&s.magnitude_db, &s.phase})
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) w.f64((*m)(i, j));
  return w.data();
}

Spectrogram decode_spectrogram(const std::string& bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4) != std::string(kSpecMagic, 4)) throw Error(Errc::CorruptFile, "not a spectrogram file");
  const std::uint8_t version = r.u8();
  if (version != kSpecVersion)
    throw Error(Errc::UnsupportedFormat, "spectrogram version " + std::to_string(version));
  Spectrogram s;
  TfaConfig& c = s.config;
  c.n_scales = static_cast<int>(r.i64());
  c.freq_min = r.f64();
  c.freq_max = r.f64();
  c.frame_len_ms = r.f64();
  c.hop = static_cast<int>(r.i64());
  c.morlet_center = r.f64();
  c.log_floor_eps = r.f64();
  s.original_length = r.i64();
  const std::int64_t rows = r.i64();
  const std::int64_t cols = r.i64();
  if (rows < 0 || cols < 0 || rows * cols * 16 > static_cast<std::int64_t>(bytes.size()))
    throw Error(Errc::CorruptFile, "bad spectrogram dims");
  s.magnitude_db.resize(rows, cols);
  s.phase.resize(rows, cols);
  for (Eigen::MatrixXd* m : {&s.magnitude_db, &s.phase})
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) (*m)(i, j) = r.f64();
  if (!r.done()) throw Error(Errc::CorruptFile, "trailing bytes after spectrogram");
  return s;
}

void save_spectrogram(const Spectrogram& s, const std::filesystem::path& path) {
  binio::write_file(path, encode_spectrogram(s));
}

Spectrogram load_spectrogram(const std::filesystem::path& path) {
  return decode_spectrogram(binio::read_file(path));
}

}  // namespace purify
