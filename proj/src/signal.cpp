// src/signal.cpp
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

#include "purify/signal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "purify/error.hpp"
#include "purify/fft.hpp"

namespace purify {

namespace {

std::uint32_t read_u32(const std::string& b, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3])) << 24;
}

std::uint16_t read_u16(const std::string& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    static_cast<unsigned char>(b[at + 1]) << 8);
}

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

void require_same_length(Eigen::Index a, Eigen::Index b) {
  if (a != b)
    throw Error(Errc::LengthMismatch,
                "lengths " + std::to_string(a) + " and " + std::to_string(b) + " differ");
}

}  // namespace

std::int16_t to_pcm16(double v) {
  const double scaled = std::round(v * 32768.0);
  return static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
}

std::string encode_wav(const Waveform& w) {
  if (w.sample_rate != kSampleRate)
    throw Error(Errc::UnsupportedFormat, "only 16000 Hz is supported");
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  std::string b;
  b.reserve(44 + data_bytes);
  b += "RIFF";
  put_u32(b, 36 + data_bytes);
  b += "WAVE";
  b += "fmt ";
  put_u32(b, 16);
  put_u16(b, 1);  // PCM
  put_u16(b, 1);  // mono
  put_u32(b, kSampleRate);
  put_u32(b, kSampleRate * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b += "data";
  put_u32(b, data_bytes);
  for (Eigen::Index i = 0; i < w.samples.size(); ++i) {
    if (!std::isfinite(w.samples[i])) throw Error(Errc::NonFinite, "non-finite sample");
    put_u16(b, static_cast<std::uint16_t>(to_pcm16(w.samples[i])));
  }
  return b;
}

Waveform decode_wav(const std::string& b) {
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
    throw Error(Errc::CorruptFile, "missing RIFF/WAVE header");

  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::uint32_t len = read_u32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > b.size()) {
      // Some writers leave the data length unset when streaming; tolerate a
      // short final data chunk but nothing else.
      if (id != "data") throw Error(Errc::CorruptFile, "truncated '" + id + "' chunk");
    }
    if (id == "fmt ") {
      if (len < 16) throw Error(Errc::CorruptFile, "fmt chunk too short");
      const std::uint16_t format = read_u16(b, body);
      const std::uint16_t channels = read_u16(b, body + 2);
      const std::uint32_t rate = read_u32(b, body + 4);
      const std::uint16_t bits = read_u16(b, body + 14);
      if (format != 1)
        throw Error(Errc::UnsupportedFormat, "audio format " + std::to_string(format) + " is not PCM");
      if (channels != 1)
        throw Error(Errc::UnsupportedFormat, std::to_string(channels) + " channels, expected mono");
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw Error(Errc::UnsupportedFormat, std::to_string(rate) + " Hz, expected 16000");
      if (bits != 16)
        throw Error(Errc::UnsupportedFormat, std::to_string(bits) + "-bit samples, expected 16");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw Error(Errc::CorruptFile, "data chunk before fmt chunk");
      const std::size_t avail = std::min<std::size_t>(len, b.size() - body);
      if (avail % 2 != 0) throw Error(Errc::CorruptFile, "odd data length");
      const auto n = static_cast<Eigen::Index>(avail / 2);
      Waveform w;
      w.samples.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto raw = static_cast<std::int16_t>(read_u16(b, body + 2 * static_cast<std::size_t>(i)));
        w.samples[i] = static_cast<double>(raw) / 32768.0;
      }
      return w;
    }
    pos = body + len + (len & 1u);
  }
  throw Error(Errc::CorruptFile, have_fmt ? "no data chunk" : "no fmt chunk");
}

Waveform load_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Waveform w = decode_wav(bytes);
  w.source_path = path.string();
  return w;
}

void save_wav(const Waveform& w, const std::filesystem::path& path) {
  const std::string bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "short write to " + path.string());
}

double loudness_db(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double peak = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
  if (!(peak > 0.0)) throw Error(Errc::SilentSignal, "loudness of a silent signal is undefined");
  return 20.0 * std::log10(peak);
}

double loudness_db(const Waveform& w) { return loudness_db(w.samples); }

double relative_loudness_db(const Waveform& x, const Perturbation& d) {
  require_same_length(x.size(), d.delta.size());
  return loudness_db(d.delta) - loudness_db(x.samples);
}

Eigen::MatrixXd psd(const Eigen::Ref<const Eigen::VectorXd>& x, int frame_len, int hop) {
  if (x.size() == 0) throw Error(Errc::EmptySignal, "psd of an empty signal");
  if (frame_len < 1 || hop < 1 || frame_len > x.size())
    throw Error(Errc::BadFraming, "frame_len " + std::to_string(frame_len) + ", hop " +
                                      std::to_string(hop) + " for length " +
                                      std::to_string(x.size()));
  const Eigen::Index n_frames = (x.size() - frame_len) / hop + 1;
  const int n_bins = frame_len / 2 + 1;

  std::vector<double> window(static_cast<std::size_t>(frame_len));
  for (int i = 0; i < frame_len; ++i)
    window[static_cast<std::size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / frame_len);

  Eigen::MatrixXd out(n_frames, n_bins);
  Fft fft;
  cvec frame(static_cast<std::size_t>(frame_len)), spec;
  for (Eigen::Index f = 0; f < n_frames; ++f) {
    for (int i = 0; i < frame_len; ++i)
      frame[static_cast<std::size_t>(i)] = x[f * hop + i] * window[static_cast<std::size_t>(i)];
    fft.forward(spec, frame);
    for (int k = 0; k < n_bins; ++k) out(f, k) = std::norm(spec[static_cast<std::size_t>(k)]) / frame_len;
  }
  return out;
}

Eigen::MatrixXd psd(const Waveform& w, int frame_len, int hop) { return psd(w.samples, frame_len, hop); }

double psd_distortion_db(const Waveform& x, const Perturbation& d, int frame_len, int hop) {
  require_same_length(x.size(), d.delta.size());
  const double px = psd(x.samples, frame_len, hop).maxCoeff();
  const double pd = psd(d.delta, frame_len, hop).maxCoeff();
  if (!(px > 0.0)) throw Error(Errc::SilentSignal, "carrier PSD is identically zero");
  if (!(pd > 0.0)) throw Error(Errc::SilentSignal, "perturbation PSD is identically zero");
  return 10.0 * std::log10(pd * pd) - 10.0 * std::log10(px * px);
}

Eigen::MatrixXd psd_distortion_bins_db(const Waveform& x, const Perturbation& d, int frame_len,
                                       int hop, double floor) {
  require_same_length(x.size(), d.delta.size());
  const Eigen::ArrayXXd px = psd(x.samples, frame_len, hop).array().max(floor);
  const Eigen::ArrayXXd pd = psd(d.delta, frame_len, hop).array().max(floor);
  return (20.0 * (pd / px).log10()).matrix();
}

double aligned_snr_db(const Eigen::Ref<const Eigen::VectorXd>& ref,
                      const Eigen::Ref<const Eigen::VectorXd>& test) {
  require_same_length(ref.size(), test.size());
  const double pr = ref.size() ? ref.cwiseAbs().maxCoeff() : 0.0;
  const double pt = test.size() ? test.cwiseAbs().maxCoeff() : 0.0;
  if (!(pr > 0.0) || !(pt > 0.0)) throw Error(Errc::SilentSignal, "SNR against a silent signal");
  const Eigen::VectorXd a = ref / pr;
  const Eigen::VectorXd b = test / pt;
  const double noise = (a - b).squaredNorm();
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(a.squaredNorm() / noise);
}

Waveform inject_perturbation(const Waveform& x, const Perturbation& d, bool clamp) {
  require_same_length(x.size(), d.delta.size());
  Waveform out = x;
  out.samples += d.delta;
  if (clamp) out.samples = out.samples.cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

Perturbation measured(const Waveform& x, Perturbation d) {
  d.loudness_db_rel = relative_loudness_db(x, d);
  return d;
}

}  // namespace purify
