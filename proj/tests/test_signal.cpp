#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

#include "purify/error.hpp"
#include "purify/signal.hpp"

using namespace purify;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("purify_test_" + name);
}

Eigen::VectorXd randn(Eigen::Index n, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Eigen::VectorXd v(n);
  for (auto& x : v) x = std::clamp(nd(rng), -1.0, 1.0);
  return v;
}

// One-frame periodogram by the definition, O(N^2).
Eigen::VectorXd direct_periodogram(const Eigen::VectorXd& frame) {
  const auto n = frame.size();
  Eigen::VectorXd out(n / 2 + 1);
  for (Eigen::Index k = 0; k <= n / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (Eigen::Index t = 0; t < n; ++t) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * t / n);
      acc += w * frame[t] * std::polar(1.0, -2.0 * std::numbers::pi * k * t / n);
    }
    out[k] = std::norm(acc) / n;
  }
  return out;
}

}  // namespace

TEST_CASE("wav: silence and scaling") {
  const auto p = tmp_path("silence.wav");
  save_wav(Waveform::from_samples(Eigen::VectorXd::Zero(16000)), p);
  const Waveform w = load_wav(p);
  CHECK(w.size() == 16000);
  CHECK(w.samples.cwiseAbs().maxCoeff() == 0.0);

  save_wav(Waveform::from_samples(Eigen::VectorXd::Constant(100, 0.5)), p);
  const Waveform h = load_wav(p);
  CHECK(h.samples.isApproxToConstant(0.5, 0.0));
  CHECK(h.source_path.value() == p.string());
  std::filesystem::remove(p);
}

TEST_CASE("wav: round trip within one quantisation step") {
  const auto p = tmp_path("rt.wav");
  const Eigen::VectorXd x = randn(4000, 3);
  save_wav(Waveform::from_samples(x), p);
  const Waveform y = load_wav(p);
  REQUIRE(y.size() == x.size());
  CHECK((y.samples - x).cwiseAbs().maxCoeff() <= 1.0 / 32768.0);

  save_wav(Waveform{}, p);
  CHECK(load_wav(p).empty());
  std::filesystem::remove(p);
}

TEST_CASE("wav: full scale clamps to 32767") {
  const std::string b = encode_wav(Waveform::from_samples(Eigen::VectorXd::Constant(1, 1.0)));
  const auto lo = static_cast<unsigned char>(b[44]);
  const auto hi = static_cast<unsigned char>(b[45]);
  CHECK((lo | (hi << 8)) == 32767);
  CHECK(to_pcm16(-1.0) == -32768);
}

TEST_CASE("wav: unsupported formats are rejected") {
  std::string b = encode_wav(Waveform::from_samples(Eigen::VectorXd::Zero(8)));
  std::string stereo = b;
  stereo[22] = 2;
  std::string rate = b;
  rate[24] = static_cast<char>(0x44);
  rate[25] = static_cast<char>(0xAC);  // 44100
  for (const auto& bad : {stereo, rate}) {
    try {
      decode_wav(bad);
      FAIL("expected UnsupportedFormat");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::UnsupportedFormat);
    }
  }
  CHECK_THROWS_AS(decode_wav("RIFFxxxx"), Error);
}

TEST_CASE("loudness") {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(10);
  x[3] = -1.0;
  CHECK(loudness_db(x) == doctest::Approx(0.0));
  x[3] = 0.1;
  CHECK(loudness_db(x) == doctest::Approx(-20.0));
  CHECK_THROWS_AS(loudness_db(Eigen::VectorXd::Zero(5)), Error);

  const Waveform w = Waveform::from_samples(randn(500, 9));
  CHECK(relative_loudness_db(w, Perturbation{w.samples}) == doctest::Approx(0.0));
  CHECK(relative_loudness_db(w, Perturbation{0.01 * w.samples}) == doctest::Approx(-40.0));
  Eigen::VectorXd a = Eigen::VectorXd::Zero(4), d = Eigen::VectorXd::Zero(4);
  a[0] = 0.5;
  d[2] = -0.05;
  CHECK(relative_loudness_db(Waveform::from_samples(a), Perturbation{d}) == doctest::Approx(-20.0));
  CHECK_THROWS_AS(relative_loudness_db(w, Perturbation{Eigen::VectorXd::Ones(3)}), Error);
}

TEST_CASE("loudness is invariant under joint scaling") {
  const Waveform w = Waveform::from_samples(randn(300, 1));
  const Eigen::VectorXd d = randn(300, 2, 0.01);
  const double base = relative_loudness_db(w, Perturbation{d});
  for (double s : {0.01, 0.3, 7.0}) {
    const double r = relative_loudness_db(Waveform::from_samples(s * w.samples), Perturbation{s * d});
    CHECK(r == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("psd: zeros, bin-centred sine, homogeneity") {
  CHECK(psd(Eigen::VectorXd::Zero(1024), 256, 128).cwiseAbs().maxCoeff() == 0.0);

  const int n = 256;
  const int bin = 19;
  Eigen::VectorXd x(2048);
  for (Eigen::Index t = 0; t < x.size(); ++t) x[t] = 0.7 * std::sin(2.0 * std::numbers::pi * bin * t / n + 0.3);
  const Eigen::MatrixXd p = psd(x, n, 100);
  for (Eigen::Index f = 0; f < p.rows(); ++f) {
    Eigen::Index arg;
    p.row(f).maxCoeff(&arg);
    CHECK(arg == bin);
    const Eigen::VectorXd oracle = direct_periodogram(x.segment(f * 100, n));
    CHECK((p.row(f).transpose() - oracle).cwiseAbs().maxCoeff() <= 1e-9 * oracle.maxCoeff());
  }

  const Eigen::VectorXd r = randn(3000, 4);
  const Eigen::MatrixXd p1 = psd(r, 400, 160);
  const Eigen::MatrixXd p2 = psd(2.0 * r, 400, 160);
  CHECK(((p2 - 4.0 * p1).cwiseAbs().array() <= 1e-10 * p2.cwiseAbs().array() + 1e-300).all());

  CHECK_THROWS_AS(psd(Eigen::VectorXd(), 4, 1), Error);
  CHECK_THROWS_AS(psd(r, 4000, 1), Error);
  CHECK_THROWS_AS(psd(r, 40, 0), Error);
}

TEST_CASE("psd distortion") {
  const Waveform w = Waveform::from_samples(randn(4000, 5));
  CHECK(psd_distortion_db(w, Perturbation{w.samples}, 512, 256) == doctest::Approx(0.0));
  CHECK(psd_distortion_db(w, Perturbation{0.1 * w.samples}, 512, 256) == doctest::Approx(-40.0));
  CHECK(psd_distortion_db(w, Perturbation{2.0 * w.samples}, 512, 256) == doctest::Approx(12.0412).epsilon(1e-5));
  const Eigen::MatrixXd bins = psd_distortion_bins_db(w, Perturbation{0.1 * w.samples}, 512, 256);
  CHECK(bins.maxCoeff() == doctest::Approx(-40.0));
  CHECK_THROWS_AS(psd_distortion_db(Waveform::from_samples(Eigen::VectorXd::Zero(4000)),
                                    Perturbation{w.samples}, 512, 256),
                  Error);
}

TEST_CASE("inject perturbation") {
  const Waveform w = Waveform::from_samples(randn(100, 6));
  const Waveform same = inject_perturbation(w, Perturbation{Eigen::VectorXd::Zero(100)}, false);
  CHECK(std::memcmp(same.samples.data(), w.samples.data(), sizeof(double) * 100) == 0);

  const Waveform c = inject_perturbation(Waveform::from_samples(Eigen::VectorXd::Constant(10, 0.9)),
                                         Perturbation{Eigen::VectorXd::Constant(10, 0.3)}, true);
  CHECK(c.samples.isApproxToConstant(1.0, 0.0));
  const Waveform z = inject_perturbation(w, Perturbation{-w.samples}, false);
  CHECK(z.samples.cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(inject_perturbation(w, Perturbation{Eigen::VectorXd::Zero(3)}, false), Error);
}
