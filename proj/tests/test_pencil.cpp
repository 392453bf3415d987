#include <doctest.h>

#include <chrono>
#include <cmath>
#include <complex>
#include <random>

#include "purify/error.hpp"
#include "purify/pencil.hpp"
#include "test_support.hpp"

using namespace purify;
using cd = std::complex<double>;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = nd(rng);
  return m;
}

void check_invariants(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const GeneralizedEigen<double>& g) {
  const Eigen::Index n = a.rows();
  CHECK((g.q.transpose() * a * g.z - g.s).norm() <= 1e-8 * a.norm());
  CHECK((g.q.transpose() * b * g.z - g.t).norm() <= 1e-8 * b.norm());
  CHECK((g.q.transpose() * g.q - Eigen::MatrixXd::Identity(n, n)).norm() <= 1e-10);
  CHECK((g.z.transpose() * g.z - Eigen::MatrixXd::Identity(n, n)).norm() <= 1e-10);
  // Structure: T upper triangular, S quasi-triangular with isolated 2x2 blocks.
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j + 1; i < n; ++i) {
      CHECK(g.t(i, j) == 0.0);
      if (i > j + 1) CHECK(g.s(i, j) == 0.0);
    }
  for (Eigen::Index i = 1; i + 1 < n; ++i) CHECK((g.s(i, i - 1) == 0.0 || g.s(i + 1, i) == 0.0));
  for (Eigen::Index i = 0; i < n; ++i) CHECK(g.beta[i] >= 0.0);
}

}  // namespace

TEST_CASE("qz: identity and diagonal pencils") {
  const auto g = qz_decompose(Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd::Identity(3, 3));
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(g.alpha[i] == cd(g.beta[i], 0.0));
    CHECK(g.eigenvalues()[i] == cd(1.0, 0.0));
  }
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = 2.0;
  const auto e = qz_decompose(d, Eigen::MatrixXd::Identity(2, 2)).eigenvalues();
  CHECK(e[0] == cd(2.0, 0.0));
  CHECK(e[1] == cd(3.0, 0.0));
}

TEST_CASE("qz: 1x1 and sign normalisation") {
  Eigen::MatrixXd a(1, 1), b(1, 1);
  a << 3.0;
  b << -2.0;
  const auto g = qz_decompose(a, b);
  CHECK(g.beta[0] == 2.0);
  CHECK(g.eigenvalues()[0] == cd(-1.5, 0.0));
}

TEST_CASE("qz: eigenvalues match characteristic polynomial roots") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 60; ++trial) {
    const Eigen::Index n = 2 + trial % 5;
    const Eigen::MatrixXd a = gaussian(n, n, rng);
    const Eigen::MatrixXd b = gaussian(n, n, rng) + 3.0 * Eigen::MatrixXd::Identity(n, n);
    const auto g = qz_decompose(a, b);
    check_invariants(a, b, g);
    CHECK(test::match_error(test::pencil_char_roots(a, b), g.eigenvalues()) <= 1e-8);
  }
}

TEST_CASE("qz: residuals and orthogonality up to n = 128") {
  std::mt19937_64 rng(99);
  for (Eigen::Index n : {7, 16, 33, 64, 128}) {
    const Eigen::MatrixXd a = gaussian(n, n, rng);
    const Eigen::MatrixXd b = gaussian(n, n, rng);
    check_invariants(a, b, qz_decompose(a, b));
  }
}

TEST_CASE("qz: singular B yields infinite eigenvalues") {
  std::mt19937_64 rng(7);
  const Eigen::Index n = 5;
  const Eigen::MatrixXd a = gaussian(n, n, rng);
  Eigen::MatrixXd b = gaussian(n, n, rng);
  b.row(2).setZero();
  const auto g = qz_decompose(a, b);
  check_invariants(a, b, g);
  const auto ev = g.eigenvalues();
  CHECK(std::isinf(ev[n - 1].real()));
  for (Eigen::Index i = 0; i + 1 < n; ++i) CHECK(std::isfinite(ev[i].real()));
  // A - mu B must be singular at each finite eigenvalue.
  for (Eigen::Index i = 0; i + 1 < n; ++i) {
    const Eigen::MatrixXcd m = a.cast<cd>() - ev[i] * b.cast<cd>();
    const Eigen::JacobiSVD<Eigen::MatrixXcd> svd(m);
    CHECK(svd.singularValues()[n - 1] <= 1e-10 * svd.singularValues()[0]);
  }

  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(n, n);
  const auto z = qz_decompose(a, zero);
  check_invariants(a, zero, z);
  for (Eigen::Index i = 0; i < n; ++i) CHECK(z.beta[i] == 0.0);
}

TEST_CASE("qz: rejects bad input") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(qz_decompose(a, Eigen::MatrixXd::Identity(2, 2)), Error);
  a(1, 1) = std::nan("");
  try {
    qz_decompose(a, Eigen::MatrixXd::Identity(3, 3));
    FAIL("expected NonFinite");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NonFinite);
  }
}

TEST_CASE("matrix eigenvalues") {
  const auto id = matrix_eigenvalues(Eigen::MatrixXd::Identity(4, 4));
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(id[i] == cd(1.0, 0.0));

  Eigen::MatrixXd r(2, 2);
  r << 0, -1, 1, 0;
  const auto rot = matrix_eigenvalues(r);
  CHECK(std::abs(rot[0] - cd(0, -1)) <= 1e-15);
  CHECK(std::abs(rot[1] - cd(0, 1)) <= 1e-15);

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd m = gaussian(4, 4, rng);
    m = (m + m.transpose()).eval();
    const auto ev = matrix_eigenvalues(m);
    const Eigen::VectorXd oracle = test::jacobi_eigenvalues(m);
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(std::abs(ev[i].imag()) <= 1e-9);
      CHECK(std::abs(ev[i].real() - oracle[i]) <= 1e-9 * std::max(1.0, std::abs(oracle[i])));
    }
  }

  // Pencil (A, I) against matrix_eigenvalues(A), as ordered sequences.
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd m = gaussian(9, 9, rng);
    const auto a = qz_decompose(m, Eigen::MatrixXd::Identity(9, 9)).eigenvalues();
    const auto b = matrix_eigenvalues(m);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("qz: conjugate pairs share their real part exactly") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ev = matrix_eigenvalues(gaussian(12, 12, rng));
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev[i].imag() < 0.0) {
        REQUIRE(i + 1 < ev.size());
        CHECK(ev[i + 1].real() == ev[i].real());
        CHECK(ev[i + 1].imag() == -ev[i].imag());
      }
    }
  }
}

TEST_CASE("qz: deterministic") {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd a = gaussian(20, 20, rng), b = gaussian(20, 20, rng);
  const auto g1 = qz_decompose(a, b), g2 = qz_decompose(a, b);
  CHECK(g1.alpha == g2.alpha);
  CHECK(g1.beta == g2.beta);
  CHECK(g1.s == g2.s);
}

TEST_CASE("chordal distance") {
  CHECK(chordal_distance(cd(0.3, -2.0), cd(0.3, -2.0)) == 0.0);
  CHECK(std::abs(chordal_distance(1.0, -1.0) - 1.0) <= 1e-12);
  CHECK(std::abs(chordal_distance(0.0, 1.0) - 1.0 / std::sqrt(2.0)) <= 1e-12);
  const cd inf(std::numeric_limits<double>::infinity(), 0.0);
  CHECK(chordal_distance(inf, 2.0) == doctest::Approx(1.0 / std::sqrt(5.0)));
  CHECK(chordal_distance(inf, inf) == 0.0);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int i = 0; i < 10000; ++i) {
    const cd a(nd(rng), nd(rng)), b(nd(rng), nd(rng));
    const double d = chordal_distance(a, b);
    CHECK(d == chordal_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d > 1e-14);
  }
}

TEST_CASE("chordal vector") {
  Eigen::VectorXcd a(3), b(1), c(1);
  a << cd(1, 2), cd(-1, 0), cd(0, 0);
  CHECK(chordal_vector(a, a).cwiseAbs().maxCoeff() == 0.0);
  b << cd(1, 0);
  c << cd(-1, 0);
  CHECK(chordal_vector(b, c)[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(chordal_vector(a, b), Error);
}

TEST_CASE("chordal loss") {
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd x = gaussian(6, 6, rng);
  const ChordalReport self = chordal_loss(x, x);
  CHECK(self.pairwise.cwiseAbs().maxCoeff() == 0.0);
  CHECK(self.gamma == 0.0);
  CHECK(self.total == 0.0);
  CHECK(self.mean_eig_magnitude == doctest::Approx(matrix_eigenvalues(x).cwiseAbs().mean()));

  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(2, 2);
  const ChordalReport two = chordal_loss(2.0 * id, id);
  CHECK(two.pairwise[0] == doctest::Approx(1.0 / std::sqrt(10.0)));
  CHECK(two.pairwise[1] == doctest::Approx(1.0 / std::sqrt(10.0)));
  CHECK(two.gamma == 0.0);
  CHECK(two.total == doctest::Approx(0.3162278));

  // Pencil (I, x_t) with a zero row in x_t: one beta collapses.
  Eigen::MatrixXd xt = gaussian(4, 4, rng);
  xt.row(1).setZero();
  const ChordalReport ill = chordal_loss(Eigen::MatrixXd::Identity(4, 4), xt);
  const auto pencil = qz_decompose(Eigen::MatrixXd::Identity(4, 4), xt, false);
  int small = 0;
  for (Eigen::Index i = 0; i < 4; ++i) small += std::abs(pencil.beta[i]) <= 1e-6 * pencil.beta.cwiseAbs().mean();
  CHECK(small >= 1);
  CHECK(ill.ill_count == small);
  CHECK(ill.gamma == doctest::Approx(small / 4.0));
  CHECK(ill.total == doctest::Approx(ill.pairwise.mean() + ill.gamma));

  const ChordalReport r1 = chordal_loss(gaussian(8, 8, rng), x.replicate(2, 2).topLeftCorner(8, 8));
  CHECK((r1.pairwise.array() >= 0.0).all());
  CHECK((r1.pairwise.array() <= 1.0).all());
  CHECK_THROWS_AS(chordal_loss(x, gaussian(5, 5, rng)), Error);
}

TEST_CASE("translation vector") {
  Eigen::VectorXcd g(2), t(2);
  g << cd(2, 0), cd(0, 2);
  t << cd(1, 0), cd(0, 1);
  const Eigen::VectorXcd mu = translation_vector(g, t);
  CHECK(mu[0] == cd(2, 0));
  CHECK(mu[1] == cd(2, 0));
}
