// include/purify/pencil.hpp
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

// Matrix pencils, the real generalized Schur (QZ) decomposition and the
// chordal metric on their eigenvalues.
//
//   Q^T A Z = S   (quasi-upper-triangular, 1x1 and 2x2 diagonal blocks)
//   Q^T B Z = T   (upper-triangular)
//
// The eigenvalues of the pencil A - mu B are alpha_i / beta_i; beta_i = 0 marks
// an infinite eigenvalue.

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "purify/error.hpp"

namespace purify {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

template <typename Scalar = double>
struct Pencil {
  DenseMatrix<Scalar> a;
  DenseMatrix<Scalar> b;
};

template <typename Scalar = double>
struct GeneralizedEigen {
  // Sorted: finite before infinite, then by real part, then by imaginary part.
  ComplexVector<Scalar> alpha;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> beta;
  DenseMatrix<Scalar> q, z, s, t;  // q, z are empty when vectors were not requested

  /// alpha / beta, with +inf for beta == 0.
  ComplexVector<Scalar> eigenvalues() const {
    ComplexVector<Scalar> out(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i)
      out[i] = beta[i] != Scalar(0) ? alpha[i] / beta[i]
                                    : std::complex<Scalar>(std::numeric_limits<Scalar>::infinity(), 0);
    return out;
  }
};

namespace qz_detail {

template <typename Scalar>
struct Rot {
  Scalar c = 1, s = 0;
};

// (c, s) with c*a + s*b = r, -s*a + c*b = 0.
template <typename Scalar>
Rot<Scalar> make_givens(Scalar a, Scalar b) {
  const Scalar r = std::hypot(a, b);
  if (r == Scalar(0)) return {};
  return {a / r, b / r};
}

template <typename Scalar>
void rot_rows(DenseMatrix<Scalar>& m, Eigen::Index p, Eigen::Index q, Rot<Scalar> g, Eigen::Index c0,
              Eigen::Index c1) {
  for (Eigen::Index j = c0; j <= c1; ++j) {
    const Scalar x = m(p, j), y = m(q, j);
    m(p, j) = g.c * x + g.s * y;
    m(q, j) = -g.s * x + g.c * y;
  }
}

template <typename Scalar>
void rot_cols(DenseMatrix<Scalar>& m, Eigen::Index p, Eigen::Index q, Rot<Scalar> g, Eigen::Index r0,
              Eigen::Index r1) {
  for (Eigen::Index i = r0; i <= r1; ++i) {
    const Scalar x = m(i, p), y = m(i, q);
    m(i, p) = g.c * x + g.s * y;
    m(i, q) = -g.s * x + g.c * y;
  }
}

template <typename Scalar>
class Qz {
 public:
  Qz(DenseMatrix<Scalar>& s, DenseMatrix<Scalar>& t, DenseMatrix<Scalar>* q, DenseMatrix<Scalar>* z)
      : s_(s), t_(t), q_(q), z_(z), n_(s.rows()) {}

  // Left rotation on rows (p, q) of S and T from column c0, accumulated into Q.
  void left(Eigen::Index p, Eigen::Index q, Rot<Scalar> g, Eigen::Index c0) {
    c0 = std::max<Eigen::Index>(c0, 0);
    rot_rows(s_, p, q, g, c0, n_ - 1);
    rot_rows(t_, p, q, g, c0, n_ - 1);
    if (q_) rot_cols(*q_, p, q, g, 0, n_ - 1);
  }

  // Right rotation on columns (p, q) of S (rows up to rs) and T (rows up to
  // rt), accumulated into Z.
  void right(Eigen::Index p, Eigen::Index q, Rot<Scalar> g, Eigen::Index rs, Eigen::Index rt) {
    rot_cols(s_, p, q, g, 0, std::min(rs, n_ - 1));
    rot_cols(t_, p, q, g, 0, std::min(rt, n_ - 1));
    if (z_) rot_cols(*z_, p, q, g, 0, n_ - 1);
  }

  void hessenberg_triangular() {
    for (Eigen::Index j = 0; j + 2 < n_; ++j) {
      for (Eigen::Index i = n_ - 1; i >= j + 2; --i) {
        if (s_(i, j) == Scalar(0)) continue;
        left(i - 1, i, make_givens(s_(i - 1, j), s_(i, j)), j);
        s_(i, j) = 0;
        right(i, i - 1, make_givens(t_(i, i), t_(i, i - 1)), n_ - 1, i);
        t_(i, i - 1) = 0;
      }
    }
  }

  void iterate() {
    const Scalar eps = std::numeric_limits<Scalar>::epsilon();
    const Scalar norm_s = s_.norm();
    const Scalar norm_t = t_.norm();
    const Scalar tiny_t = eps * norm_t;
    const long cap = 30L * static_cast<long>(n_);
    long sweeps = 0;
    int since_deflation = 0;

    Eigen::Index hi = n_ - 1;
    while (hi >= 0) {
      // Find the top of the unreduced block ending at hi.
      Eigen::Index lo = hi;
      while (lo > 0) {
        Scalar scale = std::abs(s_(lo - 1, lo - 1)) + std::abs(s_(lo, lo));
        if (scale == Scalar(0)) scale = norm_s;
        if (std::abs(s_(lo, lo - 1)) <= eps * scale) {
          s_(lo, lo - 1) = 0;
          break;
        }
        --lo;
      }

      // A (numerically) zero diagonal entry of T means an infinite eigenvalue.
      Eigen::Index zero_at = -1;
      for (Eigen::Index j = lo; j <= hi; ++j) {
        if (std::abs(t_(j, j)) <= tiny_t) {
          t_(j, j) = 0;
          zero_at = j;
          break;
        }
      }
      if (zero_at >= 0 && hi > lo) {
        deflate_infinite(lo, hi, zero_at);
        since_deflation = 0;
        continue;
      }

      if (lo == hi) {
        --hi;
        since_deflation = 0;
        continue;
      }
      if (lo == hi - 1) {
        split_two(hi - 1);
        hi -= 2;
        since_deflation = 0;
        continue;
      }

      if (++sweeps > cap) throw Error(Errc::NonConvergence, "QZ iteration cap exceeded");
      ++since_deflation;
      sweep(lo, hi, since_deflation % 10 == 0);
    }
  }

  // Make T's diagonal non-negative; flipping row i of S and T together keeps
  // every eigenvalue.
  void normalise_signs() {
    for (Eigen::Index i = 0; i < n_; ++i) {
      if (t_(i, i) < Scalar(0)) {
        s_.row(i) *= Scalar(-1);
        t_.row(i) *= Scalar(-1);
        if (q_) q_->col(i) *= Scalar(-1);
      }
    }
  }

 private:
  void deflate_infinite(Eigen::Index lo, Eigen::Index hi, Eigen::Index j) {
    if (j == lo) {
      // Zero S(lo+1, lo): splits a 1x1 block with beta = 0 off the top.
      left(lo, lo + 1, make_givens(s_(lo, lo), s_(lo + 1, lo)), lo);
      s_(lo + 1, lo) = 0;
      t_(lo, lo) = 0;
      t_(lo + 1, lo) = 0;
      return;
    }
    // Chase the zero down to T(hi, hi).
    for (Eigen::Index k = j; k < hi; ++k) {
      left(k, k + 1, make_givens(t_(k, k + 1), t_(k + 1, k + 1)), k - 1);
      t_(k + 1, k + 1) = 0;
      t_(k + 1, k) = 0;
      right(k, k - 1, make_givens(s_(k + 1, k), s_(k + 1, k - 1)), k + 1, k);
      s_(k + 1, k - 1) = 0;
      t_(k, k - 1) = 0;
    }
    right(hi, hi - 1, make_givens(s_(hi, hi), s_(hi, hi - 1)), hi, hi);
    s_(hi, hi - 1) = 0;
    t_(hi, hi - 1) = 0;
    t_(hi, hi) = 0;
  }

  // Trace and determinant of S2 T2^-1 for the 2x2 pencil at (i, i).
  void trace_det(Eigen::Index i, Scalar& tr, Scalar& det) const {
    const Scalar a = s_(i, i), b = s_(i, i + 1), c = s_(i + 1, i), d = s_(i + 1, i + 1);
    const Scalar p = t_(i, i), q = t_(i, i + 1), r = t_(i + 1, i + 1);
    tr = a / p - c * q / (p * r) + d / r;
    det = (a * d - b * c) / (p * r);
  }

  // 2x2 block at rows (i, i+1): split real pairs into two 1x1 blocks.
  void split_two(Eigen::Index i) {
    Scalar tr, det;
    trace_det(i, tr, det);
    const Scalar half = tr / 2;
    const Scalar disc = half * half - det;
    if (disc < Scalar(0)) return;  // complex pair stays as a block
    const Scalar root = std::sqrt(disc);
    // Use the root closer to the trailing ratio; either is valid.
    const Scalar ratio = s_(i + 1, i + 1) / t_(i + 1, i + 1);
    const Scalar l1 = half + root, l2 = half - root;
    const Scalar lambda = std::abs(l1 - ratio) < std::abs(l2 - ratio) ? l1 : l2;

    const Scalar n00 = s_(i, i) - lambda * t_(i, i), n01 = s_(i, i + 1) - lambda * t_(i, i + 1);
    const Scalar n10 = s_(i + 1, i), n11 = s_(i + 1, i + 1) - lambda * t_(i + 1, i + 1);
    // Right rotation sending the null vector of N = S2 - lambda T2 to e1.
    const bool top = std::hypot(n00, n01) >= std::hypot(n10, n11);
    const Rot<Scalar> gz = top ? make_givens(n01, n00) : make_givens(n11, n10);
    right(i + 1, i, gz, i + 1, i + 1);
    left(i, i + 1, make_givens(t_(i, i), t_(i + 1, i)), i);
    t_(i + 1, i) = 0;
    s_(i + 1, i) = 0;
  }

  void sweep(Eigen::Index lo, Eigen::Index hi, bool exceptional) {
    Scalar tr, det;
    if (exceptional) {
      const Scalar ss = std::abs(s_(hi, hi - 1) / t_(hi - 1, hi - 1)) +
                        std::abs(s_(hi - 1, hi - 2) / t_(hi - 2, hi - 2));
      tr = Scalar(1.5) * ss;
      det = ss * ss;
    } else {
      trace_det(hi - 1, tr, det);
    }
    // First column of (M - l1)(M - l2) with M = S T^-1 on the leading block.
    const Scalar t11 = t_(lo, lo), t12 = t_(lo, lo + 1), t22 = t_(lo + 1, lo + 1);
    const Scalar m11 = s_(lo, lo) / t11;
    const Scalar m21 = s_(lo + 1, lo) / t11;
    const Scalar m12 = -s_(lo, lo) * t12 / (t11 * t22) + s_(lo, lo + 1) / t22;
    const Scalar m22 = -s_(lo + 1, lo) * t12 / (t11 * t22) + s_(lo + 1, lo + 1) / t22;
    const Scalar m32 = s_(lo + 2, lo + 1) / t22;
    Scalar x = m11 * m11 + m12 * m21 - tr * m11 + det;
    Scalar y = m21 * (m11 + m22 - tr);
    Scalar z = m21 * m32;

    for (Eigen::Index k = lo; k <= hi - 2; ++k) {
      if (k > lo) {
        x = s_(k, k - 1);
        y = s_(k + 1, k - 1);
        z = s_(k + 2, k - 1);
      }
      const Rot<Scalar> g1 = make_givens(y, z);
      left(k + 1, k + 2, g1, k > lo ? k - 1 : k);
      const Scalar y2 = g1.c * y + g1.s * z;
      const Rot<Scalar> g2 = make_givens(x, y2);
      left(k, k + 1, g2, k > lo ? k - 1 : k);
      if (k > lo) {
        s_(k + 1, k - 1) = 0;
        s_(k + 2, k - 1) = 0;
      }
      const Eigen::Index rs = std::min(k + 3, hi);
      right(k + 2, k + 1, make_givens(t_(k + 2, k + 2), t_(k + 2, k + 1)), rs, k + 2);
      t_(k + 2, k + 1) = 0;
      right(k + 2, k, make_givens(t_(k + 2, k + 2), t_(k + 2, k)), rs, k + 2);
      t_(k + 2, k) = 0;
      right(k + 1, k, make_givens(t_(k + 1, k + 1), t_(k + 1, k)), rs, k + 1);
      t_(k + 1, k) = 0;
    }
    // Last bulge row.
    const Eigen::Index k = hi - 1;
    left(k, k + 1, make_givens(s_(k, k - 1), s_(k + 1, k - 1)), k - 1);
    s_(k + 1, k - 1) = 0;
    right(k + 1, k, make_givens(t_(k + 1, k + 1), t_(k + 1, k)), hi, k + 1);
    t_(k + 1, k) = 0;
  }

  DenseMatrix<Scalar>& s_;
  DenseMatrix<Scalar>& t_;
  DenseMatrix<Scalar>* q_;
  DenseMatrix<Scalar>* z_;
  Eigen::Index n_;
};

template <typename Scalar>
bool eig_less(const std::complex<Scalar>& a, Scalar ba, const std::complex<Scalar>& b, Scalar bb) {
  const bool fa = ba != Scalar(0), fb = bb != Scalar(0);
  if (fa != fb) return fa;
  const std::complex<Scalar> la = fa ? a / ba : a, lb = fb ? b / bb : b;
  if (la.real() != lb.real()) return la.real() < lb.real();
  return la.imag() < lb.imag();
}

}  // namespace qz_detail

/// Real QZ: Householder QR of B, Givens reduction to Hessenberg-triangular
/// form, then implicit double-shift sweeps with deflation. The iteration cap
/// is 30 n sweeps (NonConvergence). alpha/beta are returned in sorted order,
/// not in the diagonal order of S and T.
template <typename Scalar>
GeneralizedEigen<Scalar> qz_decompose(const Pencil<Scalar>& p, bool with_vectors = true) {
  using Mat = DenseMatrix<Scalar>;
  const Eigen::Index n = p.a.rows();
  if (n < 1 || p.a.cols() != n || p.b.rows() != n || p.b.cols() != n)
    throw Error(Errc::ShapeMismatch, "pencil needs two square matrices of the same size");
  if (!p.a.allFinite() || !p.b.allFinite()) throw Error(Errc::NonFinite, "pencil has non-finite entries");

  GeneralizedEigen<Scalar> out;
  Eigen::HouseholderQR<Mat> qr(p.b);
  Mat q = qr.householderQ();
  out.t = qr.matrixQR().template triangularView<Eigen::Upper>();
  out.s = q.transpose() * p.a;
  Mat z = Mat::Identity(n, n);

  qz_detail::Qz<Scalar> qz(out.s, out.t, with_vectors ? &q : nullptr, with_vectors ? &z : nullptr);
  qz.hessenberg_triangular();
  qz.iterate();
  qz.normalise_signs();
  if (!out.s.allFinite() || !out.t.allFinite()) throw Error(Errc::NonFinite, "QZ produced non-finite values");

  std::vector<std::complex<Scalar>> alpha(static_cast<std::size_t>(n));
  std::vector<Scalar> beta(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n;) {
    const auto u = static_cast<std::size_t>(i);
    if (i + 1 < n && out.s(i + 1, i) != Scalar(0)) {
      // Complex pair: both eigenvalues from one trace/determinant so the pair
      // is exactly conjugate.
      const Scalar a = out.s(i, i), b = out.s(i, i + 1), c = out.s(i + 1, i), d = out.s(i + 1, i + 1);
      const Scalar pp = out.t(i, i), qq = out.t(i, i + 1), rr = out.t(i + 1, i + 1);
      const Scalar tr = a / pp - c * qq / (pp * rr) + d / rr;
      const Scalar det = (a * d - b * c) / (pp * rr);
      const Scalar half = tr / 2;
      const Scalar disc = half * half - det;
      beta[u] = pp;
      beta[u + 1] = rr;
      if (disc < Scalar(0)) {
        const Scalar im = std::sqrt(-disc);
        alpha[u] = std::complex<Scalar>(half, im) * pp;
        alpha[u + 1] = std::complex<Scalar>(half, -im) * rr;
      } else {
        const Scalar root = std::sqrt(disc);
        alpha[u] = std::complex<Scalar>(half + root, 0) * pp;
        alpha[u + 1] = std::complex<Scalar>(half - root, 0) * rr;
      }
      i += 2;
    } else {
      alpha[u] = out.s(i, i);
      beta[u] = out.t(i, i);
      ++i;
    }
  }

  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return qz_detail::eig_less(alpha[x], beta[x], alpha[y], beta[y]);
  });
  out.alpha.resize(n);
  out.beta.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.alpha[i] = alpha[order[static_cast<std::size_t>(i)]];
    out.beta[i] = beta[order[static_cast<std::size_t>(i)]];
  }
  if (with_vectors) {
    out.q = std::move(q);
    out.z = std::move(z);
  }
  return out;
}

template <typename DerivedA, typename DerivedB>
auto qz_decompose(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                  bool with_vectors = true) {
  using Scalar = typename DerivedA::Scalar;
  return qz_decompose(Pencil<Scalar>{a.eval(), b.eval()}, with_vectors);
}

/// Eigenvalues of a square matrix via the pencil (m, I), in the same order.
template <typename Derived>
ComplexVector<typename Derived::Scalar> matrix_eigenvalues(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.rows() != m.cols()) throw Error(Errc::ShapeMismatch, "matrix must be square");
  return qz_decompose(Pencil<Scalar>{m.eval(), DenseMatrix<Scalar>::Identity(m.rows(), m.cols())}, false)
      .eigenvalues();
}

// ---------------------------------------------------------------------------
// Chordal metric

/// |a - b| / (sqrt(1 + |a|^2) sqrt(1 + |b|^2)); an infinite argument takes the
/// limit 1 / sqrt(1 + |b|^2).
double chordal_distance(std::complex<double> a, std::complex<double> b);

Eigen::VectorXd chordal_vector(const Eigen::VectorXcd& lam_g, const Eigen::VectorXcd& lam_x);

struct ChordalReport {
  Eigen::VectorXd pairwise;
  double gamma = 0.0;
  double total = 0.0;
  double mean_eig_magnitude = 0.0;
  int ill_count = 0;
};

/// Eigen-data of a target grid reused across many chordal_loss calls.
struct ChordalTarget {
  Eigen::MatrixXd grid;
  Eigen::VectorXcd eigenvalues;
  double mean_eig_magnitude = 0.0;
};

ChordalTarget make_chordal_target(const Eigen::Ref<const Eigen::MatrixXd>& x_t);

inline constexpr double kDefaultTolBeta = 1e-6;

/// mean pairwise chordal distance of the sorted eigenvalues plus gamma, the
/// fraction of (x_g, x_t) pencil eigenpairs with |beta| <= tol_beta mean|beta|.
ChordalReport chordal_loss(const Eigen::Ref<const Eigen::MatrixXd>& x_g,
                           const Eigen::Ref<const Eigen::MatrixXd>& x_t, double tol_beta = kDefaultTolBeta);
ChordalReport chordal_loss(const Eigen::Ref<const Eigen::MatrixXd>& x_g, const ChordalTarget& target,
                           double tol_beta = kDefaultTolBeta);

/// Elementwise lambda_g / lambda_x of the sorted eigenvalues (the pencil
/// translation); reported for inspection only.
Eigen::VectorXcd translation_vector(const Eigen::VectorXcd& lam_g, const Eigen::VectorXcd& lam_x);

}  // namespace purify
