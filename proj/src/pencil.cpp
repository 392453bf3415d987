// src/pencil.cpp
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

#include "purify/pencil.hpp"

#include <cmath>

namespace purify {

double chordal_distance(std::complex<double> a, std::complex<double> b) {
  const bool ia = std::isinf(a.real()) || std::isinf(a.imag());
  const bool ib = std::isinf(b.real()) || std::isinf(b.imag());
  if (ia && ib) return 0.0;
  if (ia) return 1.0 / std::sqrt(1.0 + std::norm(b));
  if (ib) return 1.0 / std::sqrt(1.0 + std::norm(a));
  return std::abs(a - b) / (std::sqrt(1.0 + std::norm(a)) * std::sqrt(1.0 + std::norm(b)));
}

Eigen::VectorXd chordal_vector(const Eigen::VectorXcd& lam_g, const Eigen::VectorXcd& lam_x) {
  if (lam_g.size() != lam_x.size())
    throw Error(Errc::LengthMismatch, "eigenvalue vectors differ in length");
  Eigen::VectorXd out(lam_g.size());
  for (Eigen::Index i = 0; i < lam_g.size(); ++i) out[i] = chordal_distance(lam_g[i], lam_x[i]);
  return out;
}

ChordalTarget make_chordal_target(const Eigen::Ref<const Eigen::MatrixXd>& x_t) {
  ChordalTarget t;
  t.grid = x_t;
  t.eigenvalues = matrix_eigenvalues(t.grid);
  t.mean_eig_magnitude = t.eigenvalues.cwiseAbs().mean();
  return t;
}

ChordalReport chordal_loss(const Eigen::Ref<const Eigen::MatrixXd>& x_g, const ChordalTarget& target,
                           double tol_beta) {
  if (x_g.rows() != x_g.cols() || x_g.rows() != target.grid.rows() || x_g.cols() != target.grid.cols())
    throw Error(Errc::ShapeMismatch, "chordal loss needs equal square grids");
  if (!(tol_beta > 0.0)) throw Error(Errc::BadConfig, "tol_beta must be positive");
  const Eigen::MatrixXd g = x_g;

  ChordalReport r;
  r.pairwise = chordal_vector(matrix_eigenvalues(g), target.eigenvalues);
  const auto pencil = qz_decompose(Pencil<double>{g, target.grid}, false);
  const double mean_beta = pencil.beta.cwiseAbs().mean();
  for (Eigen::Index i = 0; i < pencil.beta.size(); ++i)
    if (std::abs(pencil.beta[i]) <= tol_beta * mean_beta) ++r.ill_count;
  r.gamma = static_cast<double>(r.ill_count) / static_cast<double>(g.rows());
  r.total = r.pairwise.mean() + r.gamma;
  r.mean_eig_magnitude = target.mean_eig_magnitude;
  return r;
}

ChordalReport chordal_loss(const Eigen::Ref<const Eigen::MatrixXd>& x_g,
                           const Eigen::Ref<const Eigen::MatrixXd>& x_t, double tol_beta) {
  return chordal_loss(x_g, make_chordal_target(x_t), tol_beta);
}

Eigen::VectorXcd translation_vector(const Eigen::VectorXcd& lam_g, const Eigen::VectorXcd& lam_x) {
  if (lam_g.size() != lam_x.size())
    throw Error(Errc::LengthMismatch, "eigenvalue vectors differ in length");
  return lam_g.cwiseQuotient(lam_x);
}

}  // namespace purify
