// src/nn.cpp
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

#include "purify/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "purify/error.hpp"

namespace purify::nn {

namespace {

using RowMap = Eigen::Map<Batch>;
using ConstRowMap = Eigen::Map<const Batch>;

void expect_cols(const Batch& x, Index cols, const char* what) {
  if (x.cols() != cols)
    throw Error(Errc::ShapeMismatch, std::string(what) + ": expected " + std::to_string(cols) + " features, got " +
                                         std::to_string(x.cols()));
}

// Patch matrix (cin*k*k x H*W) of one sample. Each patch row is a shifted
// copy of one input plane, so rows are filled segment by segment.
void im2col(const double* x, Dims in, int k, Batch& col) {
  const int p = k / 2;
  col.resize(in.c * k * k, in.plane());
  for (Index ci = 0; ci < in.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col.row((ci * k + ky) * k + kx).data();
        const double* src = x + ci * in.plane();
        const Index dx = kx - p, x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(in.w, in.w - dx);
        for (Index y = 0; y < in.h; ++y) {
          double* dst = row + y * in.w;
          const Index sy = y + ky - p;
          if (sy < 0 || sy >= in.h || x0 >= x1) {
            std::fill(dst, dst + in.w, 0.0);
            continue;
          }
          std::fill(dst, dst + x0, 0.0);
          std::copy(src + sy * in.w + x0 + dx, src + sy * in.w + x1 + dx, dst + x0);
          std::fill(dst + x1, dst + in.w, 0.0);
        }
      }
}

void col2im(const Batch& col, Dims in, int k, double* dx) {
  const int p = k / 2;
  for (Index ci = 0; ci < in.c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col.row((ci * k + ky) * k + kx).data();
        double* dst = dx + ci * in.plane();
        const Index sx = kx - p, x0 = std::max<Index>(0, -sx), x1 = std::min<Index>(in.w, in.w - sx);
        for (Index y = 0; y < in.h; ++y) {
          const Index sy = y + ky - p;
          if (sy < 0 || sy >= in.h) continue;
          double* d = dst + sy * in.w + sx;
          const double* r = row + y * in.w;
          for (Index xx = x0; xx < x1; ++xx) d[xx] += r[xx];
        }
      }
}

// Softmax down each column (one column per query).
void softmax_cols(Eigen::MatrixXd& s) {
  for (Index j = 0; j < s.cols(); ++j) {
    auto c = s.col(j);
    c.array() = (c.array() - c.maxCoeff()).exp();
    c /= c.sum();
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<Index> s, Eigen::VectorXd v) : shape(std::move(s)), values(std::move(v)) { validate(); }

Index Tensor::numel() const {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

void Tensor::validate() const {
  for (Index d : shape)
    if (d < 0) throw Error(Errc::ShapeMismatch, "negative tensor dimension");
  if (numel() != values.size())
    throw Error(Errc::ShapeMismatch, "tensor holds " + std::to_string(values.size()) + " values for shape of " +
                                         std::to_string(numel()));
  if (!values.allFinite()) throw Error(Errc::NonFinite, "tensor has non-finite values");
}

// ---------------------------------------------------------------------------

Batch linear(const Batch& x, const Eigen::MatrixXd& w, const Eigen::Ref<const Eigen::VectorXd>& b) {
  expect_cols(x, w.cols(), "linear");
  Batch y = x * w.transpose();
  y.rowwise() += b.transpose();
  return y;
}

Batch linear_backward(const Batch& x, const Eigen::MatrixXd& w, const Batch& dy, Eigen::MatrixXd& dw,
                      Eigen::Ref<Eigen::VectorXd> db) {
  dw.noalias() += dy.transpose() * x;
  db += dy.colwise().sum().transpose();
  return dy * w;
}

Batch conv2d(const Batch& x, Dims in, const Eigen::MatrixXd& w, const Eigen::Ref<const Eigen::VectorXd>& b, int k) {
  expect_cols(x, in.size(), "conv2d");
  if (w.cols() != in.c * k * k) throw Error(Errc::ShapeMismatch, "conv2d: filter width does not match input");
  const Index cout = w.rows(), hw = in.plane();
  Batch y(x.rows(), cout * hw);
  Batch col;
  for (Index n = 0; n < x.rows(); ++n) {
    RowMap out(y.row(n).data(), cout, hw);
    if (k == 1) {
      out.noalias() = w * ConstRowMap(x.row(n).data(), in.c, hw);
    } else {
      im2col(x.row(n).data(), in, k, col);
      out.noalias() = w * col;
    }
    out.colwise() += b;
  }
  return y;
}

Batch conv2d_backward(const Batch& x, Dims in, const Eigen::MatrixXd& w, int k, const Batch& dy,
                      Eigen::MatrixXd& dw, Eigen::Ref<Eigen::VectorXd> db) {
  const Index cout = w.rows(), hw = in.plane();
  Batch dx = Batch::Zero(x.rows(), in.size());
  Batch col, dcol;
  for (Index n = 0; n < x.rows(); ++n) {
    ConstRowMap g(dy.row(n).data(), cout, hw);
    db += g.rowwise().sum();
    if (k == 1) {
      ConstRowMap xs(x.row(n).data(), in.c, hw);
      dw.noalias() += g * xs.transpose();
      RowMap(dx.row(n).data(), in.c, hw).noalias() = w.transpose() * g;
    } else {
      im2col(x.row(n).data(), in, k, col);
      dw.noalias() += g * col.transpose();
      dcol.noalias() = w.transpose() * g;
      col2im(dcol, in, k, dx.row(n).data());
    }
  }
  return dx;
}

Batch relu(const Batch& x) { return x.cwiseMax(0.0); }

Batch relu_backward(const Batch& x, const Batch& dy) { return (x.array() > 0.0).select(dy, 0.0); }

Batch tanh(const Batch& x) { return x.array().tanh().matrix(); }

Batch tanh_backward(const Batch& y, const Batch& dy) { return (dy.array() * (1.0 - y.array().square())).matrix(); }

Batch upsample2(const Batch& x, Dims in) {
  expect_cols(x, in.size(), "upsample2");
  const Index h2 = 2 * in.h, w2 = 2 * in.w;
  Batch y(x.rows(), in.c * h2 * w2);
  for (Index n = 0; n < x.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) {
      const double* src = x.row(n).data() + c * in.plane();
      double* dst = y.row(n).data() + c * h2 * w2;
      for (Index yy = 0; yy < h2; ++yy)
        for (Index xx = 0; xx < w2; ++xx) dst[yy * w2 + xx] = src[(yy / 2) * in.w + xx / 2];
    }
  return y;
}

Batch upsample2_backward(const Batch& dy, Dims in) {
  const Index h2 = 2 * in.h, w2 = 2 * in.w;
  Batch dx = Batch::Zero(dy.rows(), in.size());
  for (Index n = 0; n < dy.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) {
      const double* src = dy.row(n).data() + c * h2 * w2;
      double* dst = dx.row(n).data() + c * in.plane();
      for (Index yy = 0; yy < h2; ++yy)
        for (Index xx = 0; xx < w2; ++xx) dst[(yy / 2) * in.w + xx / 2] += src[yy * w2 + xx];
    }
  return dx;
}

Batch avgpool2(const Batch& x, Dims in) {
  expect_cols(x, in.size(), "avgpool2");
  const Index h2 = in.h / 2, w2 = in.w / 2;
  Batch y(x.rows(), in.c * h2 * w2);
  for (Index n = 0; n < x.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) {
      const double* src = x.row(n).data() + c * in.plane();
      double* dst = y.row(n).data() + c * h2 * w2;
      for (Index yy = 0; yy < h2; ++yy)
        for (Index xx = 0; xx < w2; ++xx) {
          const double* s = src + 2 * yy * in.w + 2 * xx;
          dst[yy * w2 + xx] = 0.25 * (s[0] + s[1] + s[in.w] + s[in.w + 1]);
        }
    }
  return y;
}

Batch avgpool2_backward(const Batch& dy, Dims in) {
  const Index h2 = in.h / 2, w2 = in.w / 2;
  Batch dx = Batch::Zero(dy.rows(), in.size());
  for (Index n = 0; n < dy.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) {
      const double* src = dy.row(n).data() + c * h2 * w2;
      double* dst = dx.row(n).data() + c * in.plane();
      for (Index yy = 0; yy < h2; ++yy)
        for (Index xx = 0; xx < w2; ++xx) {
          const double g = 0.25 * src[yy * w2 + xx];
          double* d = dst + 2 * yy * in.w + 2 * xx;
          d[0] += g;
          d[1] += g;
          d[in.w] += g;
          d[in.w + 1] += g;
        }
    }
  return dx;
}

Batch maxpool2(const Batch& x, Dims in, std::vector<Index>* argmax) {
  expect_cols(x, in.size(), "maxpool2");
  const Index h2 = in.h / 2, w2 = in.w / 2;
  Batch y(x.rows(), in.c * h2 * w2);
  if (argmax) argmax->assign(static_cast<std::size_t>(y.size()), 0);
  for (Index n = 0; n < x.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) {
      const double* src = x.row(n).data() + c * in.plane();
      for (Index yy = 0; yy < h2; ++yy)
        for (Index xx = 0; xx < w2; ++xx) {
          const Index base = 2 * yy * in.w + 2 * xx;
          Index best = base;
          for (Index off : {base + 1, base + in.w, base + in.w + 1})
            if (src[off] > src[best]) best = off;
          const Index o = c * h2 * w2 + yy * w2 + xx;
          y(n, o) = src[best];
          if (argmax) (*argmax)[static_cast<std::size_t>(n * y.cols() + o)] = c * in.plane() + best;
        }
    }
  return y;
}

Batch maxpool2_backward(const Batch& dy, Dims in, const std::vector<Index>& argmax) {
  Batch dx = Batch::Zero(dy.rows(), in.size());
  for (Index n = 0; n < dy.rows(); ++n)
    for (Index o = 0; o < dy.cols(); ++o) dx(n, argmax[static_cast<std::size_t>(n * dy.cols() + o)]) += dy(n, o);
  return dx;
}

Batch spatial_sum(const Batch& x, Dims in) {
  expect_cols(x, in.size(), "spatial_sum");
  Batch y(x.rows(), in.c);
  for (Index n = 0; n < x.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) y(n, c) = x.row(n).segment(c * in.plane(), in.plane()).sum();
  return y;
}

Batch spatial_sum_backward(const Batch& dy, Dims in) {
  Batch dx(dy.rows(), in.size());
  for (Index n = 0; n < dy.rows(); ++n)
    for (Index c = 0; c < in.c; ++c) dx.row(n).segment(c * in.plane(), in.plane()).setConstant(dy(n, c));
  return dx;
}

// ---------------------------------------------------------------------------

Batch batchnorm(const Batch& x, Dims d, const Eigen::Ref<const Eigen::VectorXd>& gamma,
                const Eigen::Ref<const Eigen::VectorXd>& beta, const Eigen::Ref<const Eigen::VectorXd>& mean,
                const Eigen::Ref<const Eigen::VectorXd>& var, bool training, double eps, BatchNormCache* cache) {
  expect_cols(x, d.size(), "batchnorm");
  const Index hw = d.plane();
  const double m = static_cast<double>(x.rows() * hw);
  Eigen::VectorXd mu = mean, sig2 = var;
  if (training) {
    mu.setZero(d.c);
    sig2.setZero(d.c);
    for (Index c = 0; c < d.c; ++c) {
      double s = 0.0;
      for (Index n = 0; n < x.rows(); ++n) s += x.row(n).segment(c * hw, hw).sum();
      mu[c] = s / m;
      double q = 0.0;
      for (Index n = 0; n < x.rows(); ++n) q += (x.row(n).segment(c * hw, hw).array() - mu[c]).square().sum();
      sig2[c] = q / m;
    }
  }
  const Eigen::VectorXd inv = (sig2.array() + eps).rsqrt();
  Batch xhat(x.rows(), x.cols()), y(x.rows(), x.cols());
  for (Index n = 0; n < x.rows(); ++n)
    for (Index c = 0; c < d.c; ++c) {
      xhat.row(n).segment(c * hw, hw) = (x.row(n).segment(c * hw, hw).array() - mu[c]) * inv[c];
      y.row(n).segment(c * hw, hw) = xhat.row(n).segment(c * hw, hw).array() * gamma[c] + beta[c];
    }
  if (cache) {
    cache->mean = mu;
    cache->var = sig2;
    cache->inv_std = inv;
    cache->xhat = std::move(xhat);
  }
  return y;
}

Batch batchnorm_backward(const BatchNormCache& cache, Dims d, const Eigen::Ref<const Eigen::VectorXd>& gamma,
                         bool training, const Batch& dy, Eigen::Ref<Eigen::VectorXd> dgamma,
                         Eigen::Ref<Eigen::VectorXd> dbeta) {
  const Index hw = d.plane();
  const double m = static_cast<double>(dy.rows() * hw);
  Batch dx(dy.rows(), dy.cols());
  for (Index c = 0; c < d.c; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (Index n = 0; n < dy.rows(); ++n) {
      sum_dy += dy.row(n).segment(c * hw, hw).sum();
      sum_dy_xhat += dy.row(n).segment(c * hw, hw).dot(cache.xhat.row(n).segment(c * hw, hw));
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double k = gamma[c] * cache.inv_std[c];
    for (Index n = 0; n < dy.rows(); ++n) {
      if (training)
        dx.row(n).segment(c * hw, hw) =
            k * (dy.row(n).segment(c * hw, hw).array() - sum_dy / m -
                 cache.xhat.row(n).segment(c * hw, hw).array() * (sum_dy_xhat / m));
      else
        dx.row(n).segment(c * hw, hw) = k * dy.row(n).segment(c * hw, hw);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

Batch nonlocal(const Batch& x, Dims d, const NonLocalWeights& w, NonLocalCache* cache) {
  expect_cols(x, d.size(), "nonlocal");
  if (w.theta.cols() != d.c || w.phi.cols() != d.c || w.g.cols() != d.c || w.out.rows() != d.c ||
      w.out.cols() != w.g.rows() || w.theta.rows() != w.phi.rows())
    throw Error(Errc::ShapeMismatch, "nonlocal: projection shapes do not match the input channels");
  const Index hw = d.plane();
  Batch y(x.rows(), x.cols());
  if (cache) {
    for (auto* v : {&cache->theta, &cache->phi, &cache->g, &cache->attn, &cache->y})
      v->assign(static_cast<std::size_t>(x.rows()), {});
  }
  for (Index n = 0; n < x.rows(); ++n) {
    ConstRowMap xs(x.row(n).data(), d.c, hw);
    Eigen::MatrixXd th = w.theta * xs, ph = w.phi * xs, g = w.g * xs;
    Eigen::MatrixXd a = ph.transpose() * th;
    softmax_cols(a);
    Eigen::MatrixXd att = g * a;
    RowMap(y.row(n).data(), d.c, hw) = xs + w.gamma * (w.out * att);
    if (cache) {
      const auto i = static_cast<std::size_t>(n);
      cache->theta[i] = std::move(th);
      cache->phi[i] = std::move(ph);
      cache->g[i] = std::move(g);
      cache->attn[i] = std::move(a);
      cache->y[i] = std::move(att);
    }
  }
  return y;
}

Batch nonlocal_backward(const Batch& x, Dims d, const NonLocalWeights& w, const NonLocalCache& c,
                        const Batch& dy, NonLocalGrads grads) {
  const Index hw = d.plane();
  Batch dx(x.rows(), x.cols());
  for (Index n = 0; n < x.rows(); ++n) {
    const auto i = static_cast<std::size_t>(n);
    ConstRowMap xs(x.row(n).data(), d.c, hw);
    ConstRowMap dout(dy.row(n).data(), d.c, hw);
    const Eigen::MatrixXd o = w.out * c.y[i];
    grads.gamma += (dout.array() * o.array()).sum();
    const Eigen::MatrixXd dob = w.gamma * dout;
    grads.out.noalias() += dob * c.y[i].transpose();
    const Eigen::MatrixXd datt = w.out.transpose() * dob;
    const Eigen::MatrixXd& a = c.attn[i];
    const Eigen::MatrixXd dg = datt * a.transpose();
    Eigen::MatrixXd ds = c.g[i].transpose() * datt;
    const Eigen::RowVectorXd cs = (ds.array() * a.array()).colwise().sum();
    ds = (a.array() * (ds.rowwise() - cs).array()).matrix();
    const Eigen::MatrixXd dth = c.phi[i] * ds;
    const Eigen::MatrixXd dph = c.theta[i] * ds.transpose();
    grads.theta.noalias() += dth * xs.transpose();
    grads.phi.noalias() += dph * xs.transpose();
    grads.g.noalias() += dg * xs.transpose();
    RowMap(dx.row(n).data(), d.c, hw) =
        dout + w.theta.transpose() * dth + w.phi.transpose() * dph + w.g.transpose() * dg;
  }
  return dx;
}

Batch embedding(const Eigen::MatrixXd& table, const std::vector<int>& ids) {
  Batch y(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || ids[n] >= table.rows())
      throw Error(Errc::ShapeMismatch, "class id " + std::to_string(ids[n]) + " out of range");
    y.row(static_cast<Index>(n)) = table.row(ids[n]);
  }
  return y;
}

void embedding_backward(const std::vector<int>& ids, const Batch& dy, Eigen::MatrixXd& dtable) {
  for (std::size_t n = 0; n < ids.size(); ++n) dtable.row(ids[n]) += dy.row(static_cast<Index>(n));
}

Batch concat(const Batch& a, const Batch& b) {
  if (a.rows() != b.rows()) throw Error(Errc::ShapeMismatch, "concat: batch sizes differ");
  Batch y(a.rows(), a.cols() + b.cols());
  y << a, b;
  return y;
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd orthogonal_init(Index rows, Index cols, double gain, std::mt19937_64& rng) {
  if (rows < 1 || cols < 1) throw Error(Errc::ShapeMismatch, "orthogonal_init needs a non-empty shape");
  const Index big = std::max(rows, cols), small = std::min(rows, cols);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd a(big, small);
  for (Index j = 0; j < small; ++j)
    for (Index i = 0; i < big; ++i) a(i, j) = nd(rng);
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (Index j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  q *= gain;
  if (rows < cols) return q.transpose();
  return q;
}

OrthoPenalty orthogonal_regularizer(const Eigen::Ref<const Eigen::MatrixXd>& w, double beta) {
  if (!(beta >= 0.0)) throw Error(Errc::BadConfig, "orthogonal regulariser weight must be >= 0");
  Eigen::MatrixXd gram = w.transpose() * w;
  gram.diagonal().setZero();
  OrthoPenalty out;
  out.penalty = beta * gram.squaredNorm();
  out.gradient = 4.0 * beta * w * gram;
  return out;
}

SpectralState spectral_state(Index rows, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  SpectralState st;
  st.u.resize(rows);
  for (Index i = 0; i < rows; ++i) st.u[i] = nd(rng);
  st.u.normalize();
  return st;
}

Eigen::MatrixXd spectral_normalize(const Eigen::MatrixXd& w, SpectralState& st) {
  if (st.u.size() != w.rows()) throw Error(Errc::ShapeMismatch, "spectral state does not match the weight");
  if (w.cwiseAbs().maxCoeff() == 0.0) throw Error(Errc::ZeroMatrix, "cannot normalise a zero matrix");
  Eigen::VectorXd v = w.transpose() * st.u;
  if (v.norm() == 0.0) v = Eigen::VectorXd::Ones(w.cols());
  v.normalize();
  Eigen::VectorXd u = w * v;
  u.normalize();
  st.u = u;
  st.v = v;
  st.sigma = u.dot(w * v);
  return w / st.sigma;
}

double spectral_sigma(const Eigen::MatrixXd& w, SpectralState& st) {
  if (st.u.size() != w.rows()) throw Error(Errc::ShapeMismatch, "spectral state does not match the weight");
  Eigen::VectorXd v = w.transpose() * st.u;
  if (v.norm() == 0.0) throw Error(Errc::ZeroMatrix, "power iteration vector vanished");
  st.v = v.normalized();
  st.sigma = st.u.dot(w * st.v);
  return st.sigma;
}

Eigen::MatrixXd spectral_normalize_backward(const Eigen::MatrixXd& w, const SpectralState& st,
                                            const Eigen::MatrixXd& g) {
  const double inner = (g.array() * w.array()).sum() / st.sigma;
  return (g - inner * st.u * st.v.transpose()) / st.sigma;
}

// ---------------------------------------------------------------------------

void adam_step(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamMoments& s, std::int64_t t,
               const AdamHyper& h) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols())
    throw Error(Errc::ShapeMismatch, "adam: gradient shape differs from parameter");
  if (t < 1) throw Error(Errc::BadConfig, "adam step index starts at 1");
  if (s.m.size() == 0) {
    s.m = Eigen::MatrixXd::Zero(param.rows(), param.cols());
    s.v = Eigen::MatrixXd::Zero(param.rows(), param.cols());
  }
  s.m = h.beta1 * s.m + (1.0 - h.beta1) * grad;
  s.v = h.beta2 * s.v + (1.0 - h.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  param.array() -= h.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + h.eps);
}

std::size_t ParamSet::add(std::string name, Eigen::MatrixXd value, bool spectral, bool orthogonal) {
  Param p;
  p.name = std::move(name);
  p.grad = Eigen::MatrixXd::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  p.spectral = spectral;
  p.orthogonal = orthogonal;
  items_.push_back(std::move(p));
  return items_.size() - 1;
}

void ParamSet::zero_grad() {
  for (auto& p : items_) p.grad.setZero();
}

Index ParamSet::count() const {
  Index n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

bool ParamSet::operator==(const ParamSet& o) const {
  if (items_.size() != o.items_.size()) return false;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const Param &a = items_[i], &b = o.items_[i];
    if (a.name != b.name || a.value != b.value || a.spectral != b.spectral || a.orthogonal != b.orthogonal ||
        a.sn.u != b.sn.u)
      return false;
  }
  return true;
}

void adam_step(ParamSet& params, AdamState& state, const AdamHyper& h) {
  state.moments.resize(params.size());
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) adam_step(params[i].value, params[i].grad, state.moments[i], state.t, h);
  params.touch();
}

double add_orthogonal_penalty(ParamSet& params, double beta) {
  double total = 0.0;
  if (beta == 0.0) return total;
  for (auto& p : params) {
    if (!p.orthogonal) continue;
    const OrthoPenalty r = orthogonal_regularizer(p.value.transpose(), beta);
    total += r.penalty;
    p.grad += r.gradient.transpose();
  }
  return total;
}

}  // namespace purify::nn
