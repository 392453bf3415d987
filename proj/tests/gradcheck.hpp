#pragma once

// Central-difference oracle for every layer of the tensor core. Each check
// builds L = <R, f(inputs)> for a random R, runs the analytic backward with
// dy = R, and compares against (L(x + h) - L(x - h)) / 2h entry by entry.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "purify/ccgan.hpp"
#include "purify/nn.hpp"

namespace purify::test {

using nn::Batch;
using nn::Dims;

struct GradCheck {
  std::string layer;
  std::string shape;
  double rel_error = 0.0;
};

/// Max-norm error relative to the larger gradient; the 1e-6 floor keeps
/// exactly-zero gradients (biases ahead of batch norm) from dividing noise.
inline double rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-6});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

/// d loss / d x by central differences, x perturbed in place and restored.
template <class M>
Eigen::MatrixXd numeric_grad(M& x, const std::function<double()>& loss, double h = 1e-4) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double v = x(i, j);
      x(i, j) = v + h;
      const double lp = loss();
      x(i, j) = v - h;
      const double lm = loss();
      x(i, j) = v;
      g(i, j) = (lp - lm) / (2.0 * h);
    }
  return g;
}

inline Batch random_batch(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Batch b(r, c);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = nd(rng);
  return b;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  return Eigen::MatrixXd(random_batch(r, c, rng, scale));
}

inline double dot(const Batch& a, const Batch& b) { return (a.array() * b.array()).sum(); }

inline std::string dims_str(Eigen::Index n, Dims d) {
  return std::to_string(n) + "x" + std::to_string(d.c) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

/// Runs every layer check on three random shapes each.
inline std::vector<GradCheck> run_gradient_checks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheck> out;
  auto pick = [&](int lo, int hi) { return static_cast<Eigen::Index>(lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo + 1))); };
  auto add = [&](const std::string& layer, const std::string& shape, std::initializer_list<double> errs) {
    out.push_back({layer, shape, *std::max_element(errs.begin(), errs.end())});
  };

  for (int trial = 0; trial < 3; ++trial) {
    const Eigen::Index n = pick(1, 4);
    {  // linear
      const Eigen::Index in = pick(1, 7), o = pick(1, 6);
      Batch x = random_batch(n, in, rng);
      Eigen::MatrixXd w = random_matrix(o, in, rng);
      Eigen::VectorXd b = random_matrix(o, 1, rng);
      const Batch r = random_batch(n, o, rng);
      auto loss = [&] { return dot(r, nn::linear(x, w, b)); };
      Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(o, in);
      Eigen::VectorXd db = Eigen::VectorXd::Zero(o);
      const Batch dx = nn::linear_backward(x, w, r, dw, db);
      add("linear", std::to_string(n) + "x" + std::to_string(in) + "->" + std::to_string(o),
          {rel_error(dx, numeric_grad(x, loss)), rel_error(dw, numeric_grad(w, loss)),
           rel_error(db, numeric_grad(b, loss))});
    }
    for (int k : {1, 3}) {  // convolution
      const Dims d{pick(1, 3), pick(2, 6), pick(2, 6)};
      const Eigen::Index co = pick(1, 3);
      Batch x = random_batch(n, d.size(), rng);
      Eigen::MatrixXd w = random_matrix(co, d.c * k * k, rng);
      Eigen::VectorXd b = random_matrix(co, 1, rng);
      const Batch r = random_batch(n, co * d.plane(), rng);
      auto loss = [&] { return dot(r, nn::conv2d(x, d, w, b, k)); };
      Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(co, d.c * k * k);
      Eigen::VectorXd db = Eigen::VectorXd::Zero(co);
      const Batch dx = nn::conv2d_backward(x, d, w, k, r, dw, db);
      add("conv" + std::to_string(k) + "x" + std::to_string(k), dims_str(n, d) + "->" + std::to_string(co),
          {rel_error(dx, numeric_grad(x, loss)), rel_error(dw, numeric_grad(w, loss)),
           rel_error(db, numeric_grad(b, loss))});
    }
    {  // batch norm, both modes
      const Dims d{pick(1, 3), pick(1, 4), pick(1, 4)};
      const Eigen::Index nb = std::max<Eigen::Index>(n, 2);
      Batch x = random_batch(nb, d.size(), rng);
      Eigen::VectorXd gamma = random_matrix(d.c, 1, rng), beta = random_matrix(d.c, 1, rng);
      const Eigen::VectorXd mean = random_matrix(d.c, 1, rng);
      const Eigen::VectorXd var = random_matrix(d.c, 1, rng).cwiseAbs().array() + 0.5;
      const Batch r = random_batch(nb, d.size(), rng);
      for (bool train : {true, false}) {
        auto loss = [&] { return dot(r, nn::batchnorm(x, d, gamma, beta, mean, var, train, 1e-5, nullptr)); };
        nn::BatchNormCache c;
        nn::batchnorm(x, d, gamma, beta, mean, var, train, 1e-5, &c);
        Eigen::VectorXd dg = Eigen::VectorXd::Zero(d.c), dbt = Eigen::VectorXd::Zero(d.c);
        const Batch dx = nn::batchnorm_backward(c, d, gamma, train, r, dg, dbt);
        add(train ? "batchnorm(train)" : "batchnorm(eval)", dims_str(nb, d),
            {rel_error(dx, numeric_grad(x, loss)), rel_error(dg, numeric_grad(gamma, loss)),
             rel_error(dbt, numeric_grad(beta, loss))});
      }
    }
    {  // pointwise, resampling and pooling layers
      const Dims d{pick(1, 3), 2 * pick(1, 3), 2 * pick(1, 3)};
      Batch x = random_batch(n, d.size(), rng);
      const Batch r = random_batch(n, d.size(), rng);
      {
        auto loss = [&] { return dot(r, nn::relu(x)); };
        add("relu", dims_str(n, d), {rel_error(nn::relu_backward(x, r), numeric_grad(x, loss))});
      }
      {
        auto loss = [&] { return dot(r, nn::tanh(x)); };
        add("tanh", dims_str(n, d), {rel_error(nn::tanh_backward(nn::tanh(x), r), numeric_grad(x, loss))});
      }
      {
        const Batch ru = random_batch(n, 4 * d.size(), rng);
        auto loss = [&] { return dot(ru, nn::upsample2(x, d)); };
        add("upsample", dims_str(n, d), {rel_error(nn::upsample2_backward(ru, d), numeric_grad(x, loss))});
      }
      const Batch rp = random_batch(n, d.size() / 4, rng);
      {
        auto loss = [&] { return dot(rp, nn::avgpool2(x, d)); };
        add("avgpool", dims_str(n, d), {rel_error(nn::avgpool2_backward(rp, d), numeric_grad(x, loss))});
      }
      {
        std::vector<Eigen::Index> arg;
        nn::maxpool2(x, d, &arg);
        auto loss = [&] { return dot(rp, nn::maxpool2(x, d, nullptr)); };
        add("maxpool", dims_str(n, d), {rel_error(nn::maxpool2_backward(rp, d, arg), numeric_grad(x, loss))});
      }
      {
        const Batch rs = random_batch(n, d.c, rng);
        auto loss = [&] { return dot(rs, nn::spatial_sum(x, d)); };
        add("spatial_sum", dims_str(n, d), {rel_error(nn::spatial_sum_backward(rs, d), numeric_grad(x, loss))});
      }
    }
    {  // non-local attention
      const Dims d{pick(2, 5), pick(2, 4), pick(2, 4)};
      const Eigen::Index c1 = pick(1, 3), c2 = pick(1, 3);
      Batch x = random_batch(n, d.size(), rng);
      Eigen::MatrixXd th = random_matrix(c1, d.c, rng, 0.7), ph = random_matrix(c1, d.c, rng, 0.7);
      Eigen::MatrixXd g = random_matrix(c2, d.c, rng), o = random_matrix(d.c, c2, rng);
      Eigen::MatrixXd gam = random_matrix(1, 1, rng);
      const Batch r = random_batch(n, d.size(), rng);
      auto fwd = [&](nn::NonLocalCache* c) { return nn::nonlocal(x, d, {th, ph, g, o, gam(0, 0)}, c); };
      auto loss = [&] { return dot(r, fwd(nullptr)); };
      nn::NonLocalCache c;
      fwd(&c);
      Eigen::MatrixXd dth = Eigen::MatrixXd::Zero(c1, d.c), dph = dth, dg = Eigen::MatrixXd::Zero(c2, d.c),
                      dout = Eigen::MatrixXd::Zero(d.c, c2);
      double dgam = 0.0;
      const Batch dx = nn::nonlocal_backward(x, d, {th, ph, g, o, gam(0, 0)}, c, r, {dth, dph, dg, dout, dgam});
      add("nonlocal", dims_str(n, d),
          {rel_error(dx, numeric_grad(x, loss)), rel_error(dth, numeric_grad(th, loss)),
           rel_error(dph, numeric_grad(ph, loss)), rel_error(dg, numeric_grad(g, loss)),
           rel_error(dout, numeric_grad(o, loss)), rel_error(Eigen::MatrixXd::Constant(1, 1, dgam), numeric_grad(gam, loss))});
    }
    {  // embedding and concatenation
      const Eigen::Index classes = pick(2, 4), dim = pick(1, 5), za = pick(1, 4);
      Eigen::MatrixXd table = random_matrix(classes, dim, rng);
      std::vector<int> ids;
      for (Eigen::Index i = 0; i < n; ++i) ids.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
      Batch a = random_batch(n, za, rng);
      const Batch r = random_batch(n, za + dim, rng);
      auto loss = [&] { return dot(r, nn::concat(a, nn::embedding(table, ids))); };
      Eigen::MatrixXd dt = Eigen::MatrixXd::Zero(classes, dim);
      nn::embedding_backward(ids, r.rightCols(dim), dt);
      add("embedding", std::to_string(classes) + "x" + std::to_string(dim), {rel_error(dt, numeric_grad(table, loss))});
      add("concat", std::to_string(n) + "x(" + std::to_string(za) + "+" + std::to_string(dim) + ")",
          {rel_error(r.leftCols(za), numeric_grad(a, loss))});
    }
    {  // spectral normalisation with u, v held fixed
      const Eigen::Index rows = pick(1, 6), cols = pick(1, 6);
      Eigen::MatrixXd w = random_matrix(rows, cols, rng);
      nn::SpectralState st = nn::spectral_state(rows, rng);
      nn::spectral_normalize(w, st);
      const Eigen::MatrixXd r = random_matrix(rows, cols, rng);
      auto loss = [&] {
        const double s = st.u.dot(w * st.v);
        return (r.array() * (w / s).array()).sum();
      };
      const nn::SpectralState at{st.u, st.v, st.u.dot(w * st.v)};
      add("spectral_norm", std::to_string(rows) + "x" + std::to_string(cols),
          {rel_error(nn::spectral_normalize_backward(w, at, r), numeric_grad(w, loss))});
    }
    {  // orthogonal regulariser
      const Eigen::Index rows = pick(1, 6), cols = pick(1, 6);
      Eigen::MatrixXd w = random_matrix(rows, cols, rng);
      auto loss = [&] { return nn::orthogonal_regularizer(w, 0.7).penalty; };
      add("orthogonal_reg", std::to_string(rows) + "x" + std::to_string(cols),
          {rel_error(nn::orthogonal_regularizer(w, 0.7).gradient, numeric_grad(w, loss))});
    }
  }
  return out;
}

/// Whole-model checks: every generator and discriminator parameter entry
/// (sampled) plus the latent and input gradients.
inline std::vector<GradCheck> run_model_gradient_checks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheck> out;
  GeneratorConfig gc;
  gc.resolution = 8;
  gc.latent_dim = 5;
  gc.embed_dim = 3;
  gc.base_channels = 8;
  gc.min_channels = 2;
  gc.n_classes = 3;
  Generator g(gc, rng());
  // Non-zero attention scale so the attention path carries gradient.
  for (auto& p : g.params())
    if (p.name == "nonlocal.gamma") p.value(0, 0) = 0.8;
  const Eigen::Index n = 3, S = gc.resolution;
  const std::vector<int> cls{0, 2, 1};
  const Batch r = random_batch(n, S * S, rng);
  // Central differences are meaningless across a ReLU kink, so the latent
  // draw is repeated until every rectifier input clears the step by 10x.
  auto kink_margin = [&](const Batch& zz, bool bs) {
    GeneratorTrace t;
    g.forward(zz, cls, bs, &t);
    double m = t.bf.cwiseAbs().minCoeff();
    for (const auto& b : t.blocks) m = std::min({m, b.b1.cwiseAbs().minCoeff(), b.b2.cwiseAbs().minCoeff()});
    return m;
  };
  Batch z;
  do z = random_batch(n, gc.latent_dim, rng);
  while (kink_margin(z, true) < 1e-3 || kink_margin(z, false) < 1e-3);
  for (bool batch_stats : {true, false}) {
    g.params().zero_grad();
    GeneratorTrace t;
    g.forward(z, cls, batch_stats, &t);
    const Batch dz = g.backward(t, r);
    auto loss = [&] { return dot(r, g.forward(z, cls, batch_stats)); };
    double worst = rel_error(dz, numeric_grad(z, loss));
    for (auto& p : g.params()) worst = std::max(worst, rel_error(p.grad, numeric_grad(p.value, loss)));
    out.push_back({batch_stats ? "generator(batch stats)" : "generator(running stats)", "S=8", worst});
  }

  DiscriminatorConfig dc;
  dc.resolution = 8;
  dc.channels = 4;
  dc.n_classes = 3;
  Discriminator d(dc, rng());
  for (auto& p : d.params())
    if (p.name == "nonlocal.gamma") p.value(0, 0) = -0.6;
  auto d_margin = [&](const Batch& xx) {
    DiscriminatorTrace t;
    d.forward(xx, cls, &t);
    return std::min(t.h1.cwiseAbs().minCoeff(), t.q.cwiseAbs().minCoeff());
  };
  Batch x;
  do x = random_batch(n, 3 * 64, rng);
  while (d_margin(x) < 1e-3);
  const Batch rl = random_batch(n, 1, rng);
  d.params().zero_grad();
  DiscriminatorTrace t;
  d.forward(x, cls, &t);
  const Batch dx = d.backward(t, rl);
  auto loss = [&] { return dot(rl, d.forward(x, cls)); };
  double worst = rel_error(dx, numeric_grad(x, loss));
  for (auto& p : d.params()) worst = std::max(worst, rel_error(p.grad, numeric_grad(p.value, loss)));
  out.push_back({"discriminator", "S=8", worst});
  return out;
}

}  // namespace purify::test
