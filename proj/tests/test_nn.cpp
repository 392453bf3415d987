#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "purify/error.hpp"
#include "purify/nn.hpp"
#include "test_support.hpp"

using namespace purify;
using nn::Batch;

TEST_CASE("layer gradients match central differences") {
  for (const auto& c : test::run_gradient_checks(42)) {
    INFO(c.layer << " " << c.shape);
    CHECK(c.rel_error <= 1e-4);
  }
}

TEST_CASE("model gradients match central differences") {
  for (const auto& c : test::run_model_gradient_checks(7)) {
    INFO(c.layer << " " << c.shape << " err " << c.rel_error);
    CHECK(c.rel_error <= 1e-4);
  }
}

TEST_CASE("tanh gradient at zero is one") {
  const Batch y = nn::tanh(Batch::Zero(1, 1));
  CHECK(nn::tanh_backward(y, Batch::Ones(1, 1))(0, 0) == 1.0);
}

TEST_CASE("zero output gradient gives zero parameter gradients") {
  GeneratorConfig gc;
  gc.resolution = 8;
  Generator g(gc, 3);
  g.params().zero_grad();
  std::mt19937_64 rng(1);
  GeneratorTrace t;
  g.forward(test::random_batch(2, gc.latent_dim, rng), {0, 1}, true, &t);
  const Batch dz = g.backward(t, Batch::Zero(2, 64));
  CHECK(dz.cwiseAbs().maxCoeff() == 0.0);
  for (const auto& p : g.params()) CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d against a direct loop") {
  std::mt19937_64 rng(5);
  const nn::Dims d{2, 4, 5};
  const Batch x = test::random_batch(2, d.size(), rng);
  const Eigen::MatrixXd w = test::random_matrix(3, 18, rng);
  const Eigen::VectorXd b = test::random_matrix(3, 1, rng);
  const Batch y = nn::conv2d(x, d, w, b, 3);
  double worst = 0.0;
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 3; ++o)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 5; ++xx) {
          double s = b[o];
          for (int c = 0; c < 2; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sy = yy + ky - 1, sx = xx + kx - 1;
                if (sy < 0 || sy >= 4 || sx < 0 || sx >= 5) continue;
                s += w(o, (c * 3 + ky) * 3 + kx) * x(n, c * 20 + sy * 5 + sx);
              }
          worst = std::max(worst, std::abs(s - y(n, o * 20 + yy * 5 + xx)));
        }
  CHECK(worst <= 1e-12);
}

TEST_CASE("batchnorm normalises per channel in training mode") {
  std::mt19937_64 rng(9);
  const nn::Dims d{3, 4, 4};
  const Batch x = test::random_batch(5, d.size(), rng, 3.0).array() + 2.0;
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(3), zero = Eigen::VectorXd::Zero(3);
  const Batch y = nn::batchnorm(x, d, one, zero, zero, one, true, 0.0, nullptr);
  for (int c = 0; c < 3; ++c) {
    double s = 0.0, q = 0.0;
    for (int n = 0; n < 5; ++n) {
      s += y.row(n).segment(c * 16, 16).sum();
      q += y.row(n).segment(c * 16, 16).squaredNorm();
    }
    CHECK(std::abs(s / 80.0) <= 1e-12);
    CHECK(std::abs(q / 80.0 - 1.0) <= 1e-12);
  }
}

TEST_CASE("attention weights of each query sum to one") {
  std::mt19937_64 rng(2);
  const nn::Dims d{4, 3, 3};
  const Batch x = test::random_batch(2, d.size(), rng);
  const Eigen::MatrixXd th = test::random_matrix(1, 4, rng), ph = test::random_matrix(1, 4, rng),
                        g = test::random_matrix(2, 4, rng), o = test::random_matrix(4, 2, rng);
  nn::NonLocalCache c;
  const Batch y0 = nn::nonlocal(x, d, {th, ph, g, o, 0.0}, &c);
  CHECK(y0 == x);
  for (const auto& a : c.attn) CHECK((a.colwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("orthogonal init") {
  std::mt19937_64 rng(11);
  const Eigen::MatrixXd sq = nn::orthogonal_init(8, 8, 1.0, rng);
  CHECK((sq.transpose() * sq - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() <= 1e-5);
  const Eigen::MatrixXd wide = nn::orthogonal_init(4, 8, 1.0, rng);
  CHECK(wide.rows() == 4);
  CHECK((wide * wide.transpose() - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-5);
  const Eigen::MatrixXd tall = nn::orthogonal_init(9, 3, 2.0, rng);
  CHECK((tall.transpose() * tall - 4.0 * Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-5);
  std::mt19937_64 a(3), b(3);
  CHECK(nn::orthogonal_init(5, 7, 1.0, a) == nn::orthogonal_init(5, 7, 1.0, b));
  CHECK_THROWS_AS(nn::orthogonal_init(0, 3, 1.0, a), Error);
}

TEST_CASE("orthogonal regulariser") {
  std::mt19937_64 rng(12);
  CHECK(nn::orthogonal_regularizer(nn::orthogonal_init(6, 6, 1.0, rng), 1.0).penalty <= 1e-8);
  CHECK(nn::orthogonal_regularizer(Eigen::MatrixXd::Ones(2, 2), 1.0).penalty == 8.0);
  CHECK(nn::orthogonal_regularizer(Eigen::MatrixXd::Ones(2, 2), 0.5).penalty == 4.0);
  CHECK_THROWS_AS(nn::orthogonal_regularizer(Eigen::MatrixXd::Ones(2, 2), -1.0), Error);
}

TEST_CASE("spectral normalisation") {
  std::mt19937_64 rng(13);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = 1.0;
  nn::SpectralState st = nn::spectral_state(2, rng);
  Eigen::MatrixXd wn;
  for (int i = 0; i < 20; ++i) wn = nn::spectral_normalize(d, st);
  CHECK(std::abs(wn(0, 0) - 1.0) <= 1e-3);
  CHECK(std::abs(wn(1, 1) - 1.0 / 3.0) <= 1e-3);
  CHECK(std::abs(wn(0, 1)) <= 1e-3);

  const Eigen::MatrixXd q = nn::orthogonal_init(7, 7, 1.0, rng);
  nn::SpectralState sq = nn::spectral_state(7, rng);
  for (int i = 0; i < 20; ++i) wn = nn::spectral_normalize(q, sq);
  CHECK((wn - q).cwiseAbs().maxCoeff() <= 1e-3);

  // Random matrices can have nearly equal leading singular values, which
  // slows power iteration; the warm-up is long enough for the 16x16 draws.
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd w = test::random_matrix(16, 16, rng);
    nn::SpectralState s = nn::spectral_state(16, rng);
    for (int i = 0; i < 500; ++i) wn = nn::spectral_normalize(w, s);
    const double smax = test::jacobi_singular_values(wn)[0];
    CHECK(smax >= 0.999);
    CHECK(smax <= 1.001);
  }
  nn::SpectralState z = nn::spectral_state(3, rng);
  CHECK_THROWS_AS(nn::spectral_normalize(Eigen::MatrixXd::Zero(3, 3), z), Error);
}

TEST_CASE("adam") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(1, 1), g = Eigen::MatrixXd::Ones(1, 1);
  nn::AdamMoments st;
  const nn::AdamHyper h{2e-4, 0.0, 0.9, 1e-8};
  nn::adam_step(p, g, st, 1, h);
  CHECK(st.m(0, 0) == 1.0);
  CHECK(st.v(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(p(0, 0) == doctest::Approx(-2e-4 / (1.0 + 1e-8)).epsilon(1e-12));

  Eigen::MatrixXd q = Eigen::MatrixXd::Constant(2, 2, 0.3);
  nn::AdamMoments s2;
  nn::adam_step(q, Eigen::MatrixXd::Zero(2, 2), s2, 1, h);
  CHECK(q == Eigen::MatrixXd::Constant(2, 2, 0.3));

  // f = theta^2 from 1: compare against a scalar recurrence.
  Eigen::MatrixXd th = Eigen::MatrixXd::Ones(1, 1);
  nn::AdamMoments s3;
  const nn::AdamHyper h3{1e-2, 0.0, 0.9, 1e-8};
  double t_ref = 1.0, v_ref = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const double grad = 2.0 * t_ref;
    v_ref = 0.9 * v_ref + 0.1 * grad * grad;
    t_ref -= 1e-2 * grad / (std::sqrt(v_ref / (1.0 - std::pow(0.9, t))) + 1e-8);
    nn::adam_step(th, 2.0 * th, s3, t, h3);
  }
  CHECK(std::abs(th(0, 0)) < 1.0);
  CHECK(th(0, 0) == doctest::Approx(t_ref).epsilon(1e-12));
  CHECK_THROWS_AS(nn::adam_step(th, Eigen::MatrixXd::Ones(2, 1), s3, 101, h3), Error);
}

TEST_CASE("tensor validation") {
  CHECK_NOTHROW(nn::Tensor({2, 3}, Eigen::VectorXd::Zero(6)));
  CHECK_THROWS_AS(nn::Tensor({2, 3}, Eigen::VectorXd::Zero(5)), Error);
  Eigen::VectorXd bad = Eigen::VectorXd::Zero(2);
  bad[1] = std::nan("");
  CHECK_THROWS_AS(nn::Tensor({2}, bad), Error);
}
