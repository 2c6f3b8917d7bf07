#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mvdlm/errors.hpp"
#include "mvdlm/rng.hpp"
#include "mvdlm/sampling.hpp"

using namespace mvdlm;

TEST_CASE("cholesky of the identity is the identity") {
  const Eigen::MatrixXd l = robust_cholesky(Eigen::MatrixXd::Identity(4, 4));
  CHECK((l - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("cholesky factor reconstructs the input") {
  Rng rng = make_rng(3);
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd a(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) a(i, j) = gauss(rng);
  const Eigen::MatrixXd spd =
      a * a.transpose() + Eigen::MatrixXd::Identity(5, 5);
  const Eigen::MatrixXd l = robust_cholesky(spd);
  CHECK((l * l.transpose() - spd).cwiseAbs().maxCoeff() < 1e-10);
  // lower triangular
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) CHECK(l(i, j) == 0.0);
}

TEST_CASE("near-singular matrices factor through the jitter ladder") {
  // rank-1 plus a tiny negative leak on the complement
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 1.0, 1.0, 1.0 - 1e-14;
  const Eigen::MatrixXd l = robust_cholesky(a);
  CHECK((l * l.transpose() - a).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("clearly indefinite input is a numerical error") {
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(robust_cholesky(a), NumericalError);
}

TEST_CASE("matrix normal draws have the product covariance") {
  const int n_draws = 50000;
  Eigen::MatrixXd mean(2, 3);
  mean << 1, 2, 3, 4, 5, 6;
  Eigen::MatrixXd u(2, 2), v(3, 3);
  u << 2.0, 0.6, 0.6, 1.0;
  v << 1.0, 0.3, 0.0, 0.3, 2.0, 0.5, 0.0, 0.5, 1.5;

  Rng rng = make_rng(17);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, 3);
  Eigen::MatrixXd sum_sq = Eigen::MatrixXd::Zero(2, 3);
  double cross_rows = 0.0;  // Cov(X_00, X_10) = U_01 V_00
  double cross_cols = 0.0;  // Cov(X_00, X_01) = U_00 V_01
  for (int k = 0; k < n_draws; ++k) {
    const Eigen::MatrixXd x = sample_matrix_normal(mean, u, v, rng);
    sum += x;
    sum_sq += (x - mean).cwiseProduct(x - mean);
    cross_rows += (x(0, 0) - mean(0, 0)) * (x(1, 0) - mean(1, 0));
    cross_cols += (x(0, 0) - mean(0, 0)) * (x(0, 1) - mean(0, 1));
  }
  const Eigen::MatrixXd avg = sum / n_draws;
  CHECK((avg - mean).cwiseAbs().maxCoeff() < 0.05);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) {
      const double expected = u(i, i) * v(j, j);
      CHECK(sum_sq(i, j) / n_draws ==
            doctest::Approx(expected).epsilon(0.05));
    }
  CHECK(cross_rows / n_draws ==
        doctest::Approx(u(0, 1) * v(0, 0)).epsilon(0.10));
  CHECK(cross_cols / n_draws ==
        doctest::Approx(u(0, 0) * v(0, 1)).epsilon(0.10));
}

TEST_CASE("zero right scale collapses the draw to its mean") {
  // the factorization jitter leaves at most ~1e-4 of residual spread
  Rng rng = make_rng(5);
  Eigen::MatrixXd mean = Eigen::MatrixXd::Constant(2, 2, 3.0);
  const Eigen::MatrixXd x = sample_matrix_normal(
      mean, Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 2), rng);
  CHECK((x - mean).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("univariate inverse Wishart matches the inverse gamma transform") {
  // For q = 1 a draw is n*s / chi2_n. Verify mean and variance against the
  // closed-form inverse-gamma moments.
  const double n = 12.0, s = 2.5;
  const int n_draws = 200000;
  Rng rng = make_rng(29);
  double sum = 0.0, sum_sq = 0.0;
  Eigen::MatrixXd scale(1, 1);
  scale << s;
  for (int k = 0; k < n_draws; ++k) {
    const double x = sample_inverse_wishart(n, scale, rng)(0, 0);
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / n_draws;
  const double var = sum_sq / n_draws - mean * mean;
  const double mean_exact = n * s / (n - 2.0);
  const double var_exact = 2.0 * (n * s) * (n * s) /
                           ((n - 2.0) * (n - 2.0) * (n - 4.0));
  CHECK(mean == doctest::Approx(mean_exact).epsilon(0.02));
  CHECK(var == doctest::Approx(var_exact).epsilon(0.05));
}

TEST_CASE("inverse Wishart mean matches the closed form for q = 2") {
  const double n = 10.0;
  Eigen::MatrixXd scale(2, 2);
  scale << 2.0, 0.7, 0.7, 1.5;
  const int n_draws = 100000;
  Rng rng = make_rng(31);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(2, 2);
  for (int k = 0; k < n_draws; ++k)
    sum += sample_inverse_wishart(n, scale, rng);
  const Eigen::MatrixXd avg = sum / n_draws;
  const Eigen::MatrixXd exact = n * scale / (n - 2.0);
  CHECK((avg - exact).cwiseAbs().maxCoeff() < 0.05 * exact(0, 0));
  CHECK(std::abs(avg(0, 1) - avg(1, 0)) < 1e-12);  // symmetric draws
}

TEST_CASE("inverse Wishart concentrates on the scale for large n") {
  Eigen::MatrixXd scale(2, 2);
  scale << 1.0, 0.2, 0.2, 2.0;
  Rng rng = make_rng(37);
  const Eigen::MatrixXd x = sample_inverse_wishart(1e6, scale, rng);
  CHECK((x - scale).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("precomputed sampler agrees with the one-shot interface") {
  const double n = 8.0;
  Eigen::MatrixXd scale(3, 3);
  scale << 2.0, 0.4, 0.1, 0.4, 1.0, 0.2, 0.1, 0.2, 1.5;
  InverseWishartSampler sampler(n, scale);
  Rng rng_a = make_rng(41), rng_b = make_rng(41);
  for (int k = 0; k < 10; ++k) {
    const Eigen::MatrixXd a = sampler.draw(rng_a);
    const Eigen::MatrixXd b = sample_inverse_wishart(n, scale, rng_b);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("invalid inverse Wishart parameters are rejected") {
  Eigen::MatrixXd scale = Eigen::MatrixXd::Identity(2, 2);
  Rng rng = make_rng(1);
  CHECK_THROWS_AS(sample_inverse_wishart(0.0, scale, rng), ParameterError);
  CHECK_THROWS_AS(sample_inverse_wishart(-3.0, scale, rng), ParameterError);
}
