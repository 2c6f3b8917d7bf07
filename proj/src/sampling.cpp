#include "mvdlm/sampling.hpp"

#include <cmath>

#include "mvdlm/errors.hpp"

namespace mvdlm {

Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& a) {
  const auto dim = a.rows();
  if (dim != a.cols()) throw ParameterError("cholesky: matrix not square");
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() == Eigen::Success) return llt.matrixL();

  double jitter = 1e-10 * a.trace() / static_cast<double>(dim);
  if (jitter <= 0.0) jitter = 1e-10;
  for (int attempt = 0; attempt < 3; ++attempt) {
    Eigen::MatrixXd aj = a;
    aj.diagonal().array() += jitter;
    llt.compute(aj);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    jitter *= 10.0;
  }
  throw NumericalError("cholesky factorization failed after jitter retries");
}

Eigen::MatrixXd sample_matrix_normal(const Eigen::MatrixXd& mean,
                                     const Eigen::MatrixXd& left,
                                     const Eigen::MatrixXd& right, Rng& rng) {
  const auto p = mean.rows();
  const auto q = mean.cols();
  if (left.rows() != p || right.rows() != q)
    throw ParameterError("sample_matrix_normal: shape mismatch");
  const Eigen::MatrixXd lu = robust_cholesky(left);
  const Eigen::MatrixXd lv = robust_cholesky(right);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd z(p, q);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < q; ++j) z(i, j) = gauss(rng);
  return mean + lu * z * lv.transpose();
}

InverseWishartSampler::InverseWishartSampler(double n,
                                             const Eigen::MatrixXd& scale) {
  const auto q = scale.rows();
  if (n <= 0.0) throw ParameterError("inverse_wishart: n must be positive");
  if (scale.rows() != scale.cols())
    throw ParameterError("inverse_wishart: scale not square");
  dof_ = n + static_cast<double>(q) - 1.0;
  // (n*S)^-1 via the factor of n*S
  const Eigen::MatrixXd chol_psi = robust_cholesky(n * scale);
  const Eigen::MatrixXd psi_inv =
      chol_psi.transpose().triangularView<Eigen::Upper>().solve(
          Eigen::MatrixXd(chol_psi.triangularView<Eigen::Lower>().solve(
              Eigen::MatrixXd::Identity(q, q))));
  chol_psi_inv_ = robust_cholesky(0.5 * (psi_inv + psi_inv.transpose()));
}

Eigen::MatrixXd InverseWishartSampler::draw(Rng& rng) const {
  // Bartlett: W = (L A)(L A)' ~ Wishart(dof, Psi^-1), return W^-1.
  const auto q = chol_psi_inv_.rows();
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    std::chi_squared_distribution<double> chi2(dof_ - static_cast<double>(i));
    a(i, i) = std::sqrt(chi2(rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = gauss(rng);
  }
  const Eigen::MatrixXd la = chol_psi_inv_ * a;
  const Eigen::MatrixXd la_inv =
      la.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(q, q));
  Eigen::MatrixXd sigma = la_inv.transpose() * la_inv;
  return 0.5 * (sigma + sigma.transpose());
}

Eigen::MatrixXd sample_inverse_wishart(double n, const Eigen::MatrixXd& scale,
                                       Rng& rng) {
  return InverseWishartSampler(n, scale).draw(rng);
}

}  // namespace mvdlm
