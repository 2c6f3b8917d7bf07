#pragma once

#include <Eigen/Dense>

#include "mvdlm/rng.hpp"

namespace mvdlm {

/// Lower Cholesky factor with jitter fallback: on failure add
/// 1e-10*trace/dim to the diagonal and retry up to 3 times with 10x
/// escalation. Throws NumericalError if still not factorizable.
Eigen::MatrixXd robust_cholesky(const Eigen::MatrixXd& a);

/// Draw X = M + L_U Z L_V' with Z i.i.d. standard normal. The vectorized
/// covariance of X - M is kron(V, U).
Eigen::MatrixXd sample_matrix_normal(const Eigen::MatrixXd& mean,
                                     const Eigen::MatrixXd& left,
                                     const Eigen::MatrixXd& right, Rng& rng);

/// Inverse Wishart draw parameterized so that draws concentrate on `scale`
/// as n grows: scale matrix n*scale, degrees of freedom n + q - 1. The
/// closed-form mean is n*scale / (n - 2) for n > 2.
Eigen::MatrixXd sample_inverse_wishart(double n, const Eigen::MatrixXd& scale,
                                       Rng& rng);

/// Precomputed inverse-Wishart sampler for repeated draws with fixed (n, S).
class InverseWishartSampler {
 public:
  InverseWishartSampler(double n, const Eigen::MatrixXd& scale);
  Eigen::MatrixXd draw(Rng& rng) const;

 private:
  double dof_;                     // n + q - 1
  Eigen::MatrixXd chol_psi_inv_;   // lower factor of (n*S)^-1
};

}  // namespace mvdlm
