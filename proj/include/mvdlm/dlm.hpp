#pragma once

#include <Eigen/Dense>
#include <utility>
#include <vector>

namespace mvdlm {

/// Conjugate hyperparameters {m, C, S, n} of the matrix normal /
/// inverse Wishart posterior at one time.
struct PosteriorState {
  Eigen::MatrixXd m;  // p x q location
  Eigen::MatrixXd c;  // p x p left scale
  Eigen::MatrixXd s;  // q x q right scale (cross-sectional covariance estimate)
  double n = 0.0;     // degrees of freedom
};

/// Auxiliary quantities of one filter update.
struct FilterStepDetail {
  Eigen::RowVectorXd forecast;  // 1 x q one-step forecast mean
  Eigen::RowVectorXd error;     // 1 x q forecast error
  double q_scale = 0.0;         // forecast scale
  Eigen::VectorXd gain;         // p x 1 adaptive gain
  Eigen::MatrixXd r;            // p x p prior-at-t left scale
  Eigen::MatrixXd w;            // p x p system variance (discount-implied)
};

struct ModelConfig {
  Eigen::VectorXd beta;        // p discount factors in (0, 1]
  double v_scale = 1.0;        // observational scale, constant over time
  Eigen::MatrixXd prior_m;     // p x q; empty means zeros
  double prior_c_scale = 100.0;
  Eigen::MatrixXd prior_s;     // q x q; empty means identity
  double prior_n = 1.0;
  int burn_in = 30;            // first retained time index (1-based)

  void validate() const;
  // Discount factor for row i; a scalar beta broadcasts over rows.
  double beta_at(Eigen::Index i) const;
};

struct PosteriorSequence {
  PosteriorState prior;                  // state at t = 0
  std::vector<PosteriorState> states;    // t = 1..T
  std::vector<FilterStepDetail> details; // t = 1..T
  int size() const { return static_cast<int>(states.size()); }
};

/// Discount-factor system variance: R = B C B with B = diag(1/sqrt(beta_i)),
/// W = R - C.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> discount_covariance(
    const Eigen::MatrixXd& c, const Eigen::VectorXd& beta);

PosteriorState initial_state(const ModelConfig& cfg, Eigen::Index p,
                             Eigen::Index q);

/// One conjugate update. `y` is the 1 x q observation row, `f_row` the
/// 1 x p regressor row.
std::pair<PosteriorState, FilterStepDetail> filter_step(
    const PosteriorState& state, const Eigen::RowVectorXd& y,
    const Eigen::RowVectorXd& f_row, const ModelConfig& cfg);

/// Sequential filter over a T x q series with a T x p design. Deterministic.
PosteriorSequence run_filter(const Eigen::MatrixXd& series,
                             const Eigen::MatrixXd& design,
                             const ModelConfig& cfg);

}  // namespace mvdlm
