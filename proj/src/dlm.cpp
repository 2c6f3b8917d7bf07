#include "mvdlm/dlm.hpp"

#include <cmath>
#include <string>

#include "mvdlm/errors.hpp"

namespace mvdlm {

namespace {
constexpr double kForecastFloor = 1e-12;

void symmetrize(Eigen::MatrixXd& a) { a = 0.5 * (a + a.transpose()).eval(); }
}  // namespace

void ModelConfig::validate() const {
  if (beta.size() == 0) throw ParameterError("config: beta is empty");
  for (Eigen::Index i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0) || beta[i] > 1.0)
      throw ParameterError("config: discount factors must lie in (0, 1]");
  }
  if (!(v_scale > 0.0)) throw ParameterError("config: v_scale must be > 0");
  if (!(prior_c_scale > 0.0))
    throw ParameterError("config: prior_c_scale must be > 0");
  if (!(prior_n > 0.0)) throw ParameterError("config: prior_n must be > 0");
  if (burn_in < 1) throw ParameterError("config: burn_in must be >= 1");
}

double ModelConfig::beta_at(Eigen::Index i) const {
  if (beta.size() == 1) return beta[0];
  return beta[i];
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> discount_covariance(
    const Eigen::MatrixXd& c, const Eigen::VectorXd& beta) {
  const auto p = c.rows();
  if (beta.size() != p && beta.size() != 1)
    throw ParameterError("discount_covariance: beta size mismatch");
  Eigen::VectorXd b(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    const double bi = beta.size() == 1 ? beta[0] : beta[i];
    if (!(bi > 0.0))
      throw ParameterError("discount_covariance: non-positive discount factor");
    b[i] = 1.0 / std::sqrt(bi);
  }
  Eigen::MatrixXd r = b.asDiagonal() * c * b.asDiagonal();
  symmetrize(r);
  return {r - c, r};
}

PosteriorState initial_state(const ModelConfig& cfg, Eigen::Index p,
                             Eigen::Index q) {
  PosteriorState st;
  st.m = cfg.prior_m.size() > 0 ? cfg.prior_m : Eigen::MatrixXd::Zero(p, q);
  if (st.m.rows() != p || st.m.cols() != q)
    throw ParameterError("config: prior_m shape mismatch");
  st.c = cfg.prior_c_scale * Eigen::MatrixXd::Identity(p, p);
  st.s = cfg.prior_s.size() > 0 ? cfg.prior_s
                                : Eigen::MatrixXd::Identity(q, q);
  if (st.s.rows() != q || st.s.cols() != q)
    throw ParameterError("config: prior_s shape mismatch");
  st.n = cfg.prior_n;
  return st;
}

std::pair<PosteriorState, FilterStepDetail> filter_step(
    const PosteriorState& state, const Eigen::RowVectorXd& y,
    const Eigen::RowVectorXd& f_row, const ModelConfig& cfg) {
  if (!y.allFinite() || !f_row.allFinite())
    throw DataError("filter_step: non-finite input");
  const auto p = state.m.rows();
  const auto q = state.m.cols();
  if (y.size() != q || f_row.size() != p)
    throw ParameterError("filter_step: shape mismatch");

  FilterStepDetail d;
  auto [w, r] = discount_covariance(state.c, cfg.beta);
  d.w = std::move(w);
  d.r = std::move(r);

  d.q_scale = cfg.v_scale + (f_row * d.r * f_row.transpose()).value();
  if (d.q_scale <= kForecastFloor)
    throw NumericalError("filter_step: degenerate forecast scale");
  d.gain = d.r * f_row.transpose() / d.q_scale;
  d.forecast = f_row * state.m;
  d.error = y - d.forecast;

  PosteriorState next;
  next.m = state.m + d.gain * d.error;
  next.c = d.r - d.gain * d.gain.transpose() * d.q_scale;
  symmetrize(next.c);
  next.n = state.n + 1.0;
  next.s = (state.n * state.s +
            d.error.transpose() * d.error / d.q_scale) / next.n;
  symmetrize(next.s);
  return {std::move(next), std::move(d)};
}

PosteriorSequence run_filter(const Eigen::MatrixXd& series,
                             const Eigen::MatrixXd& design,
                             const ModelConfig& cfg) {
  cfg.validate();
  const auto t_len = series.rows();
  if (design.rows() != t_len)
    throw ParameterError("run_filter: series/design length mismatch");
  const auto p = design.cols();
  const auto q = series.cols();

  PosteriorSequence seq;
  seq.prior = initial_state(cfg, p, q);
  seq.states.reserve(t_len);
  seq.details.reserve(t_len);
  const PosteriorState* cur = &seq.prior;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    try {
      auto [next, detail] = filter_step(*cur, series.row(t), design.row(t), cfg);
      seq.states.push_back(std::move(next));
      seq.details.push_back(std::move(detail));
    } catch (const std::exception& e) {
      throw DataError("run_filter: step t=" + std::to_string(t + 1) + ": " +
                      e.what());
    }
    cur = &seq.states.back();
  }
  return seq;
}

}  // namespace mvdlm
