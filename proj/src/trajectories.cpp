#include "mvdlm/trajectories.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <thread>

#include "mvdlm/errors.hpp"
#include "mvdlm/sampling.hpp"

namespace mvdlm {

std::string to_string(EffectKind kind) {
  switch (kind) {
    case EffectKind::Marginal: return "marginal";
    case EffectKind::AverageCluster: return "average";
    case EffectKind::Joint: return "joint";
  }
  return "?";
}

std::string to_string(Algorithm algo) {
  switch (algo) {
    case Algorithm::Fest: return "fest";
    case Algorithm::Fsts: return "fsts";
    case Algorithm::Ffbs: return "ffbs";
  }
  return "?";
}

EffectKind effect_kind_from_string(const std::string& name) {
  if (name == "marginal") return EffectKind::Marginal;
  if (name == "average") return EffectKind::AverageCluster;
  if (name == "joint") return EffectKind::Joint;
  throw ParameterError("unknown effect kind: " + name);
}

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "fest") return Algorithm::Fest;
  if (name == "fsts") return Algorithm::Fsts;
  if (name == "ffbs") return Algorithm::Ffbs;
  throw ParameterError("unknown algorithm: " + name);
}

namespace {

// Lower factor that tolerates an exactly-zero matrix (discount factor 1).
Eigen::MatrixXd chol_or_zero(const Eigen::MatrixXd& a) {
  if (a.cwiseAbs().maxCoeff() == 0.0)
    return Eigen::MatrixXd::Zero(a.rows(), a.cols());
  return robust_cholesky(a);
}

const PosteriorState& state_at(const PosteriorSequence& seq, int t) {
  // t is 1-based; t = 0 is the prior.
  return t == 0 ? seq.prior : seq.states[static_cast<std::size_t>(t - 1)];
}

double kind_noise_scalar(const Eigen::MatrixXd& s, EffectKind kind) {
  if (kind == EffectKind::Marginal) return s(0, 0);
  const double q = static_cast<double>(s.rows());
  return s.sum() / (q * q);
}

void fill_gauss(Eigen::MatrixXd& z, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = gauss(rng);
}

void fill_gauss(Eigen::VectorXd& z, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = gauss(rng);
}

// Row l of the state matrix projected per kind.
Eigen::VectorXd project_row(const Eigen::MatrixXd& theta, int task,
                            EffectKind kind) {
  switch (kind) {
    case EffectKind::Marginal:
      return Eigen::VectorXd::Constant(1, theta(task, 0));
    case EffectKind::AverageCluster:
      return Eigen::VectorXd::Constant(1, theta.row(task).mean());
    case EffectKind::Joint:
      return theta.row(task).transpose();
  }
  throw ParameterError("bad effect kind");
}

// The column weights behind a scalar effect: e1 for the marginal (and the
// joint law when q is one), the uniform average for cluster means.
Eigen::VectorXd projection_vector(int q, EffectKind kind) {
  if (kind == EffectKind::AverageCluster)
    return Eigen::VectorXd::Constant(q, 1.0 / q);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(q);
  v[0] = 1.0;
  return v;
}

}  // namespace

EffectDistribution effect_projection(const PosteriorState& state, int task,
                                     EffectKind kind) {
  const auto p = state.m.rows();
  const auto q = state.m.cols();
  if (task < 0 || task >= p)
    throw ParameterError("effect_projection: task index out of range");

  EffectDistribution dist;
  dist.kind = kind;
  dist.task = task;
  const double cll = state.c(task, task);
  switch (kind) {
    case EffectKind::Marginal:
      dist.mean = Eigen::VectorXd::Constant(1, state.m(task, 0));
      dist.scale = Eigen::MatrixXd::Constant(1, 1, cll * state.s(0, 0));
      break;
    case EffectKind::AverageCluster: {
      const double qd = static_cast<double>(q);
      dist.mean = Eigen::VectorXd::Constant(1, state.m.row(task).mean());
      dist.scale =
          Eigen::MatrixXd::Constant(1, 1, cll * state.s.sum() / (qd * qd));
      break;
    }
    case EffectKind::Joint:
      dist.mean = state.m.row(task).transpose();
      dist.scale = cll * state.s;
      break;
  }
  return dist;
}

std::vector<Eigen::MatrixXd> TrajectorySampler::make_buffer() const {
  return std::vector<Eigen::MatrixXd>(
      static_cast<std::size_t>(p_), Eigen::MatrixXd::Zero(retained_, dim_));
}

namespace {

// ---------------------------------------------------------------------------
// FEST: draw effects and noise from the posteriors, synthesize data,
// re-filter it with the same configuration, keep the filtered means.

class FestSampler final : public TrajectorySampler {
 public:
  FestSampler(const PosteriorSequence& posteriors, const DesignMatrix& design,
              const ModelConfig& cfg, EffectKind kind)
      : cfg_(cfg), kind_(kind), design_(design.values) {
    t_len_ = posteriors.size();
    if (design_.rows() != t_len_)
      throw ParameterError("fest: design/posterior length mismatch");
    p_ = static_cast<int>(design_.cols());
    const int q = static_cast<int>(posteriors.states.front().m.cols());
    dim_ = kind == EffectKind::Joint ? q : 1;
    retained_ = t_len_ - cfg.burn_in + 1;
    if (retained_ < 1) throw ParameterError("fest: burn_in exceeds T");

    effect_mean_.resize(t_len_);
    effect_chol_.resize(t_len_);
    noise_chol_.resize(t_len_);
    for (int t = 0; t < t_len_; ++t) {
      const PosteriorState& st = posteriors.states[t];
      effect_mean_[t].resize(p_);
      effect_chol_[t].resize(p_);
      for (int l = 0; l < p_; ++l) {
        EffectDistribution d = effect_projection(st, l, kind);
        effect_mean_[t][l] = std::move(d.mean);
        effect_chol_[t][l] = chol_or_zero(d.scale);
      }
      if (kind == EffectKind::Joint) {
        noise_chol_[t] = chol_or_zero(st.s);
      } else {
        noise_chol_[t] = Eigen::MatrixXd::Constant(
            1, 1, std::sqrt(std::max(kind_noise_scalar(st.s, kind), 0.0)));
      }
    }

    synth_.resize(t_len_, dim_);
    m_.resize(p_, dim_);
    c_.resize(p_, p_);
    y_.resize(dim_);
    z_.resize(dim_);
    inv_sqrt_beta_.resize(p_);
    for (int i = 0; i < p_; ++i)
      inv_sqrt_beta_[i] = 1.0 / std::sqrt(cfg.beta_at(i));
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    if (p_ == 1 && dim_ == 1) {
      draw_scalar(rng, out);
      return;
    }
    // synthesize
    for (int t = 0; t < t_len_; ++t) {
      y_.setZero();
      for (int l = 0; l < p_; ++l) {
        fill_gauss(z_, rng);
        y_.noalias() += (effect_mean_[t][l] + effect_chol_[t][l] * z_) *
                        design_(t, l);
      }
      fill_gauss(z_, rng);
      y_.noalias() += noise_chol_[t] * z_;
      synth_.row(t) = y_.transpose();
    }
    // re-filter; only the location recursion is needed
    m_.setZero();
    c_ = cfg_.prior_c_scale * Eigen::MatrixXd::Identity(p_, p_);
    for (int t = 0; t < t_len_; ++t) {
      const Eigen::MatrixXd r =
          inv_sqrt_beta_.asDiagonal() * c_ * inv_sqrt_beta_.asDiagonal();
      const Eigen::RowVectorXd f = design_.row(t);
      const double qs = cfg_.v_scale + (f * r * f.transpose()).value();
      const Eigen::VectorXd gain = r * f.transpose() / qs;
      const Eigen::RowVectorXd err = synth_.row(t) - f * m_;
      m_ += gain * err;
      c_ = r - gain * gain.transpose() * qs;
      c_ = 0.5 * (c_ + c_.transpose()).eval();
      const int rt = t + 1 - cfg_.burn_in;  // retained row
      if (rt >= 0)
        for (int l = 0; l < p_; ++l) out[l].row(rt) = m_.row(l);
    }
  }

 private:
  // Same draws and recursion as above with every quantity a scalar; this is
  // the per-voxel hot path, so it avoids Eigen temporaries entirely.
  void draw_scalar(Rng& rng, std::vector<Eigen::MatrixXd>& out) {
    if (zall_.size() == 0) zall_.resize(2 * t_len_);
    fill_gauss(zall_, rng);
    const double inv_beta = inv_sqrt_beta_[0] * inv_sqrt_beta_[0];
    double m = 0.0;
    double c = cfg_.prior_c_scale;
    Eigen::MatrixXd& dst = out[0];
    for (int t = 0; t < t_len_; ++t) {
      const double x = design_(t, 0);
      double y =
          (effect_mean_[t][0][0] + effect_chol_[t][0](0, 0) * zall_[2 * t]) * x;
      y += noise_chol_[t](0, 0) * zall_[2 * t + 1];

      const double r = c * inv_beta;
      const double qs = cfg_.v_scale + x * x * r;
      const double gain = r * x / qs;
      m += gain * (y - x * m);
      c = r - gain * gain * qs;
      const int rt = t + 1 - cfg_.burn_in;
      if (rt >= 0) dst(rt, 0) = m;
    }
  }

 public:

 private:
  ModelConfig cfg_;
  EffectKind kind_;
  Eigen::MatrixXd design_;
  int t_len_ = 0;
  std::vector<std::vector<Eigen::VectorXd>> effect_mean_;
  std::vector<std::vector<Eigen::MatrixXd>> effect_chol_;
  std::vector<Eigen::MatrixXd> noise_chol_;
  Eigen::MatrixXd synth_, m_, c_;
  Eigen::VectorXd y_, z_, zall_, inv_sqrt_beta_;
};

// ---------------------------------------------------------------------------
// FSTS: at every retained time, an independent posterior draw at t-1
// propagated one evolution step with a sampled innovation.

class FstsSampler final : public TrajectorySampler {
 public:
  FstsSampler(const PosteriorSequence& posteriors, const ModelConfig& cfg,
              EffectKind kind)
      : kind_(kind) {
    const int t_len = posteriors.size();
    p_ = static_cast<int>(posteriors.states.front().m.rows());
    q_ = static_cast<int>(posteriors.states.front().m.cols());
    dim_ = kind == EffectKind::Joint ? q_ : 1;
    retained_ = t_len - cfg.burn_in + 1;
    if (retained_ < 1) throw ParameterError("fsts: burn_in exceeds T");

    Eigen::VectorXd beta(p_);
    for (int i = 0; i < p_; ++i) beta[i] = cfg.beta_at(i);

    prev_mean_.reserve(retained_);
    prev_chol_c_.reserve(retained_);
    prev_chol_s_.reserve(retained_);
    innov_chol_w_.reserve(retained_);
    innov_chol_s_.reserve(retained_);
    for (int t = cfg.burn_in; t <= t_len; ++t) {
      const PosteriorState& prev = state_at(posteriors, t - 1);
      const PosteriorState& cur = state_at(posteriors, t);
      prev_mean_.push_back(prev.m);
      prev_chol_c_.push_back(chol_or_zero(prev.c));
      prev_chol_s_.push_back(chol_or_zero(prev.s));
      auto [w, r] = discount_covariance(prev.c, beta);
      (void)r;
      innov_chol_w_.push_back(chol_or_zero(w));
      innov_chol_s_.push_back(chol_or_zero(cur.s));
    }
    z_.resize(p_, q_);
    theta_.resize(p_, q_);
    cross_.resize(p_, q_);

    if (dim_ == 1) {
      // A scalar projection v'theta only sees the column-space draw through
      // v' S v, so a length-p draw scaled by ||chol(S)' v|| has the same law
      // as the full p x q fill. Precompute the projections once.
      const Eigen::VectorXd v = projection_vector(q_, kind_);
      proj_mean_.reserve(retained_);
      prev_scale_.reserve(retained_);
      innov_scale_.reserve(retained_);
      for (int rt = 0; rt < retained_; ++rt) {
        proj_mean_.push_back(prev_mean_[rt] * v);
        prev_scale_.push_back((prev_chol_s_[rt].transpose() * v).norm());
        innov_scale_.push_back((innov_chol_s_[rt].transpose() * v).norm());
      }
      zall_.resize(2 * p_ * retained_);
      zeta1_.resize(p_);
      zeta2_.resize(p_);
    }
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    if (dim_ == 1) {
      fill_gauss(zall_, rng);
      Eigen::Index idx = 0;
      for (int rt = 0; rt < retained_; ++rt) {
        for (int l = 0; l < p_; ++l) zeta1_[l] = zall_[idx++] * prev_scale_[rt];
        for (int l = 0; l < p_; ++l)
          zeta2_[l] = zall_[idx++] * innov_scale_[rt];
        for (int l = 0; l < p_; ++l)
          out[l](rt, 0) = proj_mean_[rt][l] +
                          prev_chol_c_[rt].row(l).dot(zeta1_) +
                          innov_chol_w_[rt].row(l).dot(zeta2_);
      }
      return;
    }
    for (int rt = 0; rt < retained_; ++rt) {
      fill_gauss(z_, rng);
      cross_.noalias() = z_ * prev_chol_s_[rt].transpose();
      theta_ = prev_mean_[rt];
      theta_.noalias() += prev_chol_c_[rt] * cross_;
      fill_gauss(z_, rng);
      cross_.noalias() = z_ * innov_chol_s_[rt].transpose();
      theta_.noalias() += innov_chol_w_[rt] * cross_;
      for (int l = 0; l < p_; ++l)
        out[l].row(rt) = project_row(theta_, l, kind_).transpose();
    }
  }

 private:
  EffectKind kind_;
  int q_ = 0;
  std::vector<Eigen::MatrixXd> prev_mean_, prev_chol_c_, prev_chol_s_;
  std::vector<Eigen::MatrixXd> innov_chol_w_, innov_chol_s_;
  Eigen::MatrixXd z_, theta_, cross_;
  std::vector<Eigen::VectorXd> proj_mean_;
  std::vector<double> prev_scale_, innov_scale_;
  Eigen::VectorXd zall_, zeta1_, zeta2_;
};

// ---------------------------------------------------------------------------
// FFBS: joint state path drawn backward from the final posterior, with the
// cross-sectional covariance drawn once per path.

class FfbsSampler final : public TrajectorySampler {
 public:
  FfbsSampler(const PosteriorSequence& posteriors, const ModelConfig& cfg,
              EffectKind kind, const Eigen::MatrixXd* fixed_sigma)
      : kind_(kind) {
    const int t_len = posteriors.size();
    p_ = static_cast<int>(posteriors.states.front().m.rows());
    q_ = static_cast<int>(posteriors.states.front().m.cols());
    dim_ = kind == EffectKind::Joint ? q_ : 1;
    retained_ = t_len - cfg.burn_in + 1;
    if (retained_ < 1) throw ParameterError("ffbs: burn_in exceeds T");
    burn_in_ = cfg.burn_in;

    const PosteriorState& last = posteriors.states.back();
    if (fixed_sigma) {
      fixed_sigma_chol_ = chol_or_zero(*fixed_sigma);
      has_fixed_sigma_ = true;
    } else {
      iw_.emplace(last.n, last.s);
    }
    final_mean_ = last.m;
    final_chol_c_ = chol_or_zero(last.c);

    Eigen::VectorXd inv_b(p_);
    for (int i = 0; i < p_; ++i) inv_b[i] = std::sqrt(cfg.beta_at(i));

    // backward coefficients for t = T-1 down to burn_in
    mean_.reserve(retained_ - 1);
    gain_.reserve(retained_ - 1);
    chol_cstar_.reserve(retained_ - 1);
    for (int t = t_len - 1; t >= burn_in_; --t) {
      const PosteriorState& st = state_at(posteriors, t);
      // K = C (B C B)^-1 = inv(B) inv(BCB) ... computed via solves on BCB
      Eigen::MatrixXd bcb =
          inv_b.cwiseInverse().asDiagonal() * st.c *
          inv_b.cwiseInverse().asDiagonal();
      Eigen::MatrixXd k;
      if (bcb.cwiseAbs().maxCoeff() == 0.0) {
        k = Eigen::MatrixXd::Identity(p_, p_);
      } else {
        const Eigen::MatrixXd l = robust_cholesky(bcb);
        // K' = (BCB)^-1 C
        Eigen::MatrixXd kt = l.triangularView<Eigen::Lower>().solve(st.c);
        kt = l.transpose().triangularView<Eigen::Upper>().solve(kt);
        k = kt.transpose();
      }
      Eigen::MatrixXd cstar = st.c - k * st.c;
      cstar = 0.5 * (cstar + cstar.transpose()).eval();
      // clamp tiny negative drift on the diagonal
      for (int i = 0; i < p_; ++i) cstar(i, i) = std::max(cstar(i, i), 0.0);
      mean_.push_back(st.m);
      gain_.push_back(std::move(k));
      chol_cstar_.push_back(chol_or_zero(cstar));
    }
    z_.resize(p_, q_);
    theta_.resize(p_, q_);
    cross_.resize(p_, q_);

    if (dim_ == 1) {
      // the backward recursion is linear in the state, so the scalar
      // projection can be propagated directly; see the forward sampler
      v_ = projection_vector(q_, kind_);
      fmv_ = final_mean_ * v_;
      mv_.reserve(mean_.size());
      for (const Eigen::MatrixXd& m : mean_) mv_.push_back(m * v_);
      zall_.resize(p_ * retained_);
      zeta_.resize(p_);
      pvec_.resize(p_);
      pdiff_.resize(p_);
      wbuf_.resize(q_);
    }
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    const Eigen::MatrixXd& chol_sigma =
        has_fixed_sigma_ ? fixed_sigma_chol_
                         : (sigma_draw_ = chol_or_zero(iw_->draw(rng)));
    if (dim_ == 1) {
      wbuf_.noalias() = chol_sigma.transpose() * v_;
      const double scale = wbuf_.norm();
      fill_gauss(zall_, rng);
      Eigen::Index idx = 0;
      int rt = retained_ - 1;
      for (int l = 0; l < p_; ++l) zeta_[l] = zall_[idx++] * scale;
      pvec_ = fmv_;
      pvec_.noalias() += final_chol_c_ * zeta_;
      for (int l = 0; l < p_; ++l) out[l](rt, 0) = pvec_[l];
      for (std::size_t j = 0; j < mean_.size(); ++j) {
        --rt;
        for (int l = 0; l < p_; ++l) zeta_[l] = zall_[idx++] * scale;
        pdiff_ = pvec_ - mv_[j];
        pvec_ = mv_[j];
        pvec_.noalias() += gain_[j] * pdiff_;
        pvec_.noalias() += chol_cstar_[j] * zeta_;
        for (int l = 0; l < p_; ++l) out[l](rt, 0) = pvec_[l];
      }
      return;
    }
    fill_gauss(z_, rng);
    cross_.noalias() = z_ * chol_sigma.transpose();
    theta_ = final_mean_;
    theta_.noalias() += final_chol_c_ * cross_;
    int rt = retained_ - 1;
    for (int l = 0; l < p_; ++l)
      out[l].row(rt) = project_row(theta_, l, kind_).transpose();
    for (std::size_t j = 0; j < mean_.size(); ++j) {
      --rt;
      fill_gauss(z_, rng);
      cross_.noalias() = z_ * chol_sigma.transpose();
      theta_ = mean_[j] + gain_[j] * (theta_ - mean_[j]);
      theta_.noalias() += chol_cstar_[j] * cross_;
      for (int l = 0; l < p_; ++l)
        out[l].row(rt) = project_row(theta_, l, kind_).transpose();
    }
  }

 private:
  EffectKind kind_;
  int q_ = 0, burn_in_ = 1;
  bool has_fixed_sigma_ = false;
  Eigen::MatrixXd fixed_sigma_chol_, sigma_draw_;
  std::optional<InverseWishartSampler> iw_;
  Eigen::MatrixXd final_mean_, final_chol_c_;
  std::vector<Eigen::MatrixXd> mean_, gain_, chol_cstar_;
  Eigen::MatrixXd z_, theta_, cross_;
  Eigen::VectorXd v_, fmv_, zall_, zeta_, pvec_, pdiff_, wbuf_;
  std::vector<Eigen::VectorXd> mv_;
};

}  // namespace

std::unique_ptr<TrajectorySampler> make_sampler(
    Algorithm algo, const PosteriorSequence& posteriors,
    const DesignMatrix* design, const ModelConfig& cfg, EffectKind kind,
    const Eigen::MatrixXd* fixed_sigma) {
  if (posteriors.states.empty())
    throw ParameterError("sampler: empty posterior sequence");
  switch (algo) {
    case Algorithm::Fest:
      if (!design) throw ParameterError("fest requires a design matrix");
      return std::make_unique<FestSampler>(posteriors, *design, cfg, kind);
    case Algorithm::Fsts:
      return std::make_unique<FstsSampler>(posteriors, cfg, kind);
    case Algorithm::Ffbs:
      return std::make_unique<FfbsSampler>(posteriors, cfg, kind, fixed_sigma);
  }
  throw ParameterError("bad algorithm");
}

namespace {

EffectTrajectory single_draw(Algorithm algo, const PosteriorSequence& seq,
                             const DesignMatrix* design, const ModelConfig& cfg,
                             int task, EffectKind kind, Rng& rng,
                             const Eigen::MatrixXd* fixed_sigma = nullptr) {
  auto sampler = make_sampler(algo, seq, design, cfg, kind, fixed_sigma);
  if (task < 0 || task >= sampler->n_tasks())
    throw ParameterError("trajectory draw: task index out of range");
  auto buf = sampler->make_buffer();
  sampler->draw(rng, buf);
  EffectTrajectory traj;
  traj.values = std::move(buf[static_cast<std::size_t>(task)]);
  traj.task = task;
  traj.algorithm = algo;
  return traj;
}

}  // namespace

EffectTrajectory fest_draw(const PosteriorSequence& posteriors,
                           const DesignMatrix& design, const ModelConfig& cfg,
                           int task, EffectKind kind, Rng& rng) {
  return single_draw(Algorithm::Fest, posteriors, &design, cfg, task, kind,
                     rng);
}

EffectTrajectory fsts_draw(const PosteriorSequence& posteriors,
                           const ModelConfig& cfg, int task, EffectKind kind,
                           Rng& rng) {
  return single_draw(Algorithm::Fsts, posteriors, nullptr, cfg, task, kind,
                     rng);
}

EffectTrajectory ffbs_draw(const PosteriorSequence& posteriors,
                           const ModelConfig& cfg, int task, EffectKind kind,
                           Rng& rng, const Eigen::MatrixXd* fixed_sigma) {
  return single_draw(Algorithm::Ffbs, posteriors, nullptr, cfg, task, kind,
                     rng, fixed_sigma);
}

EvidenceResult evidence(const std::vector<EffectTrajectory>& draws) {
  if (draws.empty()) throw ParameterError("evidence: no draws");
  int count = 0;
  for (const EffectTrajectory& d : draws)
    if ((d.values.array() > 0.0).all()) ++count;
  EvidenceResult res;
  res.probability = static_cast<double>(count) / draws.size();
  res.n_draws = static_cast<int>(draws.size());
  res.task = draws.front().task;
  res.algorithm = draws.front().algorithm;
  return res;
}

EvidenceResult contrast_evidence(
    const std::vector<EffectTrajectory>& draws_l,
    const std::vector<EffectTrajectory>& draws_lp) {
  if (draws_l.empty()) throw ParameterError("contrast_evidence: no draws");
  if (draws_l.size() != draws_lp.size())
    throw ParameterError("contrast_evidence: draw count mismatch");
  int count = 0;
  for (std::size_t k = 0; k < draws_l.size(); ++k) {
    if (draws_l[k].values.rows() != draws_lp[k].values.rows() ||
        draws_l[k].values.cols() != draws_lp[k].values.cols())
      throw ParameterError("contrast_evidence: trajectory shape mismatch");
    if (((draws_l[k].values - draws_lp[k].values).array() > 0.0).all())
      ++count;
  }
  EvidenceResult res;
  res.probability = static_cast<double>(count) / draws_l.size();
  res.n_draws = static_cast<int>(draws_l.size());
  res.task = draws_l.front().task;
  res.algorithm = draws_l.front().algorithm;
  return res;
}

// ---------------------------------------------------------------------------

VoxelOutcome process_voxel(const Bold4D& vol, const ClusterIndex& cluster,
                           const DesignMatrix& design, const ModelConfig& cfg,
                           const MapOptions& opts,
                           std::uint64_t voxel_linear_index) {
  const Eigen::MatrixXd series =
      extract_series(vol, cluster, opts.standardize);
  const PosteriorSequence posteriors =
      run_filter(series, design.values, cfg);
  auto sampler = make_sampler(opts.algorithm, posteriors, &design, cfg,
                              opts.kind);
  auto buf = sampler->make_buffer();
  const int p = sampler->n_tasks();

  std::vector<int> positive(static_cast<std::size_t>(p), 0);
  for (int k = 0; k < opts.n_draws; ++k) {
    Rng rng = make_rng(opts.seed, voxel_linear_index,
                       static_cast<std::uint64_t>(k));
    sampler->draw(rng, buf);
    for (int l = 0; l < p; ++l)
      if ((buf[static_cast<std::size_t>(l)].array() > 0.0).all())
        ++positive[static_cast<std::size_t>(l)];
  }

  VoxelOutcome out;
  out.evidence.resize(p);
  for (int l = 0; l < p; ++l)
    out.evidence[l] =
        static_cast<double>(positive[static_cast<std::size_t>(l)]) /
        opts.n_draws;

  if (opts.emit_summary) {
    const int t_len = posteriors.size();
    const int q = cluster.q();
    SummaryRecord& rec = out.record;
    rec.voxel = cluster.center;
    rec.q = q;
    rec.m_rows.resize(t_len, static_cast<Eigen::Index>(p) * q);
    rec.c_diag.resize(t_len, p);
    rec.s.resize(t_len, static_cast<Eigen::Index>(q) * q);
    rec.n.resize(t_len);
    for (int t = 0; t < t_len; ++t) {
      const PosteriorState& st = posteriors.states[t];
      for (int l = 0; l < p; ++l) {
        rec.m_rows.block(t, static_cast<Eigen::Index>(l) * q, 1, q) =
            st.m.row(l);
        rec.c_diag(t, l) = st.c(l, l);
      }
      for (int a = 0; a < q; ++a)
        for (int b = 0; b < q; ++b)
          rec.s(t, static_cast<Eigen::Index>(a) * q + b) = st.s(a, b);
      rec.n[t] = st.n;
    }
  }
  return out;
}

namespace {

SubjectMapResult map_subject_impl(const Bold4D& vol,
                                  const DesignMatrix& design,
                                  const ModelConfig& cfg,
                                  const MapOptions& opts, bool parallel) {
  cfg.validate();
  if (opts.n_draws < 1) throw ParameterError("map_subject: n_draws must be >= 1");
  if (vol.n_scans != design.n_scans())
    throw ParameterError("map_subject: volume/design scan count mismatch");

  std::vector<Voxel> voxels;
  for (int k = 0; k < vol.dims.z; ++k)
    for (int j = 0; j < vol.dims.y; ++j)
      for (int i = 0; i < vol.dims.x; ++i)
        if (vol.in_mask(i, j, k)) voxels.push_back({i, j, k});
  const std::int64_t n_vox = static_cast<std::int64_t>(voxels.size());

  SubjectMapResult result;
  result.evidence.dims = vol.dims;
  result.evidence.task_names = design.task_names;
  result.evidence.values.assign(
      static_cast<std::size_t>(design.n_tasks()),
      std::vector<double>(static_cast<std::size_t>(vol.dims.count()), 0.0));

  result.summary.dims = vol.dims;
  result.summary.cluster_radius = opts.cluster_radius;
  result.summary.beta = cfg.beta_at(0);
  result.summary.task_names = design.task_names;
  result.summary.burn_in = cfg.burn_in;
  result.summary.n_times = vol.n_scans;
  result.summary.standardized = opts.standardize;
  result.summary.design_hash = design_hash(design);

  std::vector<SummaryRecord> records(
      opts.emit_summary ? static_cast<std::size_t>(n_vox) : 0);
  std::vector<std::string> errors(static_cast<std::size_t>(n_vox));
  std::vector<std::uint8_t> failed(static_cast<std::size_t>(n_vox), 0);

  int workers = opts.workers;
  if (workers <= 0)
    workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16) num_threads(workers) \
    if (parallel)
#endif
  for (std::int64_t idx = 0; idx < n_vox; ++idx) {
    const Voxel v = voxels[static_cast<std::size_t>(idx)];
    try {
      const ClusterIndex cluster =
          neighborhood(v, opts.cluster_radius, vol.mask, vol.dims);
      const std::uint64_t stream =
          static_cast<std::uint64_t>(vol.spatial_index(v.i, v.j, v.k));
      VoxelOutcome outcome =
          process_voxel(vol, cluster, design, cfg, opts, stream);
      for (int l = 0; l < design.n_tasks(); ++l)
        result.evidence.values[static_cast<std::size_t>(l)]
                              [static_cast<std::size_t>(
                                  vol.spatial_index(v.i, v.j, v.k))] =
            outcome.evidence[l];
      if (opts.emit_summary)
        records[static_cast<std::size_t>(idx)] = std::move(outcome.record);
    } catch (const std::exception& e) {
      failed[static_cast<std::size_t>(idx)] = 1;
      errors[static_cast<std::size_t>(idx)] = e.what();
    }
  }

  for (std::int64_t idx = 0; idx < n_vox; ++idx) {
    if (failed[static_cast<std::size_t>(idx)]) {
      result.failures.push_back({voxels[static_cast<std::size_t>(idx)],
                                 errors[static_cast<std::size_t>(idx)]});
    } else if (opts.emit_summary) {
      result.summary.records.push_back(
          std::move(records[static_cast<std::size_t>(idx)]));
    }
  }
  return result;
}

}  // namespace

SubjectMapResult map_subject(const Bold4D& vol, const DesignMatrix& design,
                             const ModelConfig& cfg, const MapOptions& opts) {
  return map_subject_impl(vol, design, cfg, opts, true);
}

SubjectMapResult map_subject_serial(const Bold4D& vol,
                                    const DesignMatrix& design,
                                    const ModelConfig& cfg,
                                    const MapOptions& opts) {
  return map_subject_impl(vol, design, cfg, opts, false);
}

}  // namespace mvdlm
