#include "mvdlm/group.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "mvdlm/errors.hpp"
#include "mvdlm/sampling.hpp"

namespace mvdlm {

namespace {

// Per-subject effect mean/scale at one time from the stored record.
void subject_effect(const SummaryRecord& rec, int t, int l, int n_tasks,
                    EffectKind kind, Eigen::VectorXd& mean,
                    Eigen::MatrixXd& scale) {
  (void)n_tasks;
  const int q = rec.q;
  const double cll = rec.c_diag(t, l);
  const auto m_row = rec.m_rows.block(t, static_cast<Eigen::Index>(l) * q, 1, q);
  switch (kind) {
    case EffectKind::Marginal:
      mean = Eigen::VectorXd::Constant(1, m_row(0, 0));
      scale = Eigen::MatrixXd::Constant(1, 1, cll * rec.s(t, 0));
      break;
    case EffectKind::AverageCluster: {
      double s_sum = 0.0;
      for (int c = 0; c < q * q; ++c) s_sum += rec.s(t, c);
      mean = Eigen::VectorXd::Constant(1, m_row.mean());
      scale = Eigen::MatrixXd::Constant(1, 1, cll * s_sum / (q * q));
      break;
    }
    case EffectKind::Joint: {
      mean = m_row.transpose();
      scale.resize(q, q);
      for (int a = 0; a < q; ++a)
        for (int b = 0; b < q; ++b)
          scale(a, b) = cll * rec.s(t, static_cast<Eigen::Index>(a) * q + b);
      break;
    }
  }
}

Eigen::MatrixXd subject_noise(const SummaryRecord& rec, int t,
                              EffectKind kind) {
  const int q = rec.q;
  if (kind == EffectKind::Joint) {
    Eigen::MatrixXd s(q, q);
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < q; ++b)
        s(a, b) = rec.s(t, static_cast<Eigen::Index>(a) * q + b);
    return s;
  }
  if (kind == EffectKind::Marginal)
    return Eigen::MatrixXd::Constant(1, 1, rec.s(t, 0));
  double s_sum = 0.0;
  for (int c = 0; c < q * q; ++c) s_sum += rec.s(t, c);
  return Eigen::MatrixXd::Constant(1, 1, s_sum / (q * q));
}

}  // namespace

GroupDistribution group_combine(const std::vector<const SummaryRecord*>& records,
                                EffectKind kind, int n_tasks, int burn_in) {
  if (records.empty()) throw ParameterError("group_combine: no subjects");
  const int n_g = static_cast<int>(records.size());
  const int t_len = static_cast<int>(records.front()->n.size());
  const int q = records.front()->q;
  for (const SummaryRecord* rec : records) {
    if (rec->q != q || rec->n.size() != t_len ||
        !(rec->voxel == records.front()->voxel))
      throw ConfigError("group_combine: subject records are not aligned");
  }

  GroupDistribution dist;
  dist.kind = kind;
  dist.voxel = records.front()->voxel;
  dist.q = q;
  dist.n_subjects = n_g;
  dist.burn_in = burn_in;
  dist.mean.resize(t_len);
  dist.scale.resize(t_len);
  dist.noise.resize(t_len);

  const double inv_n = 1.0 / n_g;
  const double inv_n2 = inv_n * inv_n;
  Eigen::VectorXd mean;
  Eigen::MatrixXd scale;
  for (int t = 0; t < t_len; ++t) {
    dist.mean[t].resize(n_tasks);
    dist.scale[t].resize(n_tasks);
    for (int l = 0; l < n_tasks; ++l) {
      for (int z = 0; z < n_g; ++z) {
        subject_effect(*records[z], t, l, n_tasks, kind, mean, scale);
        if (z == 0) {
          dist.mean[t][l] = mean;
          dist.scale[t][l] = scale;
        } else {
          dist.mean[t][l] += mean;
          dist.scale[t][l] += scale;
        }
      }
      dist.mean[t][l] *= inv_n;
      dist.scale[t][l] *= inv_n2;
    }
    for (int z = 0; z < n_g; ++z) {
      if (z == 0)
        dist.noise[t] = subject_noise(*records[z], t, kind);
      else
        dist.noise[t] += subject_noise(*records[z], t, kind);
    }
    dist.noise[t] *= inv_n2;
  }
  return dist;
}

std::vector<GroupDistribution> group_combine(
    const std::vector<SubjectSummary>& summaries, EffectKind kind) {
  if (summaries.empty()) throw ParameterError("group_combine: no subjects");
  const SubjectSummary& first = summaries.front();
  for (const SubjectSummary& s : summaries) {
    if (s.dims != first.dims || s.cluster_radius != first.cluster_radius ||
        s.burn_in != first.burn_in || s.n_times != first.n_times ||
        s.task_names != first.task_names ||
        s.records.size() != first.records.size())
      throw ConfigError("group_combine: incompatible subject summaries");
  }
  const int p = static_cast<int>(first.task_names.size());
  std::vector<GroupDistribution> out;
  out.reserve(first.records.size());
  std::vector<const SummaryRecord*> recs(summaries.size());
  for (std::size_t v = 0; v < first.records.size(); ++v) {
    for (std::size_t z = 0; z < summaries.size(); ++z)
      recs[z] = &summaries[z].records[v];
    out.push_back(group_combine(recs, kind, p, first.burn_in));
  }
  return out;
}

GroupDistribution group_contrast(const GroupDistribution& a,
                                 const GroupDistribution& b) {
  if (a.kind != b.kind) throw ConfigError("group_contrast: kind mismatch");
  if (a.n_times() != b.n_times() || a.n_tasks() != b.n_tasks() ||
      a.q != b.q || a.burn_in != b.burn_in)
    throw ConfigError("group_contrast: window mismatch");
  GroupDistribution out = a;
  out.n_subjects = a.n_subjects + b.n_subjects;
  for (int t = 0; t < a.n_times(); ++t) {
    for (int l = 0; l < a.n_tasks(); ++l) {
      out.mean[t][l] = a.mean[t][l] - b.mean[t][l];
      out.scale[t][l] = a.scale[t][l] + b.scale[t][l];
    }
    out.noise[t] = a.noise[t] + b.noise[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group samplers over the projected-effect laws.

namespace {

Eigen::MatrixXd chol_or_zero(const Eigen::MatrixXd& a) {
  if (a.cwiseAbs().maxCoeff() == 0.0)
    return Eigen::MatrixXd::Zero(a.rows(), a.cols());
  return robust_cholesky(a);
}

void fill_gauss(Eigen::VectorXd& z, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = gauss(rng);
}

class GroupFestSampler final : public TrajectorySampler {
 public:
  GroupFestSampler(const GroupDistribution& dist, const DesignMatrix& design,
                   const ModelConfig& cfg)
      : cfg_(cfg), design_(design.values) {
    t_len_ = dist.n_times();
    if (design_.rows() != t_len_)
      throw ConfigError("group fest: design length does not match summaries");
    p_ = dist.n_tasks();
    dim_ = dist.kind == EffectKind::Joint ? dist.q : 1;
    retained_ = t_len_ - dist.burn_in + 1;
    burn_in_ = dist.burn_in;

    effect_mean_.resize(t_len_);
    effect_chol_.resize(t_len_);
    noise_chol_.resize(t_len_);
    for (int t = 0; t < t_len_; ++t) {
      effect_mean_[t] = dist.mean[t];
      effect_chol_[t].resize(p_);
      for (int l = 0; l < p_; ++l)
        effect_chol_[t][l] = chol_or_zero(dist.scale[t][l]);
      noise_chol_[t] = chol_or_zero(dist.noise[t]);
    }
    synth_.resize(t_len_, dim_);
    m_.resize(p_, dim_);
    c_.resize(p_, p_);
    z_.resize(dim_);
    inv_sqrt_beta_.resize(p_);
    for (int i = 0; i < p_; ++i)
      inv_sqrt_beta_[i] = 1.0 / std::sqrt(cfg.beta_at(i));
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    if (p_ == 1 && dim_ == 1) {
      // scalar hot path; mirrors the subject-level sampler bit for bit
      if (zall_.size() == 0) zall_.resize(2 * t_len_);
      fill_gauss(zall_, rng);
      const double inv_beta = inv_sqrt_beta_[0] * inv_sqrt_beta_[0];
      double m = 0.0;
      double c = cfg_.prior_c_scale;
      Eigen::MatrixXd& dst = out[0];
      for (int t = 0; t < t_len_; ++t) {
        const double x = design_(t, 0);
        double y =
            (effect_mean_[t][0][0] + effect_chol_[t][0](0, 0) * zall_[2 * t]) *
            x;
        y += noise_chol_[t](0, 0) * zall_[2 * t + 1];

        const double r = c * inv_beta;
        const double qs = cfg_.v_scale + x * x * r;
        const double gain = r * x / qs;
        m += gain * (y - x * m);
        c = r - gain * gain * qs;
        const int rt = t + 1 - burn_in_;
        if (rt >= 0) dst(rt, 0) = m;
      }
      return;
    }
    for (int t = 0; t < t_len_; ++t) {
      Eigen::VectorXd y = Eigen::VectorXd::Zero(dim_);
      for (int l = 0; l < p_; ++l) {
        fill_gauss(z_, rng);
        y += (effect_mean_[t][l] + effect_chol_[t][l] * z_) * design_(t, l);
      }
      fill_gauss(z_, rng);
      y += noise_chol_[t] * z_;
      synth_.row(t) = y.transpose();
    }
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
      const int rt = t + 1 - burn_in_;
      if (rt >= 0)
        for (int l = 0; l < p_; ++l) out[l].row(rt) = m_.row(l);
    }
  }

 private:
  ModelConfig cfg_;
  Eigen::MatrixXd design_;
  int t_len_ = 0, burn_in_ = 30;
  std::vector<std::vector<Eigen::VectorXd>> effect_mean_;
  std::vector<std::vector<Eigen::MatrixXd>> effect_chol_;
  std::vector<Eigen::MatrixXd> noise_chol_;
  Eigen::MatrixXd synth_, m_, c_;
  Eigen::VectorXd z_, zall_, inv_sqrt_beta_;
};

// FSTS on the projected effect: an independent draw at t-1 plus a
// discount-scaled innovation.
class GroupFstsSampler final : public TrajectorySampler {
 public:
  GroupFstsSampler(const GroupDistribution& dist, const ModelConfig& cfg)
      : dist_(&dist) {
    p_ = dist.n_tasks();
    dim_ = dist.kind == EffectKind::Joint ? dist.q : 1;
    retained_ = dist.n_times() - dist.burn_in + 1;
    burn_in_ = dist.burn_in;
    if (burn_in_ < 2)
      throw ConfigError("group fsts: burn_in must be >= 2 (needs t-1)");

    prev_chol_.resize(retained_);
    innov_chol_.resize(retained_);
    for (int rt = 0; rt < retained_; ++rt) {
      const int t_prev = burn_in_ + rt - 2;  // 0-based index of time t-1
      prev_chol_[rt].resize(p_);
      innov_chol_[rt].resize(p_);
      for (int l = 0; l < p_; ++l) {
        prev_chol_[rt][l] = chol_or_zero(dist.scale[t_prev][l]);
        const double infl = 1.0 / cfg.beta_at(l) - 1.0;
        innov_chol_[rt][l] = std::sqrt(infl) * prev_chol_[rt][l];
      }
    }
    z_.resize(dim_);
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    for (int rt = 0; rt < retained_; ++rt) {
      const int t_prev = burn_in_ + rt - 2;
      for (int l = 0; l < p_; ++l) {
        fill_gauss(z_, rng);
        Eigen::VectorXd theta =
            dist_->mean[t_prev][l] + prev_chol_[rt][l] * z_;
        fill_gauss(z_, rng);
        theta += innov_chol_[rt][l] * z_;
        out[l].row(rt) = theta.transpose();
      }
    }
  }

 private:
  const GroupDistribution* dist_;
  int burn_in_ = 30;
  std::vector<std::vector<Eigen::MatrixXd>> prev_chol_, innov_chol_;
  Eigen::VectorXd z_;
};

// FFBS on the projected effect: the backward gain collapses to beta_l.
class GroupFfbsSampler final : public TrajectorySampler {
 public:
  GroupFfbsSampler(const GroupDistribution& dist, const ModelConfig& cfg)
      : dist_(&dist) {
    p_ = dist.n_tasks();
    dim_ = dist.kind == EffectKind::Joint ? dist.q : 1;
    retained_ = dist.n_times() - dist.burn_in + 1;
    burn_in_ = dist.burn_in;
    beta_.resize(p_);
    for (int l = 0; l < p_; ++l) beta_[l] = cfg.beta_at(l);

    const int t_last = dist.n_times() - 1;
    final_chol_.resize(p_);
    for (int l = 0; l < p_; ++l)
      final_chol_[l] = chol_or_zero(dist.scale[t_last][l]);
    back_chol_.resize(retained_ - 1);
    for (int j = 0; j < retained_ - 1; ++j) {
      const int t = t_last - 1 - j;  // 0-based time index
      back_chol_[j].resize(p_);
      for (int l = 0; l < p_; ++l)
        back_chol_[j][l] =
            std::sqrt(1.0 - beta_[l]) * chol_or_zero(dist.scale[t][l]);
    }
    z_.resize(dim_);
  }

  void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) override {
    const int t_last = dist_->n_times() - 1;
    std::vector<Eigen::VectorXd> theta(static_cast<std::size_t>(p_));
    for (int l = 0; l < p_; ++l) {
      fill_gauss(z_, rng);
      theta[l] = dist_->mean[t_last][l] + final_chol_[l] * z_;
      out[l].row(retained_ - 1) = theta[l].transpose();
    }
    for (int j = 0; j < retained_ - 1; ++j) {
      const int t = t_last - 1 - j;
      const int rt = retained_ - 2 - j;
      for (int l = 0; l < p_; ++l) {
        fill_gauss(z_, rng);
        theta[l] = dist_->mean[t][l] +
                   beta_[l] * (theta[l] - dist_->mean[t][l]) +
                   back_chol_[j][l] * z_;
        out[l].row(rt) = theta[l].transpose();
      }
    }
  }

 private:
  const GroupDistribution* dist_;
  int burn_in_ = 30;
  Eigen::VectorXd beta_;
  std::vector<Eigen::MatrixXd> final_chol_;
  std::vector<std::vector<Eigen::MatrixXd>> back_chol_;
  Eigen::VectorXd z_;
};

}  // namespace

std::unique_ptr<TrajectorySampler> make_group_sampler(
    Algorithm algo, const GroupDistribution& dist, const DesignMatrix* design,
    const ModelConfig& cfg) {
  switch (algo) {
    case Algorithm::Fest:
      if (!design)
        throw ConfigError(
            "group fest requires a design shared by all subjects; use fsts "
            "for heterogeneous designs");
      return std::make_unique<GroupFestSampler>(dist, *design, cfg);
    case Algorithm::Fsts:
      return std::make_unique<GroupFstsSampler>(dist, cfg);
    case Algorithm::Ffbs:
      return std::make_unique<GroupFfbsSampler>(dist, cfg);
  }
  throw ParameterError("bad algorithm");
}

// ---------------------------------------------------------------------------

namespace {

void check_compatible(const SubjectSummary& a, const SubjectSummary& b,
                      const std::string& path) {
  std::string mismatch;
  if (a.dims != b.dims) mismatch = "dims";
  else if (a.cluster_radius != b.cluster_radius) mismatch = "cluster radius";
  else if (a.burn_in != b.burn_in) mismatch = "burn-in";
  else if (a.n_times != b.n_times) mismatch = "scan count";
  else if (a.task_names != b.task_names) mismatch = "task names";
  else if (a.standardized != b.standardized) mismatch = "standardization";
  if (!mismatch.empty())
    throw ConfigError("incompatible summary " + path + ": " + mismatch +
                      " differs");
}

struct StreamedGroup {
  std::vector<std::unique_ptr<SummaryReader>> readers;
  SubjectSummary meta;  // of the first summary

  explicit StreamedGroup(const std::vector<std::string>& paths) {
    if (paths.empty()) throw ParameterError("map_group: no summaries");
    for (const std::string& path : paths) {
      readers.push_back(std::make_unique<SummaryReader>(path));
      if (readers.size() == 1)
        meta = readers.front()->meta();
      else
        check_compatible(meta, readers.back()->meta(), path);
      if (readers.back()->n_records() != readers.front()->n_records())
        throw ConfigError("incompatible summary " + path +
                          ": voxel count differs");
    }
  }

  // Reads the next block of aligned per-voxel record sets; empty at EOF.
  std::vector<std::vector<SummaryRecord>> next_block(int block) {
    std::vector<std::vector<SummaryRecord>> out;
    for (int b = 0; b < block; ++b) {
      std::vector<SummaryRecord> recs(readers.size());
      if (!readers[0]->next(recs[0])) break;
      for (std::size_t z = 1; z < readers.size(); ++z) {
        if (!readers[z]->next(recs[z]))
          throw FormatError("summary stream ended early");
        if (!(recs[z].voxel == recs[0].voxel))
          throw ConfigError("summaries are not voxel-aligned");
      }
      out.push_back(std::move(recs));
    }
    return out;
  }
};

GroupMapResult map_group_impl(const std::vector<std::string>& paths_a,
                              const std::vector<std::string>* paths_b,
                              const DesignMatrix* design,
                              const ModelConfig& cfg, const MapOptions& opts) {
  cfg.validate();
  StreamedGroup group_a(paths_a);
  std::unique_ptr<StreamedGroup> group_b;
  if (paths_b) {
    group_b = std::make_unique<StreamedGroup>(*paths_b);
    check_compatible(group_a.meta, group_b->meta, "(group B)");
  }
  const SubjectSummary& meta = group_a.meta;
  const int p = static_cast<int>(meta.task_names.size());

  if (opts.algorithm == Algorithm::Fest) {
    if (!design)
      throw ConfigError(
          "group fest requires the shared design matrix; use fsts for "
          "heterogeneous designs");
    const std::string expected = design_hash(*design);
    if (meta.design_hash != expected ||
        (group_b && group_b->meta.design_hash != expected))
      throw ConfigError(
          "group fest requires one design shared by all subjects "
          "(design hash mismatch); use fsts for heterogeneous designs");
  }

  GroupMapResult result;
  result.evidence.dims = meta.dims;
  result.evidence.task_names = meta.task_names;
  result.evidence.values.assign(
      static_cast<std::size_t>(p),
      std::vector<double>(static_cast<std::size_t>(meta.dims.count()), 0.0));

  int workers = opts.workers;
  if (workers <= 0)
    workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  const int block = std::max(64, 8 * workers);

  const auto linear = [&meta](const Voxel& v) {
    return static_cast<std::int64_t>(v.i) +
           meta.dims.x * (static_cast<std::int64_t>(v.j) + meta.dims.y * v.k);
  };

  for (;;) {
    auto block_a = group_a.next_block(block);
    if (block_a.empty()) break;
    std::vector<std::vector<SummaryRecord>> block_b;
    if (group_b) block_b = group_b->next_block(static_cast<int>(block_a.size()));

    const std::int64_t n = static_cast<std::int64_t>(block_a.size());
    std::vector<std::string> errors(static_cast<std::size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 4) num_threads(workers)
#endif
    for (std::int64_t b = 0; b < n; ++b) {
      try {
        std::vector<const SummaryRecord*> recs;
        for (const SummaryRecord& r : block_a[static_cast<std::size_t>(b)])
          recs.push_back(&r);
        GroupDistribution dist =
            group_combine(recs, opts.kind, p, meta.burn_in);
        if (group_b) {
          recs.clear();
          for (const SummaryRecord& r : block_b[static_cast<std::size_t>(b)])
            recs.push_back(&r);
          dist = group_contrast(
              dist, group_combine(recs, opts.kind, p, meta.burn_in));
        }
        auto sampler = make_group_sampler(opts.algorithm, dist, design, cfg);
        auto buf = sampler->make_buffer();
        std::vector<int> positive(static_cast<std::size_t>(p), 0);
        const std::uint64_t stream =
            static_cast<std::uint64_t>(linear(dist.voxel));
        for (int k = 0; k < opts.n_draws; ++k) {
          Rng rng = make_rng(opts.seed, stream, static_cast<std::uint64_t>(k));
          sampler->draw(rng, buf);
          for (int l = 0; l < p; ++l)
            if ((buf[static_cast<std::size_t>(l)].array() > 0.0).all())
              ++positive[static_cast<std::size_t>(l)];
        }
        for (int l = 0; l < p; ++l)
          result.evidence.values[static_cast<std::size_t>(l)]
                                [static_cast<std::size_t>(linear(dist.voxel))] =
              static_cast<double>(positive[static_cast<std::size_t>(l)]) /
              opts.n_draws;
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(b)] = e.what();
      }
    }
    for (std::int64_t b = 0; b < n; ++b)
      if (!errors[static_cast<std::size_t>(b)].empty())
        result.failures.push_back(
            {block_a[static_cast<std::size_t>(b)].front().voxel,
             errors[static_cast<std::size_t>(b)]});
  }
  return result;
}

}  // namespace

GroupMapResult map_group(const std::vector<std::string>& summary_paths,
                         const DesignMatrix* design, const ModelConfig& cfg,
                         const MapOptions& opts) {
  return map_group_impl(summary_paths, nullptr, design, cfg, opts);
}

GroupMapResult map_group_contrast(
    const std::vector<std::string>& group_a_paths,
    const std::vector<std::string>& group_b_paths, const DesignMatrix* design,
    const ModelConfig& cfg, const MapOptions& opts) {
  return map_group_impl(group_a_paths, &group_b_paths, design, cfg, opts);
}

}  // namespace mvdlm
