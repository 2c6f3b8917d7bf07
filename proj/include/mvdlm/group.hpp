#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "mvdlm/design.hpp"
#include "mvdlm/dlm.hpp"
#include "mvdlm/trajectories.hpp"
#include "mvdlm/volume.hpp"

namespace mvdlm {

/// Group-level effect law for one voxel: subject-averaged means and
/// 1/N_g^2-summed scales at every filter time, plus the pooled sampler
/// noise scale.
struct GroupDistribution {
  EffectKind kind = EffectKind::Marginal;
  Voxel voxel;
  int q = 0;
  int n_subjects = 0;
  int burn_in = 30;
  std::vector<std::vector<Eigen::VectorXd>> mean;   // [T][p], d-dim
  std::vector<std::vector<Eigen::MatrixXd>> scale;  // [T][p], d x d
  std::vector<Eigen::MatrixXd> noise;               // [T], d x d pooled

  int n_times() const { return static_cast<int>(mean.size()); }
  int n_tasks() const {
    return mean.empty() ? 0 : static_cast<int>(mean.front().size());
  }
};

/// Combines aligned per-voxel records of N_g subjects.
GroupDistribution group_combine(const std::vector<const SummaryRecord*>& records,
                                EffectKind kind, int n_tasks, int burn_in);

/// Whole-cohort convenience; summaries must be compatible and their records
/// aligned voxel-for-voxel.
std::vector<GroupDistribution> group_combine(
    const std::vector<SubjectSummary>& summaries, EffectKind kind);

/// A - B contrast: mean difference, scale and noise sums.
GroupDistribution group_contrast(const GroupDistribution& a,
                                 const GroupDistribution& b);

/// Trajectory sampler operating on a group (or contrast) distribution.
/// FEST re-synthesizes and re-filters and therefore needs the shared
/// design; FSTS/FFBS act on the projected effect recursion directly.
std::unique_ptr<TrajectorySampler> make_group_sampler(
    Algorithm algo, const GroupDistribution& dist, const DesignMatrix* design,
    const ModelConfig& cfg);

struct GroupMapResult {
  EvidenceVolume evidence;
  std::vector<VoxelFailure> failures;
};

/// Streams the summary files voxel-by-voxel and emits group evidence.
/// `design` is required for FEST and must hash-match every summary.
GroupMapResult map_group(const std::vector<std::string>& summary_paths,
                         const DesignMatrix* design, const ModelConfig& cfg,
                         const MapOptions& opts);

/// Two-group A - B contrast evidence.
GroupMapResult map_group_contrast(
    const std::vector<std::string>& group_a_paths,
    const std::vector<std::string>& group_b_paths, const DesignMatrix* design,
    const ModelConfig& cfg, const MapOptions& opts);

}  // namespace mvdlm
