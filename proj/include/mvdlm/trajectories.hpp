#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "mvdlm/design.hpp"
#include "mvdlm/dlm.hpp"
#include "mvdlm/rng.hpp"
#include "mvdlm/volume.hpp"

namespace mvdlm {

enum class EffectKind { Marginal, AverageCluster, Joint };
enum class Algorithm { Fest, Fsts, Ffbs };

std::string to_string(EffectKind kind);
std::string to_string(Algorithm algo);
EffectKind effect_kind_from_string(const std::string& name);
Algorithm algorithm_from_string(const std::string& name);

/// Normal law of one effect projection at one time: scalar for the
/// marginal and average-cluster kinds, q-variate for the joint kind.
struct EffectDistribution {
  EffectKind kind = EffectKind::Marginal;
  Eigen::VectorXd mean;   // d = 1 or q
  Eigen::MatrixXd scale;  // d x d
  int time = 0;
  int task = 0;

  int dim() const { return static_cast<int>(mean.size()); }
};

/// One sampled on-line trajectory over retained times.
struct EffectTrajectory {
  Eigen::MatrixXd values;  // R x d
  int task = 0;
  Algorithm algorithm = Algorithm::Fest;
  int draw_index = 0;
};

struct EvidenceResult {
  double probability = 0.0;
  int n_draws = 0;
  int task = 0;
  EffectKind kind = EffectKind::Marginal;
  Algorithm algorithm = Algorithm::Fest;
};

/// Projects the posterior state onto the effect of task l (0-based).
EffectDistribution effect_projection(const PosteriorState& state, int task,
                                     EffectKind kind);

/// Repeated-draw sampler for one voxel's trajectories; draws fill one
/// R x d block per task from a single joint pass.
class TrajectorySampler {
 public:
  virtual ~TrajectorySampler() = default;
  virtual void draw(Rng& rng, std::vector<Eigen::MatrixXd>& out) = 0;
  int n_tasks() const { return p_; }
  int retained() const { return retained_; }
  int dim() const { return dim_; }
  std::vector<Eigen::MatrixXd> make_buffer() const;

 protected:
  int p_ = 0, retained_ = 0, dim_ = 0;
};

std::unique_ptr<TrajectorySampler> make_sampler(
    Algorithm algo, const PosteriorSequence& posteriors,
    const DesignMatrix* design, const ModelConfig& cfg, EffectKind kind,
    const Eigen::MatrixXd* fixed_sigma = nullptr);

EffectTrajectory fest_draw(const PosteriorSequence& posteriors,
                           const DesignMatrix& design, const ModelConfig& cfg,
                           int task, EffectKind kind, Rng& rng);
EffectTrajectory fsts_draw(const PosteriorSequence& posteriors,
                           const ModelConfig& cfg, int task, EffectKind kind,
                           Rng& rng);
/// `fixed_sigma` bypasses the inverse-Wishart step (test hook).
EffectTrajectory ffbs_draw(const PosteriorSequence& posteriors,
                           const ModelConfig& cfg, int task, EffectKind kind,
                           Rng& rng,
                           const Eigen::MatrixXd* fixed_sigma = nullptr);

/// Monte Carlo activation evidence: fraction of draws whose every element
/// is strictly positive.
EvidenceResult evidence(const std::vector<EffectTrajectory>& draws);

/// Evidence that task l dominates task l', pairing draws by index.
EvidenceResult contrast_evidence(const std::vector<EffectTrajectory>& draws_l,
                                 const std::vector<EffectTrajectory>& draws_lp);

struct MapOptions {
  Algorithm algorithm = Algorithm::Fest;
  EffectKind kind = EffectKind::AverageCluster;
  int n_draws = 1000;
  double threshold = 0.95;
  std::uint64_t seed = 0;
  int workers = 0;  // 0 = all hardware threads
  int cluster_radius = 1;
  bool standardize = true;
  bool emit_summary = true;
};

struct EvidenceVolume {
  Dims3 dims;
  std::vector<std::string> task_names;
  // One spatial grid per task; out-of-mask and failed voxels are 0.
  std::vector<std::vector<double>> values;
};

struct VoxelFailure {
  Voxel voxel;
  std::string message;
};

struct SubjectMapResult {
  EvidenceVolume evidence;
  SubjectSummary summary;
  std::vector<VoxelFailure> failures;
};

/// Per-voxel evidence map for one subject. OpenMP-parallel over voxels;
/// per-voxel RNG streams keyed by (seed, voxel linear index, draw index)
/// make results bit-identical for any worker count.
SubjectMapResult map_subject(const Bold4D& vol, const DesignMatrix& design,
                             const ModelConfig& cfg, const MapOptions& opts);

/// Serial reference implementation; identical outputs to map_subject.
SubjectMapResult map_subject_serial(const Bold4D& vol,
                                    const DesignMatrix& design,
                                    const ModelConfig& cfg,
                                    const MapOptions& opts);

/// Single-voxel pipeline piece shared by the mappers and tests: evidence
/// per task plus the summary record.
struct VoxelOutcome {
  Eigen::VectorXd evidence;
  SummaryRecord record;
};
VoxelOutcome process_voxel(const Bold4D& vol, const ClusterIndex& cluster,
                           const DesignMatrix& design, const ModelConfig& cfg,
                           const MapOptions& opts,
                           std::uint64_t voxel_linear_index);

}  // namespace mvdlm
