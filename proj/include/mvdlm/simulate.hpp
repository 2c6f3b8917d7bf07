#pragma once

#include <array>
#include <string>
#include <variant>
#include <vector>

#include "mvdlm/design.hpp"
#include "mvdlm/dlm.hpp"
#include "mvdlm/trajectories.hpp"
#include "mvdlm/volume.hpp"

namespace mvdlm {

struct NoiseWhite {};
struct NoiseAr1 {
  double coefficient = 0.4;
};
using NoiseModel = std::variant<NoiseWhite, NoiseAr1>;

struct SphereRegion {
  std::array<double, 3> center = {0, 0, 0};  // voxel coordinates
  double radius = 4.0;                       // voxels
  double effect = 250.0;
};

struct PhantomSpec {
  Dims3 dims{30, 30, 30};
  std::vector<SphereRegion> regions;
  double snr = 30.0;  // peak signal amplitude / noise SD
  NoiseModel noise = NoiseWhite{};
  double baseline = 1000.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Phantom {
  Bold4D volume;
  std::vector<std::uint8_t> truth;  // spatial grid, 1 inside a region
};

/// Baseline + effect * regressor inside the spheres + noise with
/// SD = max-effect / snr everywhere. Uses the first design column as the
/// activation regressor of every region.
Phantom generate_phantom(const PhantomSpec& spec, const DesignMatrix& design);

/// Stationary noise with no stimulus-locked component.
Bold4D generate_resting(const Dims3& dims, int n_scans, double tr,
                        const NoiseModel& noise, std::uint64_t seed);

/// The four fictitious paradigms: B1 (10 s on/off), B2 (30 s on/off),
/// E1 (2 s activation, 6 s rest), E2 (1-4 s activation, 3-6 s rest,
/// randomized from a seeded stream).
std::vector<DesignMatrix> fictitious_designs(int n_scans, double tr,
                                             std::uint64_t seed = 0);
DesignMatrix fictitious_design(const std::string& paradigm, int n_scans,
                               double tr, std::uint64_t seed = 0);

struct FprReport {
  double rate = 0.0;
  std::int64_t n_voxels = 0;
  std::int64_t n_positive = 0;
  // per in-mask voxel: (voxel, evidence of task 0)
  std::vector<std::pair<Voxel, double>> evidence;
};

/// False-positive assessment on null data: fraction of in-mask voxels with
/// evidence strictly above the threshold.
FprReport assess_fpr(const Bold4D& null_data, const DesignMatrix& design,
                     const ModelConfig& cfg, const MapOptions& opts);

}  // namespace mvdlm
