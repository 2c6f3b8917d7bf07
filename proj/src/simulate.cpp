#include "mvdlm/simulate.hpp"

#include <algorithm>
#include <cmath>

#include "mvdlm/errors.hpp"
#include "mvdlm/rng.hpp"

namespace mvdlm {

namespace {

// One stationary noise series of length T. AR(1) is scaled so the
// marginal SD equals `sd`.
void noise_series(std::vector<double>& out, const NoiseModel& model, double sd,
                  Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (const auto* ar = std::get_if<NoiseAr1>(&model)) {
    const double phi = ar->coefficient;
    if (std::abs(phi) >= 1.0)
      throw ParameterError("ar1 coefficient must satisfy |phi| < 1");
    const double innov_sd = sd * std::sqrt(1.0 - phi * phi);
    double prev = sd * gauss(rng);
    for (double& v : out) {
      v = prev;
      prev = phi * prev + innov_sd * gauss(rng);
    }
  } else {
    for (double& v : out) v = sd * gauss(rng);
  }
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims.count() <= 0) throw ParameterError("phantom: empty grid");
  if (!(snr > 0.0)) throw ParameterError("phantom: snr must be positive");
  for (const SphereRegion& region : regions) {
    if (!(region.radius > 0.0))
      throw ParameterError("phantom: region radius must be positive");
    for (int a = 0; a < 3; ++a) {
      if (region.center[a] - region.radius < -0.5 ||
          region.center[a] + region.radius >
              (a == 0 ? dims.x : a == 1 ? dims.y : dims.z) - 0.5)
        throw ParameterError("phantom: region extends outside the grid");
    }
  }
}

Phantom generate_phantom(const PhantomSpec& spec, const DesignMatrix& design) {
  spec.validate();
  const int t_len = design.n_scans();
  const std::int64_t nvox = spec.dims.count();

  Phantom phantom;
  Bold4D& vol = phantom.volume;
  vol.dims = spec.dims;
  vol.n_scans = t_len;
  vol.tr = design.tr;
  vol.data.assign(nvox * t_len, 0.0);
  vol.mask.assign(nvox, 1);
  phantom.truth.assign(nvox, 0);

  // effect field: per-voxel stimulus-locked amplitude
  std::vector<double> amplitude(nvox, 0.0);
  double max_effect = 0.0;
  for (const SphereRegion& region : spec.regions)
    max_effect = std::max(max_effect, std::abs(region.effect));
  for (int k = 0; k < spec.dims.z; ++k)
    for (int j = 0; j < spec.dims.y; ++j)
      for (int i = 0; i < spec.dims.x; ++i) {
        const std::int64_t sp = vol.spatial_index(i, j, k);
        for (const SphereRegion& region : spec.regions) {
          const double di = i - region.center[0];
          const double dj = j - region.center[1];
          const double dk = k - region.center[2];
          if (di * di + dj * dj + dk * dk <= region.radius * region.radius) {
            amplitude[sp] = region.effect;
            phantom.truth[sp] = 1;
            break;
          }
        }
      }

  const double noise_sd = max_effect > 0.0 ? max_effect / spec.snr : 1.0;
  const Eigen::VectorXd regressor = design.values.col(0);

  std::vector<double> noise(t_len);
  for (std::int64_t sp = 0; sp < nvox; ++sp) {
    Rng rng = make_rng(spec.seed, static_cast<std::uint64_t>(sp));
    noise_series(noise, spec.noise, noise_sd, rng);
    for (int t = 0; t < t_len; ++t)
      vol.data[sp + nvox * t] =
          spec.baseline + amplitude[sp] * regressor[t] + noise[t];
  }
  return phantom;
}

Bold4D generate_resting(const Dims3& dims, int n_scans, double tr,
                        const NoiseModel& noise, std::uint64_t seed) {
  if (dims.count() <= 0 || n_scans < 1)
    throw ParameterError("generate_resting: empty grid");
  Bold4D vol;
  vol.dims = dims;
  vol.n_scans = n_scans;
  vol.tr = tr;
  const std::int64_t nvox = dims.count();
  vol.data.assign(nvox * n_scans, 0.0);
  vol.mask.assign(nvox, 1);
  std::vector<double> series(n_scans);
  for (std::int64_t sp = 0; sp < nvox; ++sp) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(sp));
    noise_series(series, noise, 1.0, rng);
    for (int t = 0; t < n_scans; ++t) vol.data[sp + nvox * t] = series[t];
  }
  return vol;
}

namespace {

StimulusSpec block_train(double on, double off, double window,
                         const std::string& name) {
  StimulusSpec stim;
  stim.name = name;
  for (double t = 0.0; t < window; t += on + off) {
    stim.onsets.push_back(t);
    stim.durations.push_back(on);
  }
  return stim;
}

StimulusSpec randomized_events(double window, std::uint64_t seed) {
  StimulusSpec stim;
  stim.name = "E2";
  Rng rng = make_rng(seed, 0xe2);
  std::uniform_real_distribution<double> act(1.0, 4.0);
  std::uniform_real_distribution<double> rest(3.0, 6.0);
  double t = 0.0;
  while (t < window) {
    const double dur = act(rng);
    stim.onsets.push_back(t);
    stim.durations.push_back(dur);
    t += dur + rest(rng);
  }
  return stim;
}

}  // namespace

DesignMatrix fictitious_design(const std::string& paradigm, int n_scans,
                               double tr, std::uint64_t seed) {
  if (n_scans < 1 || tr <= 0.0)
    throw ParameterError("fictitious_design: invalid scan window");
  const double window = n_scans * tr;
  StimulusSpec stim;
  double cycle = 0.0;
  if (paradigm == "B1") {
    stim = block_train(10.0, 10.0, window, "B1");
    cycle = 20.0;
  } else if (paradigm == "B2") {
    stim = block_train(30.0, 30.0, window, "B2");
    cycle = 60.0;
  } else if (paradigm == "E1") {
    stim = block_train(2.0, 6.0, window, "E1");
    cycle = 8.0;
  } else if (paradigm == "E2") {
    stim = randomized_events(window, seed);
    cycle = 10.0;  // mean cycle, for the window check
  } else {
    throw ParameterError("unknown paradigm: " + paradigm +
                         " (expected B1, B2, E1 or E2)");
  }
  if (window < 2.0 * cycle)
    throw ParameterError("fictitious_design: window too short for " +
                         paradigm);
  DesignMatrix design;
  design.tr = tr;
  design.task_names = {stim.name};
  design.values = expected_bold(stim, n_scans, tr);
  return design;
}

std::vector<DesignMatrix> fictitious_designs(int n_scans, double tr,
                                             std::uint64_t seed) {
  std::vector<DesignMatrix> out;
  for (const char* name : {"B1", "B2", "E1", "E2"})
    out.push_back(fictitious_design(name, n_scans, tr, seed));
  return out;
}

FprReport assess_fpr(const Bold4D& null_data, const DesignMatrix& design,
                     const ModelConfig& cfg, const MapOptions& opts) {
  if (std::none_of(null_data.mask.begin(), null_data.mask.end(),
                   [](std::uint8_t v) { return v; }))
    throw ConfigError("assess_fpr: empty mask");
  MapOptions run = opts;
  run.emit_summary = false;
  const SubjectMapResult mapped = map_subject(null_data, design, cfg, run);

  FprReport report;
  const std::vector<double>& grid = mapped.evidence.values.front();
  for (int k = 0; k < null_data.dims.z; ++k)
    for (int j = 0; j < null_data.dims.y; ++j)
      for (int i = 0; i < null_data.dims.x; ++i) {
        if (!null_data.in_mask(i, j, k)) continue;
        const double ev =
            grid[static_cast<std::size_t>(null_data.spatial_index(i, j, k))];
        report.evidence.push_back({{i, j, k}, ev});
        ++report.n_voxels;
        if (ev > opts.threshold) ++report.n_positive;
      }
  report.rate =
      static_cast<double>(report.n_positive) / report.n_voxels;
  return report;
}

}  // namespace mvdlm
