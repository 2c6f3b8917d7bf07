#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace mvdlm {

struct StimulusSpec {
  std::vector<double> onsets;     // seconds, strictly increasing
  std::vector<double> durations;  // seconds, positive
  std::string name;

  void validate() const;
};

/// Double-gamma hemodynamic response parameters (seconds unless noted).
struct HrfParams {
  double peak_delay = 6.0;
  double undershoot_delay = 16.0;
  double peak_dispersion = 1.0;
  double undershoot_dispersion = 1.0;
  double undershoot_ratio = 1.0 / 6.0;
  double length = 32.0;

  void validate() const;
};

struct DesignMatrix {
  Eigen::MatrixXd values;               // T x p
  double tr = 2.0;                      // repetition time, seconds
  std::vector<std::string> task_names;  // p labels

  int n_scans() const { return static_cast<int>(values.rows()); }
  int n_tasks() const { return static_cast<int>(values.cols()); }
};

/// Canonical HRF amplitude at time t, peak-normalized to max 1 over the
/// sampled support. Returns 0 for t < 0.
double canonical_hrf(double t, const HrfParams& params = {});

/// HRF sampled on a grid of spacing dt over [0, length], peak-normalized.
std::vector<double> hrf_kernel(double dt, const HrfParams& params = {});

/// Expected BOLD regressor: boxcar sampled at tr/upsample, convolved with
/// the HRF, downsampled to scan times, max-normalized when nonzero.
Eigen::VectorXd expected_bold(const StimulusSpec& stim, int n_scans, double tr,
                              const HrfParams& params = {}, int upsample = 16);

/// Content hash of a design (values, tr, task names); ties summaries to
/// the design they were fitted with.
std::string design_hash(const DesignMatrix& design);

/// Stimulus timing file: 2-3 whitespace/comma-separated columns
/// (onset, duration[, amplitude ignored]).
StimulusSpec load_stimulus(const std::string& path);

/// Design CSV with a header row of task names.
DesignMatrix load_design(const std::string& path, double tr);
void save_design(const DesignMatrix& design, const std::string& path);

}  // namespace mvdlm
