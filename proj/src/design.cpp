#include "mvdlm/design.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mvdlm/errors.hpp"

namespace mvdlm {

namespace {

// Gamma density with shape a, scale b.
double gamma_pdf(double t, double a, double b) {
  if (t <= 0.0) return 0.0;
  return std::exp((a - 1.0) * std::log(t) - t / b - std::lgamma(a) -
                  a * std::log(b));
}

double hrf_raw(double t, const HrfParams& p) {
  if (t < 0.0) return 0.0;
  const double a1 = p.peak_delay / p.peak_dispersion;
  const double a2 = p.undershoot_delay / p.undershoot_dispersion;
  return gamma_pdf(t, a1, p.peak_dispersion) -
         p.undershoot_ratio * gamma_pdf(t, a2, p.undershoot_dispersion);
}

double hrf_peak(const HrfParams& p) {
  double peak = 0.0;
  for (double t = 0.0; t <= p.length; t += 0.01)
    peak = std::max(peak, hrf_raw(t, p));
  return peak;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',' || ch == ' ' || ch == '\t' || ch == '\r') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

double parse_number(const std::string& field, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(field, &pos);
    if (pos != field.size() || !std::isfinite(v))
      throw FormatError("non-numeric cell at " + where + ": '" + field + "'");
    return v;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception&) {
    throw FormatError("non-numeric cell at " + where + ": '" + field + "'");
  }
}

}  // namespace

void StimulusSpec::validate() const {
  if (onsets.size() != durations.size())
    throw ParameterError("stimulus '" + name + "': onset/duration length mismatch");
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    if (onsets[i] < 0.0)
      throw ParameterError("stimulus '" + name + "': negative onset");
    if (durations[i] <= 0.0)
      throw ParameterError("stimulus '" + name + "': non-positive duration");
    if (i > 0 && onsets[i] <= onsets[i - 1])
      throw ParameterError("stimulus '" + name + "': onsets not increasing");
  }
}

void HrfParams::validate() const {
  if (peak_delay <= 0 || undershoot_delay <= 0 || peak_dispersion <= 0 ||
      undershoot_dispersion <= 0 || undershoot_ratio <= 0 || length <= 0)
    throw ParameterError("hrf: parameters must be positive");
  if (length < undershoot_delay)
    throw ParameterError("hrf: length must cover the undershoot delay");
}

double canonical_hrf(double t, const HrfParams& params) {
  params.validate();
  if (t < 0.0) return 0.0;
  const double peak = hrf_peak(params);
  return hrf_raw(t, params) / peak;
}

std::vector<double> hrf_kernel(double dt, const HrfParams& params) {
  params.validate();
  if (dt <= 0.0) throw ParameterError("hrf_kernel: dt must be positive");
  const int n = static_cast<int>(std::floor(params.length / dt)) + 1;
  std::vector<double> kernel(n);
  double peak = 0.0;
  for (int i = 0; i < n; ++i) {
    kernel[i] = hrf_raw(i * dt, params);
    peak = std::max(peak, kernel[i]);
  }
  if (peak > 0.0)
    for (double& v : kernel) v /= peak;
  return kernel;
}

Eigen::VectorXd expected_bold(const StimulusSpec& stim, int n_scans, double tr,
                              const HrfParams& params, int upsample) {
  stim.validate();
  if (n_scans < 1 || tr <= 0.0 || upsample < 1)
    throw ParameterError("expected_bold: invalid sampling parameters");

  const double dt = tr / upsample;
  const int n_fine = n_scans * upsample;
  std::vector<double> boxcar(n_fine, 0.0);
  for (std::size_t k = 0; k < stim.onsets.size(); ++k) {
    const int lo = static_cast<int>(std::ceil(stim.onsets[k] / dt - 1e-9));
    // half-open [onset, onset + duration): first sample at or past the
    // offset is excluded
    int hi = static_cast<int>(
        std::ceil((stim.onsets[k] + stim.durations[k]) / dt - 1e-9));
    hi = std::max(hi, lo + 1);  // sub-sample events still occupy one sample
    for (int i = std::max(lo, 0); i < std::min(hi, n_fine); ++i) boxcar[i] = 1.0;
  }

  const std::vector<double> kernel = hrf_kernel(dt, params);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n_scans);
  double peak = 0.0;
  for (int s = 0; s < n_scans; ++s) {
    const int i = s * upsample;  // fine-grid index of scan s
    double acc = 0.0;
    const int kmax = std::min<int>(static_cast<int>(kernel.size()), i + 1);
    for (int j = 0; j < kmax; ++j) acc += kernel[j] * boxcar[i - j];
    out[s] = acc * dt;
    peak = std::max(peak, std::abs(out[s]));
  }
  if (peak > 0.0) out /= peak;
  return out;
}

std::string design_hash(const DesignMatrix& design) {
  // FNV-1a over the raw matrix bytes, tr and names
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (Eigen::Index i = 0; i < design.values.rows(); ++i)
    for (Eigen::Index j = 0; j < design.values.cols(); ++j) {
      const double v = design.values(i, j);
      mix(&v, sizeof(v));
    }
  mix(&design.tr, sizeof(design.tr));
  for (const std::string& name : design.task_names)
    mix(name.data(), name.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

StimulusSpec load_stimulus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open stimulus file: " + path);
  StimulusSpec spec;
  spec.name = std::filesystem::path(path).stem().string();
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields.size() < 2 || fields.size() > 3)
      throw FormatError(path + ": row " + std::to_string(row) +
                        ": expected 2-3 columns, got " +
                        std::to_string(fields.size()));
    const std::string where = path + ":" + std::to_string(row);
    spec.onsets.push_back(parse_number(fields[0], where));
    spec.durations.push_back(parse_number(fields[1], where));
  }
  spec.validate();
  return spec;
}

DesignMatrix load_design(const std::string& path, double tr) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open design file: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path + ": empty design file");

  DesignMatrix design;
  design.tr = tr;
  {
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
      while (!field.empty() && (field.back() == '\r' || field.back() == ' '))
        field.pop_back();
      design.task_names.push_back(field);
    }
  }
  const std::size_t p = design.task_names.size();
  if (p == 0) throw FormatError(path + ": no task columns in header");

  std::vector<std::vector<double>> rows;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    std::vector<double> vals;
    std::stringstream ss(line);
    std::string field;
    int col = 0;
    while (std::getline(ss, field, ',')) {
      ++col;
      while (!field.empty() && (field.back() == '\r' || field.back() == ' '))
        field.pop_back();
      vals.push_back(parse_number(field, path + ":" + std::to_string(row) +
                                             ":col" + std::to_string(col)));
    }
    if (vals.size() != p)
      throw FormatError(path + ": ragged row " + std::to_string(row) +
                        " (expected " + std::to_string(p) + " columns, got " +
                        std::to_string(vals.size()) + ")");
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw FormatError(path + ": no data rows");

  design.values.resize(static_cast<Eigen::Index>(rows.size()),
                       static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < p; ++j)
      design.values(static_cast<Eigen::Index>(i),
                    static_cast<Eigen::Index>(j)) = rows[i][j];
  return design;
}

void save_design(const DesignMatrix& design, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write design file: " + path);
  for (std::size_t j = 0; j < design.task_names.size(); ++j) {
    if (j) out << ',';
    out << design.task_names[j];
  }
  out << '\n';
  out << std::setprecision(17);
  for (Eigen::Index i = 0; i < design.values.rows(); ++i) {
    for (Eigen::Index j = 0; j < design.values.cols(); ++j) {
      if (j) out << ',';
      out << design.values(i, j);
    }
    out << '\n';
  }
}

}  // namespace mvdlm
