#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace mvdlm {

struct Dims3 {
  int x = 0, y = 0, z = 0;
  bool operator==(const Dims3&) const = default;
  std::int64_t count() const {
    return static_cast<std::int64_t>(x) * y * z;
  }
};

struct Voxel {
  int i = 0, j = 0, k = 0;
  bool operator==(const Voxel&) const = default;
};

/// Masked 4-D BOLD dataset: spatial grid x scans.
struct Bold4D {
  Dims3 dims;
  int n_scans = 0;
  std::array<float, 3> voxel_size = {1.f, 1.f, 1.f};  // mm
  double tr = 2.0;                                    // seconds
  std::vector<double> data;       // (i,j,k,t), i fastest
  std::vector<std::uint8_t> mask; // spatial grid, 1 = in-mask

  std::int64_t spatial_index(int i, int j, int k) const {
    return static_cast<std::int64_t>(i) +
           dims.x * (static_cast<std::int64_t>(j) + dims.y * k);
  }
  double& at(int i, int j, int k, int t) {
    return data[spatial_index(i, j, k) + dims.count() * t];
  }
  double at(int i, int j, int k, int t) const {
    return data[spatial_index(i, j, k) + dims.count() * t];
  }
  bool in_mask(int i, int j, int k) const {
    return mask[spatial_index(i, j, k)] != 0;
  }
};

/// Spatial header fields carried through read -> write round trips.
struct VolumeHeader {
  std::array<float, 3> voxel_size = {1.f, 1.f, 1.f};
  float tr = 2.f;
  std::array<float, 4> quatern = {0.f, 0.f, 0.f, 0.f};  // b,c,d + qfac
  std::array<float, 3> offset = {0.f, 0.f, 0.f};
  std::array<std::array<float, 4>, 3> srow = {};
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
};

/// Voxel cluster: center first, then the in-mask neighbors within
/// squared index distance r.
struct ClusterIndex {
  Voxel center;
  std::vector<Voxel> neighbors;  // center at index 0
  int q() const { return static_cast<int>(neighbors.size()); }
};

struct MaskExternal { std::string path; };
struct MaskMeanThreshold { double fraction = 0.25; };  // of robust max
struct MaskNonzeroVariance {};
using MaskStrategy =
    std::variant<MaskExternal, MaskMeanThreshold, MaskNonzeroVariance>;

/// NIfTI-1 single-file volume, optionally gzipped. Supported datatypes:
/// int16, float32, float64; scl_slope/scl_inter honored.
Bold4D read_volume(const std::string& path);
VolumeHeader read_header(const std::string& path);

/// Emits float32 NIfTI-1, preserving spatial fields of the template header.
/// 3-D when n_scans == 1.
void write_volume(const std::vector<double>& data, const Dims3& dims,
                  int n_scans, const VolumeHeader& header,
                  const std::string& path);
void write_volume(const Bold4D& vol, const std::string& path);

/// Applies the strategy; zero-variance voxels are always masked out.
/// Throws ConfigError when the resulting mask is empty.
std::vector<std::uint8_t> build_mask(const Bold4D& vol,
                                     const MaskStrategy& strategy);

/// Neighbors of `center` within squared Euclidean index distance r,
/// restricted to the mask; center listed first. On a full interior grid
/// |neighbors| = 7, 19, 27, 33 for r = 1..4.
ClusterIndex neighborhood(const Voxel& center, int r,
                          const std::vector<std::uint8_t>& mask,
                          const Dims3& dims);

/// T x q series, column n = series of neighbors[n]. With standardize on,
/// each column is centered and scaled to unit sample variance.
Eigen::MatrixXd extract_series(const Bold4D& vol, const ClusterIndex& cluster,
                               bool standardize = true);

/// Per-voxel posterior quantities kept for the group stage. All filter
/// times t = 1..T are stored; burn_in marks where the retained window of
/// the analysis starts.
struct SummaryRecord {
  Voxel voxel;
  int q = 0;
  // Times 1..T are rows. m_rows: T x (p*q), task-major; c_diag: T x p;
  // s: T x (q*q); n: T.
  Eigen::MatrixXd m_rows;
  Eigen::MatrixXd c_diag;
  Eigen::MatrixXd s;
  Eigen::VectorXd n;
};

struct SubjectSummary {
  Dims3 dims;
  int cluster_radius = 1;
  double beta = 0.95;
  std::vector<std::string> task_names;
  int burn_in = 30;       // first retained time (1-based)
  int n_times = 0;        // T
  bool standardized = true;
  std::string design_hash;
  std::vector<SummaryRecord> records;

  int retained() const { return n_times - burn_in + 1; }
};

void save_summary(const SubjectSummary& summary, const std::string& path);
SubjectSummary load_summary(const std::string& path);

/// Streaming reader over the per-voxel records of a summary file.
class SummaryReader {
 public:
  explicit SummaryReader(const std::string& path);
  ~SummaryReader();
  SummaryReader(const SummaryReader&) = delete;
  SummaryReader& operator=(const SummaryReader&) = delete;

  const SubjectSummary& meta() const { return meta_; }
  std::int64_t n_records() const { return n_records_; }
  /// Returns false at end of stream.
  bool next(SummaryRecord& out);

 private:
  struct Impl;
  Impl* impl_;
  SubjectSummary meta_;  // records empty
  std::int64_t n_records_ = 0;
};

}  // namespace mvdlm
