#include "mvdlm/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mvdlm/errors.hpp"

namespace mvdlm {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path, const char* mode) {
    f = gzopen(path.c_str(), mode);
  }
  ~GzFile() {
    if (f) gzclose(f);
  }
  operator gzFile() const { return f; }
};

void read_exact(gzFile f, void* buf, std::size_t len, const std::string& path) {
  const int got = gzread(f, buf, static_cast<unsigned>(len));
  if (got < 0 || static_cast<std::size_t>(got) != len)
    throw FormatError(path + ": truncated payload");
}

NiftiHeader read_nifti_header(gzFile f, const std::string& path) {
  NiftiHeader hdr{};
  read_exact(f, &hdr, sizeof(hdr), path);
  if (hdr.sizeof_hdr != 348)
    throw FormatError(path + ": bad sizeof_hdr (not a NIfTI-1 file)");
  if (std::strncmp(hdr.magic, "n+1", 3) != 0)
    throw FormatError(path + ": bad magic (expected single-file NIfTI-1)");
  if (hdr.datatype != kDtInt16 && hdr.datatype != kDtFloat32 &&
      hdr.datatype != kDtFloat64)
    throw FormatError(path + ": unsupported datatype " +
                      std::to_string(hdr.datatype));
  if (hdr.dim[0] < 3 || hdr.dim[0] > 4)
    throw FormatError(path + ": unsupported dimensionality " +
                      std::to_string(hdr.dim[0]));
  return hdr;
}

VolumeHeader to_volume_header(const NiftiHeader& hdr) {
  VolumeHeader out;
  out.voxel_size = {hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]};
  out.tr = hdr.pixdim[4];
  out.quatern = {hdr.quatern_b, hdr.quatern_c, hdr.quatern_d, hdr.pixdim[0]};
  out.offset = {hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z};
  for (int c = 0; c < 4; ++c) {
    out.srow[0][c] = hdr.srow_x[c];
    out.srow[1][c] = hdr.srow_y[c];
    out.srow[2][c] = hdr.srow_z[c];
  }
  out.qform_code = hdr.qform_code;
  out.sform_code = hdr.sform_code;
  return out;
}

}  // namespace

Bold4D read_volume(const std::string& path) {
  GzFile f(path, "rb");
  if (!f.f) throw FormatError("cannot open volume: " + path);
  const NiftiHeader hdr = read_nifti_header(f, path);

  Bold4D vol;
  vol.dims = {hdr.dim[1], hdr.dim[2], hdr.dim[3]};
  vol.n_scans = hdr.dim[0] == 4 ? hdr.dim[4] : 1;
  if (vol.dims.count() <= 0 || vol.n_scans < 1)
    throw FormatError(path + ": degenerate dimensions");
  vol.voxel_size = {hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]};
  vol.tr = hdr.pixdim[4] > 0 ? hdr.pixdim[4] : 2.0;

  // Skip any header extension up to vox_offset.
  const long target = static_cast<long>(hdr.vox_offset);
  if (target > 348) {
    std::vector<char> skip(static_cast<std::size_t>(target) - 348);
    read_exact(f, skip.data(), skip.size(), path);
  }

  const std::int64_t count = vol.dims.count() * vol.n_scans;
  const double slope = hdr.scl_slope != 0.f ? hdr.scl_slope : 1.0;
  const double inter = hdr.scl_slope != 0.f ? hdr.scl_inter : 0.0;
  vol.data.resize(count);
  if (hdr.datatype == kDtInt16) {
    std::vector<std::int16_t> raw(count);
    read_exact(f, raw.data(), raw.size() * sizeof(std::int16_t), path);
    for (std::int64_t i = 0; i < count; ++i)
      vol.data[i] = slope * raw[i] + inter;
  } else if (hdr.datatype == kDtFloat32) {
    std::vector<float> raw(count);
    read_exact(f, raw.data(), raw.size() * sizeof(float), path);
    for (std::int64_t i = 0; i < count; ++i)
      vol.data[i] = slope * raw[i] + inter;
  } else {
    std::vector<double> raw(count);
    read_exact(f, raw.data(), raw.size() * sizeof(double), path);
    for (std::int64_t i = 0; i < count; ++i)
      vol.data[i] = slope * raw[i] + inter;
  }
  vol.mask.assign(vol.dims.count(), 1);
  return vol;
}

VolumeHeader read_header(const std::string& path) {
  GzFile f(path, "rb");
  if (!f.f) throw FormatError("cannot open volume: " + path);
  return to_volume_header(read_nifti_header(f, path));
}

void write_volume(const std::vector<double>& data, const Dims3& dims,
                  int n_scans, const VolumeHeader& header,
                  const std::string& path) {
  if (static_cast<std::int64_t>(data.size()) != dims.count() * n_scans)
    throw ParameterError("write_volume: data size mismatch");

  NiftiHeader hdr{};
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = n_scans > 1 ? 4 : 3;
  hdr.dim[1] = static_cast<std::int16_t>(dims.x);
  hdr.dim[2] = static_cast<std::int16_t>(dims.y);
  hdr.dim[3] = static_cast<std::int16_t>(dims.z);
  hdr.dim[4] = static_cast<std::int16_t>(n_scans > 1 ? n_scans : 1);
  for (int i = hdr.dim[0] + 1; i < 8; ++i) hdr.dim[i] = 1;
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[0] = header.quatern[3];
  hdr.pixdim[1] = header.voxel_size[0];
  hdr.pixdim[2] = header.voxel_size[1];
  hdr.pixdim[3] = header.voxel_size[2];
  hdr.pixdim[4] = header.tr;
  hdr.vox_offset = 352.f;
  hdr.scl_slope = 1.f;
  hdr.scl_inter = 0.f;
  hdr.qform_code = header.qform_code;
  hdr.sform_code = header.sform_code;
  hdr.quatern_b = header.quatern[0];
  hdr.quatern_c = header.quatern[1];
  hdr.quatern_d = header.quatern[2];
  hdr.qoffset_x = header.offset[0];
  hdr.qoffset_y = header.offset[1];
  hdr.qoffset_z = header.offset[2];
  for (int c = 0; c < 4; ++c) {
    hdr.srow_x[c] = header.srow[0][c];
    hdr.srow_y[c] = header.srow[1][c];
    hdr.srow_z[c] = header.srow[2][c];
  }
  std::memcpy(hdr.magic, "n+1", 4);

  std::vector<float> raw(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    raw[i] = static_cast<float>(data[i]);
  const char pad[4] = {0, 0, 0, 0};

  const bool gz = path.size() > 3 && path.ends_with(".gz");
  if (gz) {
    GzFile f(path, "wb");
    if (!f.f) throw DataError("cannot write volume: " + path);
    if (gzwrite(f, &hdr, sizeof(hdr)) != sizeof(hdr) ||
        gzwrite(f, pad, 4) != 4 ||
        gzwrite(f, raw.data(),
                static_cast<unsigned>(raw.size() * sizeof(float))) !=
            static_cast<int>(raw.size() * sizeof(float)))
      throw DataError("short write: " + path);
  } else {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write volume: " + path);
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    out.write(pad, 4);
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!out) throw DataError("short write: " + path);
  }
}

void write_volume(const Bold4D& vol, const std::string& path) {
  VolumeHeader header;
  header.voxel_size = vol.voxel_size;
  header.tr = static_cast<float>(vol.tr);
  write_volume(vol.data, vol.dims, vol.n_scans, header, path);
}

namespace {

bool has_variance(const Bold4D& vol, std::int64_t sp) {
  const std::int64_t stride = vol.dims.count();
  const double first = vol.data[sp];
  for (int t = 1; t < vol.n_scans; ++t)
    if (vol.data[sp + stride * t] != first) return true;
  return false;
}

}  // namespace

std::vector<std::uint8_t> build_mask(const Bold4D& vol,
                                     const MaskStrategy& strategy) {
  const std::int64_t nvox = vol.dims.count();
  std::vector<std::uint8_t> mask(nvox, 0);

  if (const auto* ext = std::get_if<MaskExternal>(&strategy)) {
    const Bold4D m = read_volume(ext->path);
    if (m.dims != vol.dims)
      throw ConfigError("mask dimensions do not match the volume");
    for (std::int64_t i = 0; i < nvox; ++i) mask[i] = m.data[i] != 0.0 ? 1 : 0;
  } else if (const auto* thr = std::get_if<MaskMeanThreshold>(&strategy)) {
    std::vector<double> means(nvox, 0.0);
    const std::int64_t stride = nvox;
    for (std::int64_t i = 0; i < nvox; ++i) {
      double acc = 0.0;
      for (int t = 0; t < vol.n_scans; ++t) acc += vol.data[i + stride * t];
      means[i] = acc / vol.n_scans;
    }
    std::vector<double> sorted = means;
    std::sort(sorted.begin(), sorted.end());
    // robust max: 98th percentile of voxel means
    const double robust_max =
        sorted[static_cast<std::size_t>(0.98 * (sorted.size() - 1))];
    const double cut = thr->fraction * robust_max;
    for (std::int64_t i = 0; i < nvox; ++i) mask[i] = means[i] > cut ? 1 : 0;
  } else {
    for (std::int64_t i = 0; i < nvox; ++i) mask[i] = 1;
  }

  for (std::int64_t i = 0; i < nvox; ++i)
    if (mask[i] && !has_variance(vol, i)) mask[i] = 0;

  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v; }))
    throw ConfigError("mask is empty");
  return mask;
}

ClusterIndex neighborhood(const Voxel& center, int r,
                          const std::vector<std::uint8_t>& mask,
                          const Dims3& dims) {
  if (r < 1 || r > 4) throw ParameterError("neighborhood: r must be in 1..4");
  const auto idx = [&](int i, int j, int k) {
    return static_cast<std::int64_t>(i) +
           dims.x * (static_cast<std::int64_t>(j) + dims.y * k);
  };
  if (center.i < 0 || center.i >= dims.x || center.j < 0 ||
      center.j >= dims.y || center.k < 0 || center.k >= dims.z ||
      !mask[idx(center.i, center.j, center.k)])
    throw ParameterError("neighborhood: center is out of mask");

  ClusterIndex cluster;
  cluster.center = center;
  cluster.neighbors.push_back(center);
  const int reach = static_cast<int>(std::floor(std::sqrt(double(r))));
  for (int dk = -reach; dk <= reach; ++dk)
    for (int dj = -reach; dj <= reach; ++dj)
      for (int di = -reach; di <= reach; ++di) {
        if (di == 0 && dj == 0 && dk == 0) continue;
        if (di * di + dj * dj + dk * dk > r) continue;
        const int i = center.i + di, j = center.j + dj, k = center.k + dk;
        if (i < 0 || i >= dims.x || j < 0 || j >= dims.y || k < 0 ||
            k >= dims.z)
          continue;
        if (!mask[idx(i, j, k)]) continue;
        cluster.neighbors.push_back({i, j, k});
      }
  return cluster;
}

Eigen::MatrixXd extract_series(const Bold4D& vol, const ClusterIndex& cluster,
                               bool standardize) {
  const int q = cluster.q();
  Eigen::MatrixXd series(vol.n_scans, q);
  const std::int64_t stride = vol.dims.count();
  for (int n = 0; n < q; ++n) {
    const Voxel& v = cluster.neighbors[static_cast<std::size_t>(n)];
    const std::int64_t sp = vol.spatial_index(v.i, v.j, v.k);
    for (int t = 0; t < vol.n_scans; ++t)
      series(t, n) = vol.data[sp + stride * t];
  }
  if (standardize) {
    for (int n = 0; n < q; ++n) {
      const double mean = series.col(n).mean();
      series.col(n).array() -= mean;
      const double var =
          series.col(n).squaredNorm() / std::max(vol.n_scans - 1, 1);
      if (var > 0.0) series.col(n) /= std::sqrt(var);
    }
  }
  return series;
}

// ---------------------------------------------------------------------------
// Subject summary container: "MVDS" magic, version, JSON manifest, then
// sequential little-endian float64 records, one per voxel.

namespace {

constexpr char kSummaryMagic[4] = {'M', 'V', 'D', 'S'};
constexpr std::uint32_t kSummaryVersion = 1;

nlohmann::json summary_manifest(const SubjectSummary& s) {
  return nlohmann::json{
      {"dims", {s.dims.x, s.dims.y, s.dims.z}},
      {"cluster_radius", s.cluster_radius},
      {"beta", s.beta},
      {"task_names", s.task_names},
      {"burn_in", s.burn_in},
      {"n_times", s.n_times},
      {"standardized", s.standardized},
      {"design_hash", s.design_hash},
      {"n_records", s.records.size()},
  };
}

void manifest_to_meta(const nlohmann::json& j, SubjectSummary& s,
                      std::int64_t& n_records) {
  const auto d = j.at("dims");
  s.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
  s.cluster_radius = j.at("cluster_radius").get<int>();
  s.beta = j.at("beta").get<double>();
  s.task_names = j.at("task_names").get<std::vector<std::string>>();
  s.burn_in = j.at("burn_in").get<int>();
  s.n_times = j.at("n_times").get<int>();
  s.standardized = j.at("standardized").get<bool>();
  s.design_hash = j.at("design_hash").get<std::string>();
  n_records = j.at("n_records").get<std::int64_t>();
}

void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  // row-major stream so records read back row by row
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    out.write(reinterpret_cast<const char*>(
                  Eigen::RowVectorXd(m.row(i)).data()),
              static_cast<std::streamsize>(m.cols() * sizeof(double)));
}

void read_matrix(std::ifstream& in, Eigen::MatrixXd& m, const std::string& path) {
  std::vector<double> row(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(double)));
    if (!in) throw FormatError(path + ": truncated summary payload");
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = row[static_cast<std::size_t>(j)];
  }
}

}  // namespace

void save_summary(const SubjectSummary& summary, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write summary: " + path);

  const std::string manifest = summary_manifest(summary).dump();
  out.write(kSummaryMagic, 4);
  const std::uint32_t version = kSummaryVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const std::uint64_t len = manifest.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));

  const int p = static_cast<int>(summary.task_names.size());
  const int n_times = summary.n_times;
  for (const SummaryRecord& rec : summary.records) {
    if (rec.m_rows.rows() != n_times || rec.c_diag.cols() != p)
      throw DataError("save_summary: record shape inconsistent with manifest");
    const std::int32_t head[4] = {rec.voxel.i, rec.voxel.j, rec.voxel.k,
                                  rec.q};
    out.write(reinterpret_cast<const char*>(head), sizeof(head));
    write_matrix(out, rec.m_rows);
    write_matrix(out, rec.c_diag);
    write_matrix(out, rec.s);
    out.write(reinterpret_cast<const char*>(rec.n.data()),
              static_cast<std::streamsize>(rec.n.size() * sizeof(double)));
  }
  if (!out) throw DataError("short write: " + path);
}

struct SummaryReader::Impl {
  std::ifstream in;
  std::string path;
  std::int64_t remaining = 0;
  int p = 0;
  int n_times = 0;
};

SummaryReader::SummaryReader(const std::string& path) : impl_(new Impl) {
  impl_->path = path;
  impl_->in.open(path, std::ios::binary);
  if (!impl_->in) {
    delete impl_;
    throw FormatError("cannot open summary: " + path);
  }
  try {
    char magic[4];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    impl_->in.read(magic, 4);
    impl_->in.read(reinterpret_cast<char*>(&version), 4);
    impl_->in.read(reinterpret_cast<char*>(&len), 8);
    if (!impl_->in || std::memcmp(magic, kSummaryMagic, 4) != 0)
      throw FormatError(path + ": not a summary file");
    if (version != kSummaryVersion)
      throw FormatError(path + ": unsupported summary version " +
                        std::to_string(version));
    std::string manifest(len, '\0');
    impl_->in.read(manifest.data(), static_cast<std::streamsize>(len));
    if (!impl_->in) throw FormatError(path + ": truncated manifest");
    manifest_to_meta(nlohmann::json::parse(manifest), meta_, n_records_);
    impl_->remaining = n_records_;
    impl_->p = static_cast<int>(meta_.task_names.size());
    impl_->n_times = meta_.n_times;
    if (impl_->p < 1 || impl_->n_times < 1)
      throw FormatError(path + ": manifest/payload mismatch");
  } catch (...) {
    delete impl_;
    throw;
  }
}

SummaryReader::~SummaryReader() { delete impl_; }

bool SummaryReader::next(SummaryRecord& out) {
  if (impl_->remaining <= 0) return false;
  std::int32_t head[4];
  impl_->in.read(reinterpret_cast<char*>(head), sizeof(head));
  if (!impl_->in)
    throw FormatError(impl_->path + ": truncated summary payload");
  out.voxel = {head[0], head[1], head[2]};
  out.q = head[3];
  if (out.q < 1) throw FormatError(impl_->path + ": corrupt record header");
  const int r = impl_->n_times;
  const int p = impl_->p;
  out.m_rows.resize(r, static_cast<Eigen::Index>(p) * out.q);
  out.c_diag.resize(r, p);
  out.s.resize(r, static_cast<Eigen::Index>(out.q) * out.q);
  out.n.resize(r);
  read_matrix(impl_->in, out.m_rows, impl_->path);
  read_matrix(impl_->in, out.c_diag, impl_->path);
  read_matrix(impl_->in, out.s, impl_->path);
  impl_->in.read(reinterpret_cast<char*>(out.n.data()),
                 static_cast<std::streamsize>(r * sizeof(double)));
  if (!impl_->in)
    throw FormatError(impl_->path + ": truncated summary payload");
  --impl_->remaining;
  return true;
}

SubjectSummary load_summary(const std::string& path) {
  SummaryReader reader(path);
  SubjectSummary summary = reader.meta();
  summary.records.reserve(static_cast<std::size_t>(reader.n_records()));
  SummaryRecord rec;
  while (reader.next(rec)) summary.records.push_back(rec);
  return summary;
}

}  // namespace mvdlm
