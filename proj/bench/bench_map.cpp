// Times the OpenMP voxel mapper against the serial reference on a small
// phantom and checks that they agree bitwise.

#include <chrono>
#include <cstdio>
#include <string>

#include "mvdlm/design.hpp"
#include "mvdlm/simulate.hpp"
#include "mvdlm/trajectories.hpp"

using namespace mvdlm;

namespace {

double time_once(const char* label, const Bold4D& vol,
                 const DesignMatrix& design, const ModelConfig& cfg,
                 const MapOptions& opts, bool serial,
                 SubjectMapResult* out) {
  const auto start = std::chrono::steady_clock::now();
  *out = serial ? map_subject_serial(vol, design, cfg, opts)
                : map_subject(vol, design, cfg, opts);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  std::printf("  %-10s %7.2f s  (%.0f voxels/s)\n", label, secs,
              static_cast<double>(out->summary.records.size()) / secs);
  return secs;
}

}  // namespace

int main(int argc, char** argv) {
  const int side = argc > 1 ? std::stoi(argv[1]) : 14;
  const int n_scans = argc > 2 ? std::stoi(argv[2]) : 120;
  const int n_draws = argc > 3 ? std::stoi(argv[3]) : 200;

  const DesignMatrix design = fictitious_design("B1", n_scans, 2.0);
  PhantomSpec spec;
  spec.dims = {side, side, side};
  spec.regions = {{{side / 2.0, side / 2.0, side / 2.0}, side / 4.0, 250.0}};
  spec.snr = 10.0;
  const Phantom phantom = generate_phantom(spec, design);

  ModelConfig cfg;
  cfg.beta = Eigen::VectorXd::Constant(1, 0.95);
  MapOptions opts;
  opts.kind = EffectKind::Marginal;
  opts.n_draws = n_draws;
  opts.seed = 99;
  opts.emit_summary = true;

  std::printf("grid %d^3, %d scans, %d draws per voxel\n", side, n_scans,
              n_draws);
  bool all_match = true;
  for (Algorithm algo : {Algorithm::Fest, Algorithm::Fsts, Algorithm::Ffbs}) {
    opts.algorithm = algo;
    std::printf("%s:\n", to_string(algo).c_str());
    SubjectMapResult parallel, serial;
    const double tp = time_once("parallel", phantom.volume, design, cfg, opts,
                                false, &parallel);
    const double ts = time_once("serial", phantom.volume, design, cfg, opts,
                                true, &serial);
    const bool match = parallel.evidence.values == serial.evidence.values;
    all_match = all_match && match;
    std::printf("  speedup %.2fx, outputs %s\n", ts / tp,
                match ? "identical" : "DIFFER");
  }
  return all_match ? 0 : 1;
}
