// Command-line front end: design building, subject fitting, group maps,
// phantom simulation and false-positive assessment.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvdlm/design.hpp"
#include "mvdlm/dlm.hpp"
#include "mvdlm/errors.hpp"
#include "mvdlm/group.hpp"
#include "mvdlm/simulate.hpp"
#include "mvdlm/trajectories.hpp"
#include "mvdlm/volume.hpp"

namespace {

using nlohmann::json;

struct RunConfig {
  int cluster_radius = 1;
  double beta = 0.95;
  std::string algorithm = "fest";
  std::string kind = "average";
  int n_draws = 1000;
  double threshold = 0.95;
  int burn_in = 30;
  std::uint64_t seed = 0;
  int workers = 0;
  double v_scale = 1.0;
  double prior_c_scale = 100.0;
  double prior_n = 1.0;
  bool standardize = true;

  void validate() const {
    if (cluster_radius < 1 || cluster_radius > 4)
      throw mvdlm::ParameterError("r must be in 1..4");
    if (!(beta > 0.0) || beta > 1.0)
      throw mvdlm::ParameterError("beta must be in (0, 1]");
    if (!(threshold > 0.0) || threshold > 1.0)
      throw mvdlm::ParameterError("threshold must be in (0, 1]");
    if (n_draws < 1) throw mvdlm::ParameterError("N must be >= 1");
    if (burn_in < 1) throw mvdlm::ParameterError("burn_in must be >= 1");
  }

  json to_json() const {
    return json{{"r", cluster_radius},   {"beta", beta},
                {"algorithm", algorithm}, {"kind", kind},
                {"n_draws", n_draws},     {"threshold", threshold},
                {"burn_in", burn_in},     {"seed", seed},
                {"workers", workers},     {"v_scale", v_scale},
                {"prior_c_scale", prior_c_scale},
                {"prior_n", prior_n},     {"standardize", standardize}};
  }

  void from_json(const json& j) {
    cluster_radius = j.value("r", cluster_radius);
    beta = j.value("beta", beta);
    algorithm = j.value("algorithm", algorithm);
    kind = j.value("kind", kind);
    n_draws = j.value("n_draws", n_draws);
    threshold = j.value("threshold", threshold);
    burn_in = j.value("burn_in", burn_in);
    seed = j.value("seed", seed);
    workers = j.value("workers", workers);
    v_scale = j.value("v_scale", v_scale);
    prior_c_scale = j.value("prior_c_scale", prior_c_scale);
    prior_n = j.value("prior_n", prior_n);
    standardize = j.value("standardize", standardize);
  }

  mvdlm::ModelConfig model_config(int p) const {
    mvdlm::ModelConfig cfg;
    cfg.beta = Eigen::VectorXd::Constant(p, beta);
    cfg.v_scale = v_scale;
    cfg.prior_c_scale = prior_c_scale;
    cfg.prior_n = prior_n;
    cfg.burn_in = burn_in;
    return cfg;
  }

  mvdlm::MapOptions map_options() const {
    mvdlm::MapOptions opts;
    opts.algorithm = mvdlm::algorithm_from_string(algorithm);
    opts.kind = mvdlm::effect_kind_from_string(kind);
    opts.n_draws = n_draws;
    opts.threshold = threshold;
    opts.seed = seed;
    opts.workers = workers;
    opts.cluster_radius = cluster_radius;
    opts.standardize = standardize;
    return opts;
  }
};

void add_run_options(CLI::App* cmd, RunConfig& cfg, std::string& config_path) {
  cmd->add_option("--config", config_path, "JSON config file (flags override)");
  cmd->add_option("-r,--radius", cfg.cluster_radius, "cluster radius (1..4)");
  cmd->add_option("--beta", cfg.beta, "discount factor in (0,1]");
  cmd->add_option("--algorithm", cfg.algorithm, "fest | fsts | ffbs");
  cmd->add_option("--kind", cfg.kind, "marginal | average | joint");
  cmd->add_option("-N,--draws", cfg.n_draws, "Monte Carlo draws");
  cmd->add_option("--threshold", cfg.threshold, "activation threshold");
  cmd->add_option("--burn-in", cfg.burn_in, "first retained time index");
  cmd->add_option("--seed", cfg.seed, "global RNG seed");
  cmd->add_option("--workers", cfg.workers,
                  "worker threads (0 = all; env MVDLM_WORKERS)");
  cmd->add_option("--v-scale", cfg.v_scale, "observational scale");
  cmd->add_option("--prior-c-scale", cfg.prior_c_scale, "prior C0 scale");
  cmd->add_option("--prior-n", cfg.prior_n, "prior degrees of freedom");
  cmd->add_flag("--no-standardize", [&cfg](std::int64_t) {
    cfg.standardize = false;
  }, "disable per-column series standardization");
}

// Config file first, then re-parse so explicit flags win.
void apply_config_file(CLI::App* cmd, RunConfig& cfg,
                       const std::string& config_path) {
  if (config_path.empty()) return;
  std::ifstream in(config_path);
  if (!in) throw mvdlm::ConfigError("cannot open config: " + config_path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw mvdlm::ConfigError("bad config JSON: " + std::string(e.what()));
  }
  RunConfig base;
  base.from_json(j);
  // keep values for options the user did not pass on the command line
  const auto keep = [&](const std::string& name, auto member) {
    if (cmd->count(name) == 0) cfg.*member = base.*member;
  };
  keep("--radius", &RunConfig::cluster_radius);
  keep("--beta", &RunConfig::beta);
  keep("--algorithm", &RunConfig::algorithm);
  keep("--kind", &RunConfig::kind);
  keep("--draws", &RunConfig::n_draws);
  keep("--threshold", &RunConfig::threshold);
  keep("--burn-in", &RunConfig::burn_in);
  keep("--seed", &RunConfig::seed);
  keep("--workers", &RunConfig::workers);
  keep("--v-scale", &RunConfig::v_scale);
  keep("--prior-c-scale", &RunConfig::prior_c_scale);
  keep("--prior-n", &RunConfig::prior_n);
  if (cmd->count("--no-standardize") == 0)
    cfg.standardize = base.standardize;
}

void resolve_workers(RunConfig& cfg) {
  if (cfg.workers == 0) {
    if (const char* env = std::getenv("MVDLM_WORKERS"))
      cfg.workers = std::atoi(env);
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_manifest(const std::string& out_prefix, const std::string& command,
                    const RunConfig& cfg, const json& extra) {
  json manifest{{"tool", "mvdlm"},
                {"version", 1},
                {"command", command},
                {"config", cfg.to_json()}};
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a(cfg.to_json().dump())));
  manifest["config_hash"] = hash;
  for (auto it = extra.begin(); it != extra.end(); ++it)
    manifest[it.key()] = it.value();
  std::ofstream out(out_prefix + ".manifest.json");
  out << manifest.dump(2) << '\n';
}

void write_failures(const std::string& out_prefix,
                    const std::vector<mvdlm::VoxelFailure>& failures) {
  if (failures.empty()) return;
  std::ofstream out(out_prefix + "_failures.log");
  for (const auto& f : failures)
    out << f.voxel.i << ' ' << f.voxel.j << ' ' << f.voxel.k << ' '
        << f.message << '\n';
  std::cerr << failures.size() << " voxel(s) failed; see " << out_prefix
            << "_failures.log\n";
}

void write_evidence_outputs(const mvdlm::EvidenceVolume& evidence,
                            const mvdlm::VolumeHeader& header,
                            const RunConfig& cfg,
                            const std::string& out_prefix, bool csv) {
  for (std::size_t l = 0; l < evidence.values.size(); ++l) {
    const std::string stem = out_prefix + "_" + evidence.task_names[l] + "_" +
                             cfg.algorithm + "_" + cfg.kind;
    mvdlm::write_volume(evidence.values[l], evidence.dims, 1, header,
                        stem + ".nii.gz");
    if (csv) {
      std::ofstream out(stem + ".csv");
      out << "i,j,k,evidence\n";
      for (int k = 0; k < evidence.dims.z; ++k)
        for (int j = 0; j < evidence.dims.y; ++j)
          for (int i = 0; i < evidence.dims.x; ++i) {
            const auto idx = static_cast<std::size_t>(
                i + evidence.dims.x *
                        (static_cast<std::int64_t>(j) + evidence.dims.y * k));
            out << i << ',' << j << ',' << k << ','
                << evidence.values[l][idx] << '\n';
          }
    }
  }
}

json resolved_echo(const RunConfig& cfg) { return cfg.to_json(); }

// ---------------------------------------------------------------------------

int cmd_design(const std::vector<std::string>& stimuli, double tr, int n_scans,
               const mvdlm::HrfParams& hrf, int upsample,
               const std::string& out) {
  if (stimuli.empty())
    throw mvdlm::ParameterError("design: at least one stimulus file required");
  mvdlm::DesignMatrix design;
  design.tr = tr;
  design.values.resize(n_scans, static_cast<Eigen::Index>(stimuli.size()));
  for (std::size_t s = 0; s < stimuli.size(); ++s) {
    const mvdlm::StimulusSpec stim = mvdlm::load_stimulus(stimuli[s]);
    design.task_names.push_back(stim.name);
    design.values.col(static_cast<Eigen::Index>(s)) =
        mvdlm::expected_bold(stim, n_scans, tr, hrf, upsample);
  }
  mvdlm::save_design(design, out);
  std::cout << "wrote " << out << " (" << n_scans << " scans x "
            << stimuli.size() << " tasks, hash "
            << mvdlm::design_hash(design) << ")\n";
  return 0;
}

int cmd_fit(const std::string& bold_path, const std::string& mask_path,
            const std::string& mask_strategy, const std::string& design_path,
            double tr, const RunConfig& cfg, const std::string& out_prefix,
            bool csv, bool no_summary) {
  cfg.validate();
  mvdlm::Bold4D vol = mvdlm::read_volume(bold_path);
  if (tr > 0) vol.tr = tr;
  const mvdlm::VolumeHeader header = mvdlm::read_header(bold_path);
  const mvdlm::DesignMatrix design = mvdlm::load_design(design_path, vol.tr);

  mvdlm::MaskStrategy strategy = mvdlm::MaskNonzeroVariance{};
  if (!mask_path.empty()) strategy = mvdlm::MaskExternal{mask_path};
  else if (mask_strategy == "mean") strategy = mvdlm::MaskMeanThreshold{};
  vol.mask = mvdlm::build_mask(vol, strategy);

  mvdlm::MapOptions opts = cfg.map_options();
  opts.emit_summary = !no_summary;
  std::cout << "fit: " << resolved_echo(cfg).dump() << '\n';
  const mvdlm::SubjectMapResult result =
      mvdlm::map_subject(vol, design, cfg.model_config(design.n_tasks()), opts);

  write_evidence_outputs(result.evidence, header, cfg, out_prefix, csv);
  if (!no_summary)
    mvdlm::save_summary(result.summary, out_prefix + ".mvdlm");
  write_failures(out_prefix, result.failures);
  write_manifest(out_prefix, "fit", cfg,
                 json{{"bold", bold_path},
                      {"design", design_path},
                      {"design_hash", mvdlm::design_hash(design)}});
  return 0;
}

int cmd_group(const std::vector<std::string>& summaries,
              const std::vector<std::string>& group_b,
              const std::string& design_path, double tr, const RunConfig& cfg,
              const std::string& out_prefix, bool csv) {
  cfg.validate();
  std::optional<mvdlm::DesignMatrix> design;
  if (!design_path.empty())
    design = mvdlm::load_design(design_path, tr > 0 ? tr : 2.0);
  const mvdlm::DesignMatrix* design_ptr = design ? &*design : nullptr;

  std::cout << "group: " << resolved_echo(cfg).dump() << '\n';
  const int p = static_cast<int>(
      mvdlm::SummaryReader(summaries.front()).meta().task_names.size());
  const mvdlm::ModelConfig model = cfg.model_config(p);
  mvdlm::GroupMapResult result =
      group_b.empty()
          ? mvdlm::map_group(summaries, design_ptr, model, cfg.map_options())
          : mvdlm::map_group_contrast(summaries, group_b, design_ptr, model,
                                      cfg.map_options());

  mvdlm::VolumeHeader header;
  write_evidence_outputs(result.evidence, header, cfg, out_prefix, csv);
  write_failures(out_prefix, result.failures);
  write_manifest(out_prefix, "group", cfg,
                 json{{"summaries", summaries},
                      {"group_b", group_b},
                      {"contrast", !group_b.empty()}});
  return 0;
}

int cmd_simulate(const std::string& spec_path, const std::string& design_path,
                 double tr, const std::string& out_prefix) {
  std::ifstream in(spec_path);
  if (!in) throw mvdlm::ConfigError("cannot open phantom spec: " + spec_path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw mvdlm::ConfigError("bad phantom spec JSON: " +
                             std::string(e.what()));
  }

  mvdlm::PhantomSpec spec;
  if (j.contains("dims"))
    spec.dims = {j["dims"].at(0).get<int>(), j["dims"].at(1).get<int>(),
                 j["dims"].at(2).get<int>()};
  spec.snr = j.value("snr", spec.snr);
  spec.baseline = j.value("baseline", spec.baseline);
  spec.seed = j.value("seed", spec.seed);
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    if (n.value("model", "white") == std::string("ar1"))
      spec.noise = mvdlm::NoiseAr1{n.value("coefficient", 0.4)};
  }
  for (const auto& region : j.value("regions", json::array())) {
    mvdlm::SphereRegion r;
    r.center = {region.at("center").at(0).get<double>(),
                region.at("center").at(1).get<double>(),
                region.at("center").at(2).get<double>()};
    r.radius = region.at("radius").get<double>();
    r.effect = region.value("effect", 250.0);
    spec.regions.push_back(r);
  }

  const mvdlm::DesignMatrix design = mvdlm::load_design(design_path, tr);
  const mvdlm::Phantom phantom = mvdlm::generate_phantom(spec, design);
  mvdlm::write_volume(phantom.volume, out_prefix + "_bold.nii.gz");

  std::vector<double> truth(phantom.truth.begin(), phantom.truth.end());
  mvdlm::VolumeHeader header;
  header.tr = static_cast<float>(design.tr);
  mvdlm::write_volume(truth, spec.dims, 1, header, out_prefix + "_truth.nii.gz");

  RunConfig cfg;
  cfg.seed = spec.seed;
  write_manifest(out_prefix, "simulate", cfg,
                 json{{"spec", spec_path}, {"design", design_path}});
  std::cout << "wrote " << out_prefix << "_bold.nii.gz and truth mask\n";
  return 0;
}

int cmd_assess(const std::string& bold_path, const std::string& paradigm,
               int gen_dim, int gen_scans, double tr, double ar1,
               const RunConfig& cfg, const std::string& out_prefix) {
  cfg.validate();
  mvdlm::Bold4D vol;
  if (!bold_path.empty()) {
    vol = mvdlm::read_volume(bold_path);
    if (tr > 0) vol.tr = tr;
    vol.mask = mvdlm::build_mask(vol, mvdlm::MaskNonzeroVariance{});
  } else {
    mvdlm::NoiseModel noise = mvdlm::NoiseWhite{};
    if (ar1 != 0.0) noise = mvdlm::NoiseAr1{ar1};
    vol = mvdlm::generate_resting({gen_dim, gen_dim, gen_dim}, gen_scans,
                                  tr > 0 ? tr : 2.0, noise, cfg.seed);
  }
  const mvdlm::DesignMatrix design =
      mvdlm::fictitious_design(paradigm, vol.n_scans, vol.tr, cfg.seed);

  std::cout << "assess: paradigm " << paradigm << ' '
            << resolved_echo(cfg).dump() << '\n';
  const mvdlm::FprReport report = mvdlm::assess_fpr(
      vol, design, cfg.model_config(1), cfg.map_options());

  std::ofstream out(out_prefix + "_fpr.csv");
  out << "i,j,k,evidence\n";
  for (const auto& [v, ev] : report.evidence)
    out << v.i << ',' << v.j << ',' << v.k << ',' << ev << '\n';
  write_manifest(out_prefix, "assess", cfg,
                 json{{"paradigm", paradigm},
                      {"rate", report.rate},
                      {"n_voxels", report.n_voxels},
                      {"n_positive", report.n_positive}});
  std::cout << "false-positive rate at " << cfg.threshold << ": "
            << report.rate << " (" << report.n_positive << '/'
            << report.n_voxels << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian matrix-variate DLM activation mapping for fMRI"};
  app.require_subcommand(1);

  // design
  auto* design_cmd =
      app.add_subcommand("design", "build an expected-BOLD design matrix");
  std::vector<std::string> stimuli;
  double d_tr = 2.0;
  int d_scans = 0;
  int d_upsample = 16;
  mvdlm::HrfParams hrf;
  std::string d_out = "design.csv";
  design_cmd->add_option("--stimulus", stimuli, "timing file (repeatable)")
      ->required();
  design_cmd->add_option("--tr", d_tr, "repetition time (s)");
  design_cmd->add_option("--n-scans", d_scans, "number of scans")->required();
  design_cmd->add_option("--upsample", d_upsample, "microtime upsampling");
  design_cmd->add_option("--hrf-peak-delay", hrf.peak_delay, "");
  design_cmd->add_option("--hrf-undershoot-delay", hrf.undershoot_delay, "");
  design_cmd->add_option("--hrf-peak-dispersion", hrf.peak_dispersion, "");
  design_cmd->add_option("--hrf-undershoot-dispersion",
                         hrf.undershoot_dispersion, "");
  design_cmd->add_option("--hrf-ratio", hrf.undershoot_ratio, "");
  design_cmd->add_option("--hrf-length", hrf.length, "");
  design_cmd->add_option("-o,--out", d_out, "output CSV");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "subject-level evidence map");
  std::string f_bold, f_mask, f_mask_strategy = "variance", f_design;
  double f_tr = 0.0;
  std::string f_out = "subject";
  bool f_csv = false, f_no_summary = false;
  RunConfig f_cfg;
  std::string f_config_path;
  fit_cmd->add_option("--bold", f_bold, "4-D BOLD NIfTI")->required();
  fit_cmd->add_option("--mask", f_mask, "mask NIfTI");
  fit_cmd->add_option("--mask-strategy", f_mask_strategy,
                      "variance | mean (ignored with --mask)");
  fit_cmd->add_option("--design", f_design, "design CSV")->required();
  fit_cmd->add_option("--tr", f_tr, "override TR (s)");
  fit_cmd->add_option("-o,--out", f_out, "output prefix");
  fit_cmd->add_flag("--csv", f_csv, "also write per-voxel CSV");
  fit_cmd->add_flag("--no-summary", f_no_summary, "skip the subject summary");
  add_run_options(fit_cmd, f_cfg, f_config_path);

  // group
  auto* group_cmd = app.add_subcommand("group", "group / contrast evidence map");
  std::vector<std::string> g_summaries, g_group_b;
  std::string g_design;
  double g_tr = 0.0;
  std::string g_out = "group";
  bool g_csv = false;
  RunConfig g_cfg;
  std::string g_config_path;
  group_cmd->add_option("--summary", g_summaries,
                        "subject summary (repeatable; group A for contrasts)")
      ->required();
  group_cmd->add_option("--summary-b", g_group_b,
                        "group B summaries (enables A-B contrast)");
  group_cmd->add_option("--design", g_design, "shared design CSV (fest)");
  group_cmd->add_option("--tr", g_tr, "design TR (s)");
  group_cmd->add_option("-o,--out", g_out, "output prefix");
  group_cmd->add_flag("--csv", g_csv, "also write per-voxel CSV");
  add_run_options(group_cmd, g_cfg, g_config_path);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "synthetic phantom volume");
  std::string s_spec, s_design;
  double s_tr = 2.0;
  std::string s_out = "phantom";
  sim_cmd->add_option("--spec", s_spec, "phantom spec JSON")->required();
  sim_cmd->add_option("--design", s_design, "design CSV")->required();
  sim_cmd->add_option("--tr", s_tr, "design TR (s)");
  sim_cmd->add_option("-o,--out", s_out, "output prefix");

  // assess
  auto* assess_cmd =
      app.add_subcommand("assess", "false-positive rate on null data");
  std::string a_bold, a_paradigm = "B1";
  int a_dim = 12, a_scans = 200;
  double a_tr = 2.0, a_ar1 = 0.0;
  std::string a_out = "assess";
  RunConfig a_cfg;
  std::string a_config_path;
  assess_cmd->add_option("--bold", a_bold,
                         "null volume (omit to generate noise)");
  assess_cmd->add_option("--paradigm", a_paradigm, "B1 | B2 | E1 | E2");
  assess_cmd->add_option("--dim", a_dim, "generated grid edge length");
  assess_cmd->add_option("--n-scans", a_scans, "generated scan count");
  assess_cmd->add_option("--tr", a_tr, "repetition time (s)");
  assess_cmd->add_option("--ar1", a_ar1, "AR(1) coefficient for generation");
  assess_cmd->add_option("-o,--out", a_out, "output prefix");
  add_run_options(assess_cmd, a_cfg, a_config_path);

  try {
    app.parse(argc, argv);
    if (fit_cmd->parsed()) {
      apply_config_file(fit_cmd, f_cfg, f_config_path);
      resolve_workers(f_cfg);
      return cmd_fit(f_bold, f_mask, f_mask_strategy, f_design, f_tr, f_cfg,
                     f_out, f_csv, f_no_summary);
    }
    if (group_cmd->parsed()) {
      apply_config_file(group_cmd, g_cfg, g_config_path);
      resolve_workers(g_cfg);
      return cmd_group(g_summaries, g_group_b, g_design, g_tr, g_cfg, g_out,
                       g_csv);
    }
    if (design_cmd->parsed())
      return cmd_design(stimuli, d_tr, d_scans, hrf, d_upsample, d_out);
    if (sim_cmd->parsed()) return cmd_simulate(s_spec, s_design, s_tr, s_out);
    if (assess_cmd->parsed()) {
      apply_config_file(assess_cmd, a_cfg, a_config_path);
      resolve_workers(a_cfg);
      return cmd_assess(a_bold, a_paradigm, a_dim, a_scans, a_tr, a_ar1, a_cfg,
                        a_out);
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const mvdlm::ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return 2;
  } catch (const mvdlm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const mvdlm::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const mvdlm::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const mvdlm::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
