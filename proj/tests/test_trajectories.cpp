#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "mvdlm/design.hpp"
#include "mvdlm/dlm.hpp"
#include "mvdlm/errors.hpp"
#include "mvdlm/rng.hpp"
#include "mvdlm/trajectories.hpp"

using namespace mvdlm;

namespace {

ModelConfig make_config(double beta, int p = 1, int burn_in = 1) {
  ModelConfig cfg;
  cfg.beta = Eigen::VectorXd::Constant(p, beta);
  cfg.burn_in = burn_in;
  return cfg;
}

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> gauss;
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = gauss(rng);
  return m;
}

PosteriorState random_state(int p, int q, Rng& rng) {
  PosteriorState st;
  st.m = random_matrix(p, q, rng);
  const Eigen::MatrixXd a = random_matrix(p, p, rng);
  st.c = a * a.transpose() + Eigen::MatrixXd::Identity(p, p);
  const Eigen::MatrixXd b = random_matrix(q, q, rng);
  st.s = b * b.transpose() + Eigen::MatrixXd::Identity(q, q);
  st.n = 5.0;
  return st;
}

EffectTrajectory traj_from(const std::vector<double>& values) {
  EffectTrajectory t;
  t.values.resize(static_cast<Eigen::Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i)
    t.values(static_cast<Eigen::Index>(i), 0) = values[i];
  return t;
}

}  // namespace

TEST_CASE("names round trip through the string forms") {
  for (EffectKind kind :
       {EffectKind::Marginal, EffectKind::AverageCluster, EffectKind::Joint})
    CHECK(effect_kind_from_string(to_string(kind)) == kind);
  for (Algorithm algo : {Algorithm::Fest, Algorithm::Fsts, Algorithm::Ffbs})
    CHECK(algorithm_from_string(to_string(algo)) == algo);
  CHECK_THROWS_AS(effect_kind_from_string("typo"), ParameterError);
  CHECK_THROWS_AS(algorithm_from_string("typo"), ParameterError);
}

TEST_CASE("effect projections on a handmade state") {
  PosteriorState st;
  st.m.resize(2, 3);
  st.m << 1, 2, 3, 4, 5, 6;
  st.c.resize(2, 2);
  st.c << 2, 0.5, 0.5, 3;
  st.s.resize(3, 3);
  st.s << 1, 0.1, 0.2, 0.1, 2, 0.3, 0.2, 0.3, 3;
  st.n = 10;

  const EffectDistribution marg = effect_projection(st, 1, EffectKind::Marginal);
  CHECK(marg.dim() == 1);
  CHECK(marg.mean[0] == doctest::Approx(4.0));
  CHECK(marg.scale(0, 0) == doctest::Approx(3.0 * 1.0));  // C_11 * S_00

  const EffectDistribution avg =
      effect_projection(st, 0, EffectKind::AverageCluster);
  CHECK(avg.mean[0] == doctest::Approx(2.0));  // mean of (1, 2, 3)
  CHECK(avg.scale(0, 0) == doctest::Approx(2.0 * st.s.sum() / 9.0));

  const EffectDistribution joint = effect_projection(st, 1, EffectKind::Joint);
  CHECK(joint.dim() == 3);
  CHECK((joint.mean.transpose() - st.m.row(1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((joint.scale - 3.0 * st.s).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(effect_projection(st, 2, EffectKind::Marginal),
                  ParameterError);
  CHECK_THROWS_AS(effect_projection(st, -1, EffectKind::Joint), ParameterError);
}

TEST_CASE("scalar kinds are linear functionals of the joint law") {
  // the marginal is e_1' applied to the joint law, the cluster average is
  // (1/q) 1'; their means and scales must reduce exactly
  Rng rng = make_rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int p = 1 + static_cast<int>(rng() % 4);
    const int q = 1 + static_cast<int>(rng() % 6);
    const PosteriorState st = random_state(p, q, rng);
    const int task = static_cast<int>(rng() % p);

    const EffectDistribution joint = effect_projection(st, task, EffectKind::Joint);
    const EffectDistribution marg =
        effect_projection(st, task, EffectKind::Marginal);
    const EffectDistribution avg =
        effect_projection(st, task, EffectKind::AverageCluster);

    Eigen::VectorXd e1 = Eigen::VectorXd::Zero(q);
    e1[0] = 1.0;
    const Eigen::VectorXd ones = Eigen::VectorXd::Constant(q, 1.0 / q);

    CHECK(std::abs(marg.mean[0] - e1.dot(joint.mean)) < 1e-12);
    CHECK(std::abs(marg.scale(0, 0) - e1.dot(joint.scale * e1)) < 1e-12);
    CHECK(std::abs(avg.mean[0] - ones.dot(joint.mean)) < 1e-12);
    CHECK(std::abs(avg.scale(0, 0) - ones.dot(joint.scale * ones)) < 1e-12);
  }
}

TEST_CASE("evidence counts strictly positive trajectories") {
  std::vector<EffectTrajectory> draws;
  draws.push_back(traj_from({1.0, 2.0, 3.0}));
  draws.push_back(traj_from({0.5, 0.1, 0.2}));
  draws.push_back(traj_from({1.0, -0.1, 2.0}));
  draws.push_back(traj_from({1.0, 0.0, 2.0}));  // zero is not evidence
  const EvidenceResult res = evidence(draws);
  CHECK(res.probability == doctest::Approx(0.5));
  CHECK(res.n_draws == 4);
  CHECK_THROWS_AS(evidence({}), ParameterError);
}

TEST_CASE("contrast evidence pairs draws by index") {
  std::vector<EffectTrajectory> a, b;
  a.push_back(traj_from({2.0, 2.0}));
  b.push_back(traj_from({1.0, 1.0}));
  a.push_back(traj_from({1.0, 3.0}));
  b.push_back(traj_from({2.0, 1.0}));
  const EvidenceResult res = contrast_evidence(a, b);
  CHECK(res.probability == doctest::Approx(0.5));

  b.pop_back();
  CHECK_THROWS_AS(contrast_evidence(a, b), ParameterError);
  b.push_back(traj_from({1.0}));
  CHECK_THROWS_AS(contrast_evidence(a, b), ParameterError);
}

TEST_CASE("state draws center on the one-step-back posterior mean") {
  const int t_len = 20, burn_in = 5;
  Rng data_rng = make_rng(101);
  const Eigen::MatrixXd f = random_matrix(t_len, 1, data_rng);
  const Eigen::MatrixXd y = random_matrix(t_len, 1, data_rng);
  const ModelConfig cfg = make_config(0.9, 1, burn_in);
  const PosteriorSequence seq = run_filter(y, f, cfg);

  const int n_draws = 20000;
  auto sampler = make_sampler(Algorithm::Fsts, seq, nullptr, cfg,
                              EffectKind::Marginal);
  auto buf = sampler->make_buffer();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(sampler->retained());
  for (int k = 0; k < n_draws; ++k) {
    Rng rng = make_rng(5, 0, static_cast<std::uint64_t>(k));
    sampler->draw(rng, buf);
    sum += buf[0].col(0);
  }
  for (int rt = 0; rt < sampler->retained(); ++rt) {
    const int t = burn_in + rt;
    const PosteriorState& prev =
        t == 1 ? seq.prior : seq.states[static_cast<std::size_t>(t - 2)];
    const PosteriorState& cur = seq.states[static_cast<std::size_t>(t - 1)];
    const double beta = cfg.beta_at(0);
    const double var = prev.c(0, 0) * prev.s(0, 0) +
                       prev.c(0, 0) * (1.0 / beta - 1.0) * cur.s(0, 0);
    const double se = std::sqrt(var / n_draws);
    CHECK(std::abs(sum[rt] / n_draws - prev.m(0, 0)) < 4.0 * se);
  }
}

TEST_CASE("unit discount collapses the backward pass to a level path") {
  const int t_len = 12;
  Rng data_rng = make_rng(103);
  const Eigen::MatrixXd f = random_matrix(t_len, 1, data_rng);
  const Eigen::MatrixXd y = random_matrix(t_len, 1, data_rng);
  const ModelConfig cfg = make_config(1.0, 1, 2);
  const PosteriorSequence seq = run_filter(y, f, cfg);

  Rng rng = make_rng(7);
  for (int k = 0; k < 20; ++k) {
    const EffectTrajectory traj =
        ffbs_draw(seq, cfg, 0, EffectKind::Marginal, rng);
    for (int r = 1; r < traj.values.rows(); ++r)
      CHECK(std::abs(traj.values(r, 0) - traj.values(0, 0)) < 1e-4);
  }
}

TEST_CASE("backward draws match a fixed-interval smoother oracle") {
  // scalar model with the cross-sectional scale pinned to one: the sampled
  // paths must reproduce the closed-form smoother mean and variance
  // h_t = m_t + beta (h_{t+1} - m_t), H_t = (1 - beta) C_t + beta^2 H_{t+1}
  const int t_len = 8;
  Rng data_rng = make_rng(107);
  const Eigen::MatrixXd f =
      Eigen::MatrixXd::Ones(t_len, 1) + 0.3 * random_matrix(t_len, 1, data_rng);
  const Eigen::MatrixXd y = random_matrix(t_len, 1, data_rng);
  const ModelConfig cfg = make_config(0.9, 1, 1);
  const PosteriorSequence seq = run_filter(y, f, cfg);

  const double beta = 0.9;
  Eigen::VectorXd h(t_len), bigh(t_len);
  h[t_len - 1] = seq.states.back().m(0, 0);
  bigh[t_len - 1] = seq.states.back().c(0, 0);
  for (int t = t_len - 2; t >= 0; --t) {
    const double m = seq.states[static_cast<std::size_t>(t)].m(0, 0);
    const double c = seq.states[static_cast<std::size_t>(t)].c(0, 0);
    h[t] = m + beta * (h[t + 1] - m);
    bigh[t] = (1.0 - beta) * c + beta * beta * bigh[t + 1];
  }

  const Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(1, 1);
  const int n_draws = 30000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(t_len);
  Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(t_len);
  for (int k = 0; k < n_draws; ++k) {
    Rng rng = make_rng(11, 0, static_cast<std::uint64_t>(k));
    const EffectTrajectory traj =
        ffbs_draw(seq, cfg, 0, EffectKind::Marginal, rng, &sigma);
    sum += traj.values.col(0);
    sum_sq += traj.values.col(0).cwiseProduct(traj.values.col(0));
  }
  for (int t = 0; t < t_len; ++t) {
    const double mean = sum[t] / n_draws;
    const double var = sum_sq[t] / n_draws - mean * mean;
    CHECK(std::abs(mean - h[t]) < 4.0 * std::sqrt(bigh[t] / n_draws));
    CHECK(var == doctest::Approx(bigh[t]).epsilon(4.0 * std::sqrt(2.0 / n_draws)));
  }
}

TEST_CASE("synthesis draws find a strong sustained effect") {
  const int t_len = 60;
  DesignMatrix design;
  design.tr = 2.0;
  design.task_names = {"task"};
  design.values.resize(t_len, 1);
  for (int t = 0; t < t_len; ++t)
    design.values(t, 0) = (t / 5) % 2 == 0 ? 1.0 : 0.0;

  Rng data_rng = make_rng(109);
  std::normal_distribution<double> gauss(0.0, 0.2);
  Eigen::MatrixXd y(t_len, 1);
  for (int t = 0; t < t_len; ++t)
    y(t, 0) = 5.0 * design.values(t, 0) + gauss(data_rng);

  const ModelConfig cfg = make_config(0.95, 1, 10);
  const PosteriorSequence seq = run_filter(y, design.values, cfg);
  std::vector<EffectTrajectory> draws;
  for (int k = 0; k < 200; ++k) {
    Rng rng = make_rng(13, 0, static_cast<std::uint64_t>(k));
    draws.push_back(fest_draw(seq, design, cfg, 0, EffectKind::Marginal, rng));
    CHECK(draws.back().values.rows() == t_len - 10 + 1);
  }
  CHECK(evidence(draws).probability > 0.95);
}

TEST_CASE("per-voxel records mirror the filter output") {
  Bold4D vol;
  vol.dims = {3, 3, 3};
  vol.n_scans = 25;
  vol.data.resize(vol.dims.count() * vol.n_scans);
  vol.mask.assign(vol.dims.count(), 1);
  Rng rng = make_rng(211);
  std::normal_distribution<double> gauss(50.0, 5.0);
  for (double& v : vol.data) v = gauss(rng);

  DesignMatrix design;
  design.tr = 2.0;
  design.task_names = {"t"};
  design.values = random_matrix(vol.n_scans, 1, rng);

  const ModelConfig cfg = make_config(0.95, 1, 5);
  MapOptions opts;
  opts.n_draws = 20;
  opts.kind = EffectKind::Marginal;

  const ClusterIndex cluster = neighborhood({1, 1, 1}, 1, vol.mask, vol.dims);
  const VoxelOutcome outcome = process_voxel(vol, cluster, design, cfg, opts, 0);

  const Eigen::MatrixXd series = extract_series(vol, cluster, true);
  const PosteriorSequence seq = run_filter(series, design.values, cfg);
  REQUIRE(outcome.record.m_rows.rows() == vol.n_scans);
  CHECK(outcome.record.q == 7);
  for (int t = 0; t < vol.n_scans; ++t) {
    const PosteriorState& st = seq.states[static_cast<std::size_t>(t)];
    CHECK(outcome.record.n[t] == st.n);
    CHECK(outcome.record.c_diag(t, 0) == st.c(0, 0));
    for (int a = 0; a < 7; ++a) {
      CHECK(outcome.record.m_rows(t, a) == st.m(0, a));
      for (int b = 0; b < 7; ++b)
        CHECK(outcome.record.s(t, a * 7 + b) == st.s(a, b));
    }
  }
  CHECK(outcome.evidence.size() == 1);
  CHECK(outcome.evidence[0] >= 0.0);
  CHECK(outcome.evidence[0] <= 1.0);
}

TEST_CASE("evidence maps are identical for any worker count") {
  Bold4D vol;
  vol.dims = {5, 5, 4};
  vol.n_scans = 30;
  vol.data.resize(vol.dims.count() * vol.n_scans);
  vol.mask.assign(vol.dims.count(), 1);
  Rng rng = make_rng(223);
  std::normal_distribution<double> gauss(100.0, 8.0);
  for (double& v : vol.data) v = gauss(rng);

  DesignMatrix design;
  design.tr = 2.0;
  design.task_names = {"t"};
  design.values.resize(vol.n_scans, 1);
  for (int t = 0; t < vol.n_scans; ++t)
    design.values(t, 0) = (t / 4) % 2 == 0 ? 1.0 : 0.0;

  const ModelConfig cfg = make_config(0.95, 1, 8);
  MapOptions opts;
  opts.n_draws = 40;
  opts.seed = 99;
  opts.kind = EffectKind::AverageCluster;

  opts.workers = 1;
  const SubjectMapResult serial = map_subject_serial(vol, design, cfg, opts);
  for (Algorithm algo : {Algorithm::Fest, Algorithm::Fsts, Algorithm::Ffbs}) {
    MapOptions run = opts;
    run.algorithm = algo;
    const SubjectMapResult base = map_subject_serial(vol, design, cfg, run);
    for (int workers : {1, 4, 8}) {
      run.workers = workers;
      const SubjectMapResult par = map_subject(vol, design, cfg, run);
      REQUIRE(par.evidence.values.size() == base.evidence.values.size());
      CHECK(par.evidence.values[0] == base.evidence.values[0]);  // bitwise
      REQUIRE(par.summary.records.size() == base.summary.records.size());
      for (std::size_t i = 0; i < base.summary.records.size(); ++i) {
        CHECK(par.summary.records[i].voxel == base.summary.records[i].voxel);
        CHECK((par.summary.records[i].m_rows -
               base.summary.records[i].m_rows).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
  CHECK(serial.failures.empty());
}

TEST_CASE("draw streams are reproducible and decoupled") {
  const int t_len = 15;
  Rng data_rng = make_rng(227);
  const Eigen::MatrixXd f = random_matrix(t_len, 1, data_rng);
  const Eigen::MatrixXd y = random_matrix(t_len, 1, data_rng);
  const ModelConfig cfg = make_config(0.9, 1, 3);
  const PosteriorSequence seq = run_filter(y, f, cfg);

  Rng a = make_rng(42, 7, 3), b = make_rng(42, 7, 3), c = make_rng(42, 7, 4);
  const EffectTrajectory ta = fsts_draw(seq, cfg, 0, EffectKind::Marginal, a);
  const EffectTrajectory tb = fsts_draw(seq, cfg, 0, EffectKind::Marginal, b);
  const EffectTrajectory tc = fsts_draw(seq, cfg, 0, EffectKind::Marginal, c);
  CHECK((ta.values - tb.values).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ta.values - tc.values).cwiseAbs().maxCoeff() != 0.0);
}
