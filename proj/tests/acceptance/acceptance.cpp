// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Tolerances and problem sizes are fixed here, not tuned.

#include "oracles.hpp"

#include "cli.hpp"
#include "matrix_io.hpp"

#include "mnkit/errors.hpp"
#include "mnkit/kron.hpp"
#include "mnkit/matnorm.hpp"
#include "mnkit/mnrsa.hpp"
#include "mnkit/mnsrm.hpp"
#include "mnkit/optim.hpp"
#include "mnkit/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <unistd.h>

using namespace mnkit;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, x);
  return buf;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Runtime limit in seconds, or 0 for none.
Verdict with_limit(Verdict v, double elapsed, double limit) {
  v.detail += "; " + fmt("%.1f s", elapsed);
  if (limit > 0) {
    v.detail += fmt(" (limit %.0f s)", limit);
    if (elapsed >= limit) v.pass = false;
  }
  return v;
}

// 1 ----------------------------------------------------------------------
Verdict density_oracle() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> kind_pick(0, static_cast<int>(oracle::all_kinds().size()) - 1);
  std::uniform_int_distribution<int> rows(1, 6), cols(1, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    // Cycle through every family on both sides, then random pairs.
    const auto& kinds = oracle::all_kinds();
    const CovKind rk = trial < 9 ? kinds[static_cast<std::size_t>(trial)] : kinds[static_cast<std::size_t>(kind_pick(rng))];
    const CovKind ck = trial < 9 ? kinds[static_cast<std::size_t>(8 - trial)] : kinds[static_cast<std::size_t>(kind_pick(rng))];
    const CovPtr r = oracle::random_cov(rk, rows(rng), rng);
    const CovPtr c = oracle::random_cov(ck, cols(rng), rng);
    const MatrixXd mean = oracle::randn(r->dim(), c->dim(), rng);
    const MatrixXd x = mean + oracle::randn(r->dim(), c->dim(), rng);
    const double ref = oracle::mn_logpdf(x, mean, r->dense(), c->dense());
    worst = std::max(worst, std::abs(mn_logpdf(x, {mean, r, c}) - ref));
  }
  return {worst < 1e-8, "200 instances, max |error| " + fmt("%.2e", worst) + " (tol 1e-8)"};
}

// 2 ----------------------------------------------------------------------
Verdict kron_solver() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> nf(1, 3), dimd(1, 5);
  double worst_solve = 0.0, worst_logdet = 0.0, worst_masked = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<MatrixXd> fs;
    std::vector<std::vector<bool>> masks;
    Index full = 1;
    const int n = nf(rng);
    for (int i = 0; i < n; ++i) {
      Index d = dimd(rng);
      while (full * d > 60) --d;
      full *= d;
      fs.push_back(oracle::random_lower(d, rng));
      std::uniform_int_distribution<Index> keep(1, d);
      masks.push_back(oracle::random_mask(d, keep(rng), rng));
    }
    const TriFactorList f(fs);
    const MatrixXd big = kron_dense(fs);
    const VectorXd y = oracle::randn_vec(full, rng);
    const VectorXd ref = big.triangularView<Eigen::Lower>().solve(y);
    worst_solve = std::max(worst_solve, (kron_tri_solve(f, y) - ref).norm() / ref.norm());
    const VectorXd ref_u = big.transpose().triangularView<Eigen::Upper>().solve(y);
    worst_solve = std::max(worst_solve, (kron_tri_solve_upper(f, MatrixXd(y)).col(0) - ref_u).norm() / ref_u.norm());
    worst_logdet = std::max(worst_logdet, std::abs(kron_logdet(f) - oracle::logdet(big * big.transpose())));

    const KronMask mask = KronMask::from_factor_masks(masks);
    const MatrixXd sub = big(mask.kept_indices(), mask.kept_indices());
    const VectorXd ym = oracle::randn_vec(mask.kept_count(), rng);
    const VectorXd mref = sub.triangularView<Eigen::Lower>().solve(ym);
    worst_masked = std::max(worst_masked, (kron_tri_solve_masked(f, mask, ym) - mref).norm() / mref.norm());
    const VectorXd mref_u = sub.transpose().triangularView<Eigen::Upper>().solve(ym);
    worst_masked =
        std::max(worst_masked, (kron_tri_solve_upper_masked(f, mask, MatrixXd(ym)).col(0) - mref_u).norm() / mref_u.norm());
    worst_masked = std::max(worst_masked, std::abs(kron_logdet(f, mask) - oracle::logdet(sub * sub.transpose())));
  }
  return {worst_solve < 1e-10 && worst_logdet < 1e-8 && worst_masked < 1e-8,
          "solve rel " + fmt("%.1e", worst_solve) + " (tol 1e-10), logdet " + fmt("%.1e", worst_logdet) +
              " (tol 1e-8), masked " + fmt("%.1e", worst_masked) + " (tol 1e-8)"};
}

// 3 ----------------------------------------------------------------------
Verdict woodbury() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.7, 0.7);
  double worst_solve = 0.0, worst_logdet = 0.0;
  for (Index r : {0, 1, 5}) {
    for (Index t : {5, 20, 50}) {
      for (int draw = 0; draw < 3; ++draw) {
        const MatrixXd f = oracle::randn(t, std::min<Index>(4, t), rng);
        CovSpec spec = CovSpec::lowrank_plus(CovSpec::simple(CovKind::ar1, t), f, r);
        spec.seed = static_cast<std::uint64_t>(draw);
        CovPtr m = make_cov(spec);
        VectorXd p(m->n_params());
        for (Index i = 0; i < p.size(); ++i) p[i] = u(rng);
        m = m->with_params(p);
        const auto parts = lowrank_parts(*m);
        const MatrixXd dense =
            parts.base->dense() + f * parts.inner->dense() * f.transpose() + parts.learned * parts.learned.transpose();
        const MatrixXd x = oracle::randn(t, 3, rng);
        const MatrixXd ref = dense.inverse() * x;
        worst_solve = std::max(worst_solve, (m->solve(x) - ref).norm() / ref.norm());
        worst_logdet = std::max(worst_logdet, std::abs(m->logdet() - oracle::logdet(dense)));
      }
    }
  }
  return {worst_solve < 1e-8 && worst_logdet < 1e-8,
          "ranks {0,1,5}, dims {5,20,50}: solve rel " + fmt("%.1e", worst_solve) + ", logdet " +
              fmt("%.1e", worst_logdet) + " (tol 1e-8)"};
}

// 4 ----------------------------------------------------------------------
Verdict gradient() {
  std::mt19937_64 rng(4);
  const RsaProblem p = RsaProblem::make(oracle::randn(30, 8, rng), oracle::randn(30, 3, rng));
  RsaConfig cfg;
  cfg.residual_rank = 2;
  const RsaObjective obj = rsa_objective(p, cfg);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd theta = obj.init;
    for (Index i = 0; i < theta.size(); ++i) theta[i] += u(rng);
    worst = std::max(worst, grad_check(obj.objective, theta, 1e-5));
  }
  return {worst < 1e-5, "5 points, max relative error " + fmt("%.2e", worst) + " (tol 1e-5)"};
}

// 5 ----------------------------------------------------------------------
Verdict ecm_ascent() {
  double worst = 0.0;
  int fits = 0, iterations = 0;
  for (int seed = 0; seed < 20; ++seed) {
    for (const SrmVariant variant : {SrmVariant::dp, SrmVariant::mn}) {
      SrmSynthConfig sc;
      sc.n = 3;
      sc.v = 20;
      sc.t = 60;
      sc.k = 2;
      sc.n_heldout = 0;
      sc.snr = 1.0;
      sc.ar1_rho = 0.3;
      sc.seed = static_cast<std::uint64_t>(seed);
      SrmConfig cfg;
      cfg.k = 2;
      cfg.variant = variant;
      const SrmModel m = fit_srm_ecm(SrmDataset{gen_srm_synth(sc).subjects}, cfg);
      for (std::size_t i = 1; i < m.loglik_trace.size(); ++i) {
        worst = std::min(worst, m.loglik_trace[i] - m.loglik_trace[i - 1]);
      }
      ++fits;
      iterations += m.iterations;
    }
  }
  return {worst >= -1e-8, std::to_string(fits) + " fits (dp and mn), " + std::to_string(iterations) +
                              " iterations, most negative step " + fmt("%.2e", worst) + " (tol -1e-8)"};
}

// 6 ----------------------------------------------------------------------
Verdict e_step() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  struct Size {
    Index n, v, t, k;
  };
  int count = 0;
  for (const Size s : {Size{2, 4, 10, 2}, Size{2, 10, 10, 3}, Size{3, 6, 11, 2}, Size{2, 2, 50, 1}}) {
    for (const SrmVariant variant : {SrmVariant::dp, SrmVariant::mn}) {
      SrmDataset d;
      for (Index j = 0; j < s.n; ++j) d.subjects.push_back(oracle::randn(s.v, s.t, rng));
      SrmModel m;
      m.s = oracle::randn(s.k, s.t, rng);
      for (Index j = 0; j < s.n; ++j) m.b.push_back(oracle::randn_vec(s.v, rng));
      m.tau2 = VectorXd::Ones(s.n);
      for (Index j = 1; j < s.n; ++j) m.tau2[j] = 0.5 + static_cast<double>(j) / 2.0;
      m.sigma_v = variant == SrmVariant::dp ? make_cov(CovSpec::simple(CovKind::identity, s.v))
                                            : oracle::random_cov(CovKind::diagonal, s.v, rng);
      m.sigma_t = variant == SrmVariant::dp ? make_cov(CovSpec::simple(CovKind::identity, s.t))
                                            : oracle::random_cov(CovKind::ar1, s.t, rng);
      const SrmStats st = srm_e_step(d, m);

      const Index nv = s.n * s.v;
      const MatrixXd a = oracle::kron(m.tau2.cwiseInverse().asDiagonal().toDenseMatrix(), m.sigma_v->dense());
      MatrixXd mean(nv, s.t);
      for (Index j = 0; j < s.n; ++j) mean.middleRows(j * s.v, s.v) = m.b[static_cast<std::size_t>(j)].replicate(1, s.t);
      const auto cond = oracle::condition(VectorXd::Zero(nv * s.k), oracle::vec(mean),
                                          oracle::kron(MatrixXd::Identity(s.k, s.k), a), oracle::kron(m.s, a),
                                          oracle::kron(m.sigma_t->dense() + m.s.transpose() * m.s, a),
                                          oracle::vec(d.stacked()));
      worst = std::max(worst, (cond.mean - oracle::vec(st.w_mean)).cwiseAbs().maxCoeff());
      worst = std::max(worst, (cond.cov - oracle::kron(st.w_colcov, a)).cwiseAbs().maxCoeff());
      ++count;
    }
  }
  return {worst < 1e-8, std::to_string(count) + " instances with nv*t <= 200, max |error| " + fmt("%.2e", worst) +
                            " (tol 1e-8)"};
}

// 7 ----------------------------------------------------------------------
struct RsaRun {
  double mn = 0.0, naive = 0.0;
  bool degenerate = false;
};

RsaRun rsa_run(double snr, std::uint64_t seed, Index rank) {
  RsaSynthConfig sc;
  sc.t = 300;
  sc.c = 8;
  sc.v = 500;
  sc.snr = snr;
  sc.gp_lengthscale = 0.0;  // data exactly from the MN-RSA model
  sc.n_nuisance = 0;
  sc.seed = seed;
  const RsaSynthBundle b = gen_rsa_synth(sc);
  const RsaProblem p = RsaProblem::make(b.y, b.x);
  RsaConfig cfg;
  cfg.residual_rank = rank;
  cfg.seed = seed;
  const RsaResult r = fit_mnrsa(p, cfg);
  const CorrError e = rmse_corr(r.corr, b.corr_true);
  return {e.rmse, rmse_corr(naive_rsa(p), b.corr_true), e.degenerate};
}

Verdict rsa_recovery() {
  const RsaRun high = rsa_run(1.0, 700, 15);
  double mn = 0.0, naive = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const RsaRun low = rsa_run(0.3, 710 + seed, 0);
    mn += low.mn / 10.0;
    naive += low.naive / 10.0;
  }
  return {high.mn < 0.1 && mn <= naive,
          "high SNR 1.0 (rank 15): rmse " + fmt("%.4f", high.mn) + " (tol 0.1); low SNR 0.3 (rank 0), 10 seeds: mean rmse MN-RSA " +
              fmt("%.4f", mn) + " vs naive " + fmt("%.4f", naive)};
}

// 8 ----------------------------------------------------------------------
Verdict null_behavior() {
  int mn_null = 0, naive_ok = 0;
  double max_ratio = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RsaSynthConfig sc;
    sc.t = 200;
    sc.c = 8;
    sc.v = 150;
    sc.snr = 0.0;  // the design has no relation to the data
    sc.seed = 800 + seed;
    const RsaSynthBundle b = gen_rsa_synth(sc);
    const RsaProblem p = RsaProblem::make(b.y, b.x);
    RsaConfig cfg;
    cfg.seed = seed;
    const RsaResult r = fit_mnrsa(p, cfg);
    if (r.degenerate || r.trace_ratio < 0.05) ++mn_null;
    if (!r.degenerate) max_ratio = std::max(max_ratio, r.trace_ratio);
    const MatrixXd naive = naive_rsa(p);
    if (naive.allFinite() && (naive.diagonal().array() - 1.0).abs().maxCoeff() < 1e-12) ++naive_ok;
  }
  return {mn_null >= 16 && naive_ok == 20,
          "MN-RSA degenerate or trace ratio < 0.05 in " + std::to_string(mn_null) +
              "/20 (need 16; max ratio " + fmt("%.4f", max_ratio) + "), naive non-degenerate in " +
              std::to_string(naive_ok) + "/20 (need 20)"};
}

// 9 ----------------------------------------------------------------------
Verdict subspace_recovery() {
  double worst_angle = 0.0, mean_angle = 0.0;
  std::vector<double> errors;
  for (const double snr : {0.1, 0.5, 2.0}) {
    double err = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SrmSynthConfig sc;
      sc.n = 5;
      sc.v = 50;
      sc.t = 200;
      sc.k = 3;
      sc.n_heldout = 1;
      sc.snr = snr;
      sc.seed = 900 + seed;
      const SrmSynthBundle b = gen_srm_synth(sc);
      SrmConfig cfg;
      cfg.k = 3;
      cfg.variant = SrmVariant::dp;
      const SrmModel m = fit_srm_ecm(SrmDataset{b.subjects}, cfg);
      const MatrixXd& y = b.heldout[0];
      err += reconstruct(m, transform_new_subject(m, y), y.rowwise().mean(), y).error / 10.0;
      if (snr == 2.0) {
        const double angle = principal_angles(m.s, b.s_true).back();
        worst_angle = std::max(worst_angle, angle);
        mean_angle += angle / 10.0;
      }
    }
    errors.push_back(err);
  }
  const bool monotone = errors[0] > errors[1] && errors[1] > errors[2];
  return {worst_angle < 10.0 && monotone,
          "SNR 2: largest principal angle max " + fmt("%.2f", worst_angle) + " deg, mean " + fmt("%.2f", mean_angle) +
              " (tol 10); held-out error at SNR 0.1/0.5/2: " + fmt("%.4f", errors[0]) + " / " + fmt("%.4f", errors[1]) +
              " / " + fmt("%.4f", errors[2])};
}

// 10 ---------------------------------------------------------------------
double per_iteration_seconds(Index v, std::uint64_t seed, int& min_iterations) {
  RsaSynthConfig sc;
  sc.t = 300;
  sc.c = 16;
  sc.v = v;
  sc.snr = 0.4;
  sc.seed = seed;
  const RsaSynthBundle b = gen_rsa_synth(sc);
  const RsaProblem p = RsaProblem::make(b.y, b.x);
  RsaConfig cfg;
  cfg.spatial = CovSpec::simple(CovKind::diagonal, 0);
  cfg.seed = seed;
  // A fixed budget: no tolerance can stop the run early.
  cfg.optim.max_iters = 20;
  cfg.optim.grad_tol = 1e-300;
  cfg.optim.rel_tol = 1e-300;
  const RsaResult r = fit_mnrsa(p, cfg);
  min_iterations = std::min(min_iterations, r.iterations);
  return r.wall_time_seconds / std::max(1, r.iterations);
}

Verdict scaling() {
  std::vector<double> small, large;
  int min_iterations = 20;
  for (std::uint64_t run = 0; run < 5; ++run) {
    small.push_back(per_iteration_seconds(1000, 1000 + run, min_iterations));
    large.push_back(per_iteration_seconds(2000, 1000 + run, min_iterations));
  }
  const double ratio = median(large) / median(small);
  return {ratio <= 2.5, "median s/iteration v=1000 " + fmt("%.4f", median(small)) + ", v=2000 " +
                            fmt("%.4f", median(large)) + ", ratio " + fmt("%.2f", ratio) + " (limit 2.5), budget 20 iterations, fewest run " +
                            std::to_string(min_iterations)};
}

// 11 ---------------------------------------------------------------------
struct CliCall {
  int code;
  std::string out;
};

CliCall cli_call(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str()};
}

nlohmann::json strip_timings(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  j.erase("timings");
  return j;
}

Verdict determinism_and_io() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("mnkit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto path = [&](const std::string& name) { return (dir / name).string(); };
  bool ok = true;
  std::string notes;

  // Identical seeds give identical records (wall-clock timings excluded).
  cli::write_file(path("rsa.json"), R"({"t": 80, "v": 40, "c": 4, "snr": 0.5})");
  cli::write_file(path("srm.json"), R"({"n": 3, "v": 15, "t": 40, "k": 2})");
  const std::vector<std::vector<std::string>> pipeline = {
      {"gen", "rsa", "--config", path("rsa.json"), "--out-dir", path("r"), "--seed", "7"},
      {"fit", "rsa", "--data", path("r/data.mnm"), "--design", path("r/design.mnm"), "--rank", "2", "--seed", "7"},
      {"gen", "srm", "--config", path("srm.json"), "--out-dir", path("s"), "--seed", "7"},
      {"fit", "srm", "--data-dir", path("s"), "--k", "2", "--variant", "mn", "--model-out", path("m")},
      {"eval", "srm", "--model", path("m"), "--heldout", path("s/heldout_000.mnm")}};
  int identical = 0;
  for (const auto& args : pipeline) {
    const CliCall a = cli_call(args), b = cli_call(args);
    if (a.code == 0 && b.code == 0 && strip_timings(a.out) == strip_timings(b.out)) ++identical;
  }
  ok = ok && identical == static_cast<int>(pipeline.size());
  notes += std::to_string(identical) + "/" + std::to_string(pipeline.size()) + " commands reproduce their records";

  // Binary round trips are bit-exact.
  std::mt19937_64 rng(11);
  int exact = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const MatrixXd m = oracle::randn(1 + trial * 13, 1 + trial * 7, rng) * std::pow(10.0, trial - 5);
    cli::write_matrix(path("m.mnm"), m);
    const MatrixXd back = cli::read_matrix(path("m.mnm"));
    if (back.rows() == m.rows() && back.cols() == m.cols() &&
        std::memcmp(back.data(), m.data(), sizeof(double) * static_cast<std::size_t>(m.size())) == 0) {
      ++exact;
    }
  }
  ok = ok && exact == 10;
  notes += "; " + std::to_string(exact) + "/10 binary round trips bit-exact";

  // Every documented exit code.
  const std::string data = cli::read_file(path("r/data.mnm"));
  cli::write_file(path("trunc.mnm"), data.substr(0, data.size() - 1));
  cli::write_matrix(path("wide.mnm"), oracle::randn(80, 80, rng));  // t <= c
  fs::create_directories(dir / "huge");
  cli::write_matrix(path("huge/subject_000.mnm"), 1e300 * oracle::randn(8, 20, rng));
  cli::write_matrix(path("huge/subject_001.mnm"), 1e300 * oracle::randn(8, 20, rng));
  const std::vector<std::pair<int, std::vector<std::string>>> cases = {
      {0, {"eval", "srm", "--model", path("m"), "--heldout", path("s/heldout_000.mnm")}},
      {2, {"fit", "srm", "--data-dir", path("s"), "--k", "2", "--variant", "neither"}},
      {3, {"fit", "rsa", "--data", path("trunc.mnm"), "--design", path("r/design.mnm")}},
      {3, {"fit", "rsa", "--data", path("r/data.mnm"), "--design", path("wide.mnm")}},
      {4, {"fit", "srm", "--data-dir", path("huge"), "--k", "2"}}};
  int matched = 0;
  for (const auto& [expected, args] : cases) {
    if (cli_call(args).code == expected) ++matched;
  }
  ok = ok && matched == static_cast<int>(cases.size());
  notes += "; exit codes 0/2/3/4 matched " + std::to_string(matched) + "/" + std::to_string(cases.size());
  fs::remove_all(dir);
  return {ok, notes};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    double limit;
    std::function<Verdict()> check;
  };
  const std::vector<Criterion> criteria = {
      {1, "density oracle", 10, density_oracle},
      {2, "Kronecker solver", 10, kron_solver},
      {3, "Woodbury paths", 0, woodbury},
      {4, "MN-RSA gradient", 0, gradient},
      {5, "ECM ascent", 60, ecm_ascent},
      {6, "E-step exactness", 0, e_step},
      {7, "RSA recovery", 600, rsa_recovery},
      {8, "null behavior", 600, null_behavior},
      {9, "subspace recovery", 300, subspace_recovery},
      {10, "scaling in voxels", 0, scaling},
      {11, "determinism and I/O", 0, determinism_and_io},
  };
  // Optional arguments select criteria by number.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    v = with_limit(v, seconds_since(start), c.limit);
    if (!v.pass) ++failures;
    std::printf("[%s] %2d %s: %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
