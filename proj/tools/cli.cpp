#include "cli.hpp"

#include "matrix_io.hpp"
#include "serialize.hpp"

#include "mnkit/errors.hpp"
#include "mnkit/mnrsa.hpp"
#include "mnkit/mnsrm.hpp"
#include "mnkit/synth.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#ifndef MNKIT_VERSION
#define MNKIT_VERSION "unknown"
#endif

namespace mnkit::cli {

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kind_names = {"identity", "isotropic", "diagonal", "full_rank", "ar1", "sq_exp"};

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

struct ResultRecord {
  std::string command;
  json config = json::object();
  std::map<std::string, double> metrics;
  std::map<std::string, bool> degenerate;
  std::map<std::string, double> timings;
  std::uint64_t seed = 0;
  json extra = json::object();

  void metric(const std::string& name, double value, bool flagged = false) {
    metrics[name] = value;
    if (flagged || !std::isfinite(value)) degenerate[name] = true;
  }

  json to_json() const {
    json m = json::object();
    for (const auto& [name, value] : metrics) m[name] = std::isfinite(value) ? json(value) : json(nullptr);
    json j{{"command", command}, {"config", config},   {"metrics", m},
           {"degenerate", degenerate}, {"timings", timings}, {"seed", seed},
           {"version", MNKIT_VERSION}};
    for (const auto& item : extra.items()) j[item.key()] = item.value();
    return j;
  }
};

void emit(const ResultRecord& r, const std::string& out_path, std::ostream& out) {
  const std::string text = r.to_json().dump(2) + "\n";
  if (out_path.empty() || out_path == "-") {
    out << text;
  } else {
    write_file(out_path, text);
  }
}

json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::string fmt_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i > 0) s += ",";
    if constexpr (std::is_floating_point_v<T>) {
      s += fmt_double(xs[i]);
    } else {
      s += std::to_string(xs[i]);
    }
  }
  return s;
}

json optional_matrix(const std::optional<MatrixXd>& m) { return m ? matrix_to_json(*m) : json(nullptr); }

// ---------------------------------------------------------------- gen

struct GenOptions {
  std::string config;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string out;
};

std::vector<std::string> gen_argv(const char* which, const GenOptions& o) {
  std::vector<std::string> a = {"gen", which};
  if (!o.config.empty()) a.insert(a.end(), {"--config", o.config});
  a.insert(a.end(), {"--out-dir", o.out_dir, "--seed", std::to_string(o.seed)});
  return a;
}

int gen_rsa(const GenOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  RsaSynthConfig cfg = o.config.empty() ? RsaSynthConfig{} : rsa_synth_from_json(read_json_file(o.config));
  cfg.seed = o.seed;
  cfg.validate();
  r.timings["load"] = clock.lap();
  const RsaSynthBundle b = gen_rsa_synth(cfg);
  r.timings["generate"] = clock.lap();
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  write_matrix(dir / "data.mnm", b.y);
  write_matrix(dir / "design.mnm", b.x);
  write_matrix(dir / "u_true.mnm", b.u_true);
  write_matrix(dir / "corr_true.mnm", b.corr_true);
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  r.timings["write"] = clock.lap();
  r.command = "gen rsa";
  r.seed = o.seed;
  r.config = {{"argv", gen_argv("rsa", o)}, {"synth", to_json(cfg)}};
  r.metric("realized_snr", b.realized_snr);
  r.metric("signal_scale", b.signal_scale);
  emit(r, o.out, out);
  return exit_ok;
}

int gen_srm(const GenOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  SrmSynthConfig cfg = o.config.empty() ? SrmSynthConfig{} : srm_synth_from_json(read_json_file(o.config));
  cfg.seed = o.seed;
  cfg.validate();
  r.timings["load"] = clock.lap();
  const SrmSynthBundle b = gen_srm_synth(cfg);
  r.timings["generate"] = clock.lap();
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  char name[64];
  for (std::size_t j = 0; j < b.subjects.size(); ++j) {
    std::snprintf(name, sizeof(name), "subject_%03zu.mnm", j);
    write_matrix(dir / name, b.subjects[j]);
  }
  for (std::size_t j = 0; j < b.heldout.size(); ++j) {
    std::snprintf(name, sizeof(name), "heldout_%03zu.mnm", j);
    write_matrix(dir / name, b.heldout[j]);
  }
  write_matrix(dir / "s_true.mnm", b.s_true);
  write_file(dir / "config.json", to_json(cfg).dump(2) + "\n");
  r.timings["write"] = clock.lap();
  r.command = "gen srm";
  r.seed = o.seed;
  r.config = {{"argv", gen_argv("srm", o)}, {"synth", to_json(cfg)}};
  r.metric("realized_snr", b.realized_snr);
  r.metric("signal_scale", b.signal_scale);
  emit(r, o.out, out);
  return exit_ok;
}

// ---------------------------------------------------------------- fit / eval rsa

struct FitRsaOptions {
  std::string data, design, spatial = "diagonal", temporal = "ar1", out;
  Index rank = 15;
  int max_iters = 500;
  std::uint64_t seed = 0;
};

int fit_rsa(const FitRsaOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  const RsaProblem problem = RsaProblem::make(read_matrix(o.data), read_matrix(o.design));
  r.timings["load"] = clock.lap();
  RsaConfig cfg;
  cfg.spatial = CovSpec::simple(cov_kind_from_string(o.spatial), 0);
  cfg.temporal_base = CovSpec::simple(cov_kind_from_string(o.temporal), 0);
  cfg.residual_rank = o.rank;
  cfg.seed = o.seed;
  cfg.optim.max_iters = o.max_iters;
  const RsaResult fit = fit_mnrsa(problem, cfg);
  r.timings["fit"] = clock.lap();
  const MatrixXd naive = naive_rsa(problem);
  r.timings["naive"] = clock.lap();

  r.command = "fit rsa";
  r.seed = o.seed;
  r.config = {{"argv", std::vector<std::string>{"fit", "rsa", "--data", o.data, "--design", o.design, "--spatial",
                                                o.spatial, "--temporal", o.temporal, "--rank",
                                                std::to_string(o.rank), "--max-iters", std::to_string(o.max_iters),
                                                "--seed", std::to_string(o.seed)}},
              {"t", problem.t()}, {"v", problem.v()}, {"c", problem.c()}};
  r.metric("loglik", fit.loglik);
  r.metric("trace_ratio", fit.trace_ratio, fit.degenerate);
  r.metric("iterations", fit.iterations);
  r.metric("converged", fit.converged ? 1.0 : 0.0);
  r.degenerate["corr"] = fit.degenerate;
  r.extra["stop_reason"] = fit.stop_reason;
  r.extra["estimate"] = {{"u", matrix_to_json(fit.u)}, {"corr", optional_matrix(fit.corr)},
                         {"naive_corr", matrix_to_json(naive)}};
  emit(r, o.out, out);
  return exit_ok;
}

struct EvalRsaOptions {
  std::string est, truth, out;
};

int eval_rsa(const EvalRsaOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  const json est = read_json_file(o.est);
  if (!est.contains("estimate") || !est["estimate"].is_object()) {
    throw InputError(o.est + " has no 'estimate' object; expected the output of fit rsa");
  }
  const json& e = est["estimate"];
  std::optional<MatrixXd> corr;
  if (e.contains("corr") && !e["corr"].is_null()) corr = matrix_from_json(e["corr"], "estimate.corr");
  const MatrixXd truth = read_matrix(o.truth);
  r.timings["load"] = clock.lap();
  const CorrError err = rmse_corr(corr, truth);
  r.metric("rmse_corr", err.rmse, err.degenerate);
  if (e.contains("naive_corr")) {
    r.metric("rmse_corr_naive", rmse_corr(matrix_from_json(e["naive_corr"], "estimate.naive_corr"), truth));
  }
  r.timings["eval"] = clock.lap();
  r.command = "eval rsa";
  r.seed = est.value("seed", std::uint64_t{0});
  r.config = {{"argv", std::vector<std::string>{"eval", "rsa", "--est", o.est, "--truth", o.truth}}};
  emit(r, o.out, out);
  return exit_ok;
}

// ---------------------------------------------------------------- fit / eval srm

struct FitSrmOptions {
  std::string data_dir, variant = "mn", spatial, temporal, out, model_out;
  Index k = 3;
  int max_iters = 200;
  double rel_tol = 1e-6;
  std::uint64_t seed = 0;
};

SrmDataset load_subjects(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("subject_", 0) == 0) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  SrmDataset d;
  for (const fs::path& f : files) d.subjects.push_back(read_matrix(f));
  if (d.subjects.empty()) throw InputError(dir.string() + " contains no subject_* matrix files");
  d.validate();
  return d;
}

int fit_srm(const FitSrmOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  const SrmDataset data = load_subjects(o.data_dir);
  r.timings["load"] = clock.lap();
  SrmConfig cfg;
  cfg.k = o.k;
  cfg.variant = srm_variant_from_string(o.variant);
  cfg.max_iters = o.max_iters;
  cfg.rel_tol = o.rel_tol;
  cfg.seed = o.seed;
  if (!o.spatial.empty()) cfg.spatial = CovSpec::simple(cov_kind_from_string(o.spatial), 0);
  if (!o.temporal.empty()) cfg.temporal = CovSpec::simple(cov_kind_from_string(o.temporal), 0);
  const SrmModel m = fit_srm_ecm(data, cfg);
  r.timings["fit"] = clock.lap();
  if (!o.model_out.empty()) save_srm_model(o.model_out, m, cfg.variant);
  r.timings["write"] = clock.lap();

  std::vector<std::string> argv = {"fit", "srm", "--data-dir", o.data_dir, "--k", std::to_string(o.k),
                                   "--variant", o.variant, "--max-iters", std::to_string(o.max_iters),
                                   "--rel-tol", fmt_double(o.rel_tol), "--seed", std::to_string(o.seed)};
  if (!o.spatial.empty()) argv.insert(argv.end(), {"--spatial", o.spatial});
  if (!o.temporal.empty()) argv.insert(argv.end(), {"--temporal", o.temporal});
  if (!o.model_out.empty()) argv.insert(argv.end(), {"--model-out", o.model_out});
  r.command = "fit srm";
  r.seed = o.seed;
  r.config = {{"argv", argv}, {"n", data.n()}, {"v", data.v()}, {"t", data.t()}};
  r.metric("loglik", m.loglik_trace.back());
  r.metric("iterations", m.iterations);
  r.metric("converged", m.converged ? 1.0 : 0.0);
  r.metric("free_parameters", static_cast<double>(m.free_parameter_count()));
  r.extra["tau2"] = std::vector<double>(m.tau2.data(), m.tau2.data() + m.tau2.size());
  emit(r, o.out, out);
  return exit_ok;
}

struct EvalSrmOptions {
  std::string model, heldout, out;
};

int eval_srm(const EvalSrmOptions& o, std::ostream& out) {
  Stopwatch clock;
  ResultRecord r;
  const LoadedSrmModel loaded = load_srm_model(o.model);
  const MatrixXd y = read_matrix(o.heldout);
  r.timings["load"] = clock.lap();
  const MatrixXd w = transform_new_subject(loaded.model, y);
  const Reconstruction rec = reconstruct(loaded.model, w, y.rowwise().mean(), y);
  r.timings["eval"] = clock.lap();
  r.command = "eval srm";
  r.config = {{"argv", std::vector<std::string>{"eval", "srm", "--model", o.model, "--heldout", o.heldout}},
              {"variant", std::string(to_string(loaded.variant))}};
  r.metric("reconstruction_error", rec.error);
  emit(r, o.out, out);
  return exit_ok;
}

// ---------------------------------------------------------------- bench

struct BenchOptions {
  std::vector<Index> voxels = {2500, 10000};
  std::vector<Index> trs = {300, 600, 1200};
  std::vector<double> snrs = {0.08, 0.4};
  int reps = 10;
  Index conditions = 16;
  Index rank = 15;
  int max_iters = 500;
  int jobs = 1;
  std::uint64_t seed = 0;
  std::string out;
};

struct BenchCell {
  Index v, t;
  double snr;
  int rep;
  std::uint64_t seed;
};

ResultRecord bench_cell(const BenchCell& cell, const BenchOptions& o) {
  Stopwatch clock;
  ResultRecord r;
  r.command = "bench rsa";
  r.seed = cell.seed;
  r.config = {{"v", cell.v}, {"t", cell.t}, {"c", o.conditions}, {"snr", cell.snr}, {"rep", cell.rep},
              {"rank", o.rank}, {"max_iters", o.max_iters}};
  try {
    RsaSynthConfig sc;
    sc.v = cell.v;
    sc.t = cell.t;
    sc.c = o.conditions;
    sc.snr = cell.snr;
    sc.seed = cell.seed;
    const RsaSynthBundle b = gen_rsa_synth(sc);
    const RsaProblem p = RsaProblem::make(b.y, b.x);
    r.timings["generate"] = clock.lap();
    RsaConfig cfg;
    cfg.residual_rank = o.rank;
    cfg.seed = cell.seed;
    cfg.optim.max_iters = o.max_iters;
    const RsaResult fit = fit_mnrsa(p, cfg);
    r.timings["fit"] = clock.lap();
    const MatrixXd naive = naive_rsa(p);
    r.timings["naive"] = clock.lap();
    const CorrError err = rmse_corr(fit.corr, b.corr_true);
    r.metric("rmse_corr", err.rmse, err.degenerate);
    r.metric("rmse_corr_naive", rmse_corr(naive, b.corr_true));
    r.metric("iterations", fit.iterations);
    r.metric("seconds_per_iteration", r.timings["fit"] / std::max(1, fit.iterations));
  } catch (const std::exception& e) {
    r.extra["error"] = e.what();
  }
  return r;
}

int bench_rsa(const BenchOptions& o, std::ostream& out) {
  std::vector<BenchCell> cells;
  std::uint64_t seed = o.seed;
  for (Index v : o.voxels)
    for (Index t : o.trs)
      for (double snr : o.snrs)
        for (int rep = 0; rep < o.reps; ++rep) cells.push_back({v, t, snr, rep, seed++});
  // Fail before spending time on a grid that cannot run.
  for (const BenchCell& c : cells) {
    RsaSynthConfig sc;
    sc.v = c.v;
    sc.t = c.t;
    sc.c = o.conditions;
    sc.snr = c.snr;
    sc.validate();
  }

  std::mutex mu;
  std::FILE* file = nullptr;
  if (!o.out.empty() && o.out != "-") {
    file = std::fopen(o.out.c_str(), "w");
    if (!file) throw InputError("cannot write " + o.out);
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const ResultRecord r = bench_cell(cells[i], o);
      if (r.extra.contains("error")) failed = true;
      // One line per cell, written whole under the lock.
      const std::string line = r.to_json().dump() + "\n";
      std::lock_guard<std::mutex> lock(mu);
      if (file) {
        std::fputs(line.c_str(), file);
        std::fflush(file);
      } else {
        out << line << std::flush;
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(o.jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (file) std::fclose(file);
  return failed ? exit_numerical : exit_ok;
}

// ---------------------------------------------------------------- dispatch

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Matrix-normal modeling toolkit"};
  app.set_version_flag("--version", MNKIT_VERSION);
  app.require_subcommand(1);

  GenOptions gen_opts;
  auto* gen = app.add_subcommand("gen", "Generate synthetic data with known ground truth");
  gen->require_subcommand(1);
  auto* gen_rsa_cmd = gen->add_subcommand("rsa", "RSA data: data.mnm, design.mnm, u_true.mnm, corr_true.mnm");
  auto* gen_srm_cmd = gen->add_subcommand("srm", "SRM data: subject_*.mnm, heldout_*.mnm, s_true.mnm");
  for (auto* cmd : {gen_rsa_cmd, gen_srm_cmd}) {
    cmd->add_option("--config", gen_opts.config, "JSON generator config (defaults if omitted)")->check(CLI::ExistingFile);
    cmd->add_option("--out-dir", gen_opts.out_dir, "Output directory")->required();
    cmd->add_option("--seed", gen_opts.seed, "Random seed (overrides the config)");
    cmd->add_option("--out", gen_opts.out, "Result record path (default stdout)");
  }

  auto* fit = app.add_subcommand("fit", "Fit a model");
  fit->require_subcommand(1);
  FitRsaOptions fit_rsa_opts;
  auto* fit_rsa_cmd = fit->add_subcommand("rsa", "MN-RSA by marginal-likelihood ascent, plus naive RSA");
  fit_rsa_cmd->add_option("--data", fit_rsa_opts.data, "t x v data matrix")->required();
  fit_rsa_cmd->add_option("--design", fit_rsa_opts.design, "t x c design matrix")->required();
  fit_rsa_cmd->add_option("--spatial", fit_rsa_opts.spatial, "Spatial covariance kind")->check(CLI::IsMember(kind_names));
  fit_rsa_cmd->add_option("--temporal", fit_rsa_opts.temporal, "Temporal noise covariance kind")->check(CLI::IsMember(kind_names));
  fit_rsa_cmd->add_option("--rank", fit_rsa_opts.rank, "Residual low-rank columns")->check(CLI::NonNegativeNumber);
  fit_rsa_cmd->add_option("--max-iters", fit_rsa_opts.max_iters, "Optimizer iteration cap")->check(CLI::PositiveNumber);
  fit_rsa_cmd->add_option("--seed", fit_rsa_opts.seed, "Random seed");
  fit_rsa_cmd->add_option("--out", fit_rsa_opts.out, "Result record path (default stdout)");

  FitSrmOptions fit_srm_opts;
  auto* fit_srm_cmd = fit->add_subcommand("srm", "MN-SRM or DP-SRM by ECM");
  fit_srm_cmd->add_option("--data-dir", fit_srm_opts.data_dir, "Directory of subject_* matrices (v x t)")->required();
  fit_srm_cmd->add_option("--k", fit_srm_opts.k, "Shared features")->required()->check(CLI::PositiveNumber);
  fit_srm_cmd->add_option("--variant", fit_srm_opts.variant, "dp or mn")->check(CLI::IsMember({"dp", "mn"}));
  fit_srm_cmd->add_option("--spatial", fit_srm_opts.spatial, "Spatial covariance kind")->check(CLI::IsMember(kind_names));
  fit_srm_cmd->add_option("--temporal", fit_srm_opts.temporal, "Temporal covariance kind")->check(CLI::IsMember(kind_names));
  fit_srm_cmd->add_option("--max-iters", fit_srm_opts.max_iters, "ECM iteration cap")->check(CLI::PositiveNumber);
  fit_srm_cmd->add_option("--rel-tol", fit_srm_opts.rel_tol, "Relative log-likelihood tolerance")->check(CLI::PositiveNumber);
  fit_srm_cmd->add_option("--seed", fit_srm_opts.seed, "Random seed");
  fit_srm_cmd->add_option("--model-out", fit_srm_opts.model_out, "Directory to save the fitted model");
  fit_srm_cmd->add_option("--out", fit_srm_opts.out, "Result record path (default stdout)");

  auto* eval = app.add_subcommand("eval", "Score a fit against ground truth or held-out data");
  eval->require_subcommand(1);
  EvalRsaOptions eval_rsa_opts;
  auto* eval_rsa_cmd = eval->add_subcommand("rsa", "rmse between estimated and true correlation");
  eval_rsa_cmd->add_option("--est", eval_rsa_opts.est, "Record written by fit rsa")->required();
  eval_rsa_cmd->add_option("--truth", eval_rsa_opts.truth, "True c x c correlation matrix")->required();
  eval_rsa_cmd->add_option("--out", eval_rsa_opts.out, "Result record path (default stdout)");
  EvalSrmOptions eval_srm_opts;
  auto* eval_srm_cmd = eval->add_subcommand("srm", "Held-out reconstruction error");
  eval_srm_cmd->add_option("--model", eval_srm_opts.model, "Model directory from fit srm --model-out")->required();
  eval_srm_cmd->add_option("--heldout", eval_srm_opts.heldout, "Held-out subject matrix (v x t)")->required();
  eval_srm_cmd->add_option("--out", eval_srm_opts.out, "Result record path (default stdout)");

  auto* bench = app.add_subcommand("bench", "Timing and accuracy grids");
  bench->require_subcommand(1);
  BenchOptions bench_opts;
  auto* bench_rsa_cmd = bench->add_subcommand("rsa", "MN-RSA vs naive RSA over a grid; one JSON line per cell");
  bench_rsa_cmd->add_option("--voxels", bench_opts.voxels, "Voxel counts")->delimiter(',');
  bench_rsa_cmd->add_option("--trs", bench_opts.trs, "Timepoint counts")->delimiter(',');
  bench_rsa_cmd->add_option("--snrs", bench_opts.snrs, "SNR levels")->delimiter(',');
  bench_rsa_cmd->add_option("--reps", bench_opts.reps, "Repetitions per cell")->check(CLI::PositiveNumber);
  bench_rsa_cmd->add_option("--conditions", bench_opts.conditions, "Conditions c")->check(CLI::PositiveNumber);
  bench_rsa_cmd->add_option("--rank", bench_opts.rank, "Residual low-rank columns")->check(CLI::NonNegativeNumber);
  bench_rsa_cmd->add_option("--max-iters", bench_opts.max_iters, "Optimizer iteration cap")->check(CLI::PositiveNumber);
  bench_rsa_cmd->add_option("--jobs", bench_opts.jobs, "Cells run concurrently")->check(CLI::PositiveNumber);
  bench_rsa_cmd->add_option("--seed", bench_opts.seed, "Seed of the first cell; later cells count up");
  bench_rsa_cmd->add_option("--out", bench_opts.out, "JSON-lines output path (default stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return exit_usage;
  }

  if (*gen_rsa_cmd) return gen_rsa(gen_opts, out);
  if (*gen_srm_cmd) return gen_srm(gen_opts, out);
  if (*fit_rsa_cmd) return fit_rsa(fit_rsa_opts, out);
  if (*fit_srm_cmd) return fit_srm(fit_srm_opts, out);
  if (*eval_rsa_cmd) return eval_rsa(eval_rsa_opts, out);
  if (*eval_srm_cmd) return eval_srm(eval_srm_opts, out);
  if (*bench_rsa_cmd) {
    bench_opts.voxels.erase(std::remove(bench_opts.voxels.begin(), bench_opts.voxels.end(), 0), bench_opts.voxels.end());
    if (bench_opts.voxels.empty() || bench_opts.trs.empty() || bench_opts.snrs.empty()) {
      err << "bench rsa: grid lists must be non-empty\n";
      return exit_usage;
    }
    return bench_rsa(bench_opts, out);
  }
  err << app.help();
  return exit_usage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return exit_input;
  } catch (const json::exception& e) {
    err << "input error: " << e.what() << "\n";
    return exit_input;
  } catch (const fs::filesystem_error& e) {
    err << "input error: " << e.what() << "\n";
    return exit_input;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return exit_numerical;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return exit_internal;
  }
}

}  // namespace mnkit::cli
