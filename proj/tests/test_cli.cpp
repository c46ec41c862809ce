#include "doctest.h"
#include "oracles.hpp"

#include "cli.hpp"
#include "matrix_io.hpp"
#include "serialize.hpp"

#include "mnkit/errors.hpp"

#include <cstring>
#include <filesystem>
#include <sstream>
#include <unistd.h>

using namespace mnkit;
using namespace mnkit::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mnkit_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int n = 0;
    return n;
  }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

json record(const Outcome& o) {
  REQUIRE(o.code == 0);
  return json::parse(o.out);
}

json without_timings(json j) {
  j.erase("timings");
  return j;
}

std::vector<std::string> echo_argv(const json& rec) { return rec["config"]["argv"].get<std::vector<std::string>>(); }

}  // namespace

TEST_CASE("binary matrix format") {
  const MatrixXd one = MatrixXd::Constant(1, 1, 3.5);
  const std::string bytes = encode_binary(one);
  CHECK(bytes.size() == 32);
  CHECK(bytes.substr(0, 4) == "MNM1");
  CHECK(decode_binary(bytes)(0, 0) == 3.5);

  std::mt19937_64 rng(1);
  const MatrixXd m = oracle::randn(100, 37, rng);
  const MatrixXd back = decode_binary(encode_binary(m));
  REQUIRE(back.rows() == 100);
  REQUIRE(back.cols() == 37);
  CHECK(std::memcmp(back.data(), m.data(), sizeof(double) * 3700) == 0);

  TempDir dir;
  write_matrix(dir / "m.mnm", m);
  CHECK(fs::file_size(dir / "m.mnm") == 24 + 8 * 3700);
  const MatrixXd from_file = read_matrix(dir / "m.mnm");
  CHECK(std::memcmp(from_file.data(), m.data(), sizeof(double) * 3700) == 0);
}

TEST_CASE("binary decoding errors carry byte offsets") {
  const std::string good = encode_binary(MatrixXd::Ones(2, 3));
  auto message = [](const std::string& bytes) {
    try {
      decode_binary(bytes, "f");
    } catch (const InputError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message(good.substr(0, 10)).find("byte offset 10") != std::string::npos);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(message(bad_magic).find("byte offset 0") != std::string::npos);
  std::string bad_version = good;
  bad_version[4] = 2;
  CHECK(message(bad_version).find("byte offset 4") != std::string::npos);
  CHECK(message(good.substr(0, good.size() - 3)).find("byte offset " + std::to_string(good.size() - 3)) !=
        std::string::npos);
  CHECK(message(good + "x").find("byte offset " + std::to_string(good.size())) != std::string::npos);
  CHECK(message(encode_binary(MatrixXd::Ones(1, 1)).replace(8, 8, std::string(8, '\0'))).find("empty") !=
        std::string::npos);
}

TEST_CASE("CSV matrix format") {
  const MatrixXd m = decode_csv("1,2\n3,4\n");
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 2);
  CHECK(m(0, 1) == 2.0);
  CHECK(m(1, 0) == 3.0);
  CHECK(decode_csv("1, -2.5e-3\r\n3,4").rows() == 2);

  std::mt19937_64 rng(2);
  const MatrixXd r = oracle::randn(7, 5, rng);
  CHECK((decode_csv(encode_csv(r)) - r).cwiseAbs().maxCoeff() <= 1e-15);

  CHECK_THROWS_WITH_AS(decode_csv("1,2\n3,x\n"), doctest::Contains("row 2, column 2"), InputError);
  CHECK_THROWS_WITH_AS(decode_csv("1,2\n3\n"), doctest::Contains("row 2"), InputError);
  CHECK_THROWS_AS(decode_csv("1,2\n\n3,4\n"), InputError);
  CHECK_THROWS_AS(decode_csv(""), InputError);
  CHECK_THROWS_AS(decode_csv("1,,2\n"), InputError);
}

TEST_CASE("covariance specs and configs round-trip through JSON") {
  const CovSpec spec = CovSpec::kron({CovSpec::simple(CovKind::diagonal, 2), CovSpec::simple(CovKind::ar1, 3)});
  std::mt19937_64 rng(3);
  const CovPtr model = make_cov(spec)->with_params(oracle::randn_vec(make_cov(spec)->n_params(), rng));
  const CovPtr back = make_cov(cov_spec_from_json(json::parse(cov_spec_to_json(model->spec()).dump())));
  CHECK((back->dense() - model->dense()).norm() == 0.0);
  CHECK_THROWS_AS(cov_spec_from_json(json{{"kind", "ar1"}, {"dimension", 3}}), InputError);
  CHECK_THROWS_AS(cov_spec_from_json(json{{"kind", "banana"}}), InputError);

  RsaSynthConfig rc;
  rc.v = 77;
  rc.snr = 0.3;
  CHECK(to_json(rsa_synth_from_json(to_json(rc))) == to_json(rc));
  CHECK_THROWS_AS(rsa_synth_from_json(json{{"voxels", 10}}), InputError);
  CHECK_THROWS_AS(srm_synth_from_json(json{{"k", "three"}}), InputError);
}

TEST_CASE("SRM model directory round-trip") {
  TempDir dir;
  SrmSynthConfig sc;
  sc.n = 3;
  sc.v = 10;
  sc.t = 30;
  sc.k = 2;
  const SrmDataset d{gen_srm_synth(sc).subjects};
  SrmConfig cfg;
  cfg.k = 2;
  cfg.max_iters = 10;
  const SrmModel m = fit_srm_ecm(d, cfg);
  save_srm_model(dir.path / "model", m, cfg.variant);
  const LoadedSrmModel loaded = load_srm_model(dir.path / "model");
  CHECK(loaded.variant == SrmVariant::mn);
  CHECK(srm_marginal_loglik(d, loaded.model) == srm_marginal_loglik(d, m));
  CHECK(loaded.model.loglik_trace == m.loglik_trace);
  CHECK((transform_new_subject(loaded.model, d.subjects[0]) - transform_new_subject(m, d.subjects[0])).norm() == 0.0);
}

TEST_CASE("end-to-end RSA: finite metric, determinism and rerunnable echo") {
  TempDir dir;
  write_file(dir / "cfg.json", R"({"t": 80, "v": 30, "c": 4, "snr": 1.0})");
  const json gen = record(invoke({"gen", "rsa", "--config", dir / "cfg.json", "--out-dir", dir / "d", "--seed", "7"}));
  CHECK(gen["seed"] == 7);
  const std::vector<std::string> fit_args = {"fit", "rsa", "--data", dir / "d/data.mnm", "--design",
                                             dir / "d/design.mnm", "--rank", "2", "--out", dir / "fit.json"};
  REQUIRE(invoke(fit_args).code == 0);
  const json fit = json::parse(read_file(dir / "fit.json"));
  const json eval = record(invoke({"eval", "rsa", "--est", dir / "fit.json", "--truth", dir / "d/corr_true.mnm"}));
  CHECK(eval["metrics"]["rmse_corr"].is_number());
  CHECK(std::isfinite(eval["metrics"]["rmse_corr"].get<double>()));

  // Same seed, same record apart from wall-clock timings.
  const json gen_again = record(invoke(echo_argv(gen)));
  CHECK(without_timings(gen_again) == without_timings(gen));
  const json fit_again = record(invoke(echo_argv(fit)));
  CHECK(without_timings(fit_again) == without_timings(fit));
  const json eval_again = record(invoke(echo_argv(eval)));
  CHECK(without_timings(eval_again) == without_timings(eval));
}

TEST_CASE("end-to-end SRM") {
  TempDir dir;
  write_file(dir / "cfg.json", R"({"n": 3, "v": 15, "t": 40, "k": 2})");
  record(invoke({"gen", "srm", "--config", dir / "cfg.json", "--out-dir", dir / "d", "--seed", "5"}));
  const json fit = record(invoke({"fit", "srm", "--data-dir", dir / "d", "--k", "2", "--variant", "dp",
                                  "--model-out", dir / "model"}));
  CHECK(fit["metrics"]["free_parameters"] == 2 * 40 + 3 * 15 + 2);
  CHECK(without_timings(record(invoke(echo_argv(fit)))) == without_timings(fit));
  const json eval = record(invoke({"eval", "srm", "--model", dir / "model", "--heldout", dir / "d/heldout_000.mnm"}));
  const double err = eval["metrics"]["reconstruction_error"].get<double>();
  CHECK(err > 0.0);
  CHECK(err < 1.0);
}

TEST_CASE("exit codes") {
  TempDir dir;
  write_file(dir / "cfg.json", R"({"t": 40, "v": 10, "c": 3})");
  REQUIRE(invoke({"gen", "rsa", "--config", dir / "cfg.json", "--out-dir", dir / "d"}).code == 0);
  std::mt19937_64 rng(4);

  SUBCASE("help and version") {
    CHECK(invoke({"--help"}).code == exit_ok);
    CHECK(invoke({"--version"}).code == exit_ok);
  }
  SUBCASE("usage errors") {
    CHECK(invoke({}).code == exit_usage);
    CHECK(invoke({"frobnicate"}).code == exit_usage);
    CHECK(invoke({"fit"}).code == exit_usage);
    CHECK(invoke({"fit", "rsa", "--data", dir / "d/data.mnm"}).code == exit_usage);
    CHECK(invoke({"fit", "srm", "--data-dir", dir / "d", "--k", "2", "--variant", "bayes"}).code == exit_usage);
    CHECK(invoke({"fit", "rsa", "--data", dir / "d/data.mnm", "--design", dir / "d/design.mnm", "--spatial",
                  "banana"}).code == exit_usage);
    CHECK(invoke({"fit", "srm", "--data-dir", dir / "d", "--k", "two"}).code == exit_usage);
  }
  SUBCASE("input errors") {
    // Design with t <= c.
    write_matrix(dir / "wide.mnm", oracle::randn(40, 40, rng));
    CHECK(invoke({"fit", "rsa", "--data", dir / "d/data.mnm", "--design", dir / "wide.mnm"}).code == exit_input);
    const std::string bytes = read_file(dir / "d/data.mnm");
    write_file(dir / "trunc.mnm", bytes.substr(0, bytes.size() - 8));
    const Outcome trunc = invoke({"fit", "rsa", "--data", dir / "trunc.mnm", "--design", dir / "d/design.mnm"});
    CHECK(trunc.code == exit_input);
    CHECK(trunc.err.find("byte offset") != std::string::npos);
    write_file(dir / "magic.mnm", "XXXX" + bytes.substr(4));
    CHECK(invoke({"fit", "rsa", "--data", dir / "magic.mnm", "--design", dir / "d/design.mnm"}).code == exit_input);
    write_file(dir / "bad.csv", "1,2\n3,oops\n");
    CHECK(invoke({"fit", "rsa", "--data", dir / "bad.csv", "--design", dir / "d/design.mnm"}).code == exit_input);
    CHECK(invoke({"fit", "rsa", "--data", dir / "missing.mnm", "--design", dir / "d/design.mnm"}).code == exit_input);
    write_file(dir / "badcfg.json", R"({"voxels": 10})");
    CHECK(invoke({"gen", "rsa", "--config", dir / "badcfg.json", "--out-dir", dir / "x"}).code == exit_input);
    write_file(dir / "notjson.json", "{");
    CHECK(invoke({"gen", "srm", "--config", dir / "notjson.json", "--out-dir", dir / "x"}).code == exit_input);
    CHECK(invoke({"fit", "srm", "--data-dir", dir / "nowhere", "--k", "2"}).code == exit_input);
    CHECK(invoke({"eval", "srm", "--model", dir / "nowhere", "--heldout", dir / "d/data.mnm"}).code == exit_input);
    CHECK(invoke({"eval", "rsa", "--est", dir / "cfg.json", "--truth", dir / "d/corr_true.mnm"}).code == exit_input);
  }
  SUBCASE("numerical errors") {
    // Finite entries whose squares overflow make the likelihood non-finite.
    fs::create_directories(dir.path / "huge");
    for (int j = 0; j < 2; ++j) {
      write_matrix(dir / ("huge/subject_00" + std::to_string(j) + ".mnm"), 1e300 * oracle::randn(8, 20, rng));
    }
    const Outcome o = invoke({"fit", "srm", "--data-dir", dir / "huge", "--k", "2"});
    CHECK(o.code == exit_numerical);
    CHECK(o.err.find("numerical error") != std::string::npos);
  }
}

TEST_CASE("bench default voxel grid and per-cell records") {
  const Outcome o = invoke({"bench", "rsa", "--trs", "40", "--snrs", "0.4", "--reps", "1", "--conditions", "3",
                            "--rank", "0", "--max-iters", "1", "--jobs", "2"});
  REQUIRE(o.code == 0);
  std::istringstream lines(o.out);
  std::string line;
  std::vector<Index> voxels;
  while (std::getline(lines, line)) {
    const json r = json::parse(line);
    CHECK(r["command"] == "bench rsa");
    CHECK(r["timings"]["fit"].get<double>() >= 0.0);
    voxels.push_back(r["config"]["v"].get<Index>());
  }
  std::sort(voxels.begin(), voxels.end());
  CHECK(voxels == std::vector<Index>{2500, 10000});
}
