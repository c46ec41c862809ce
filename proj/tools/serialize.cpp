#include "serialize.hpp"

#include "matrix_io.hpp"

#include "mnkit/errors.hpp"

#include <algorithm>
#include <string>

namespace mnkit::cli {

namespace {

constexpr int model_format_version = 1;

template <typename T>
void read_field(const json& j, const char* key, T& out, std::string_view context) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError(std::string(context) + ": field '" + key + "' has the wrong type");
  }
}

json vector_to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from_json(const json& j, std::string_view context) {
  if (!j.is_array()) throw InputError(std::string(context) + " must be an array of numbers");
  VectorXd v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw InputError(std::string(context) + " must be an array of numbers");
    v[static_cast<Index>(i)] = j[i].get<double>();
  }
  return v;
}

}  // namespace

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view context) {
  if (!j.is_object()) throw InputError(std::string(context) + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw InputError(std::string(context) + ": unknown field '" + item.key() + "'");
    }
  }
}

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) rows.push_back(vector_to_json(m.row(i).transpose()));
  return rows;
}

MatrixXd matrix_from_json(const json& j, std::string_view context) {
  if (!j.is_array() || j.empty()) throw InputError(std::string(context) + " must be a non-empty array of rows");
  const VectorXd first = vector_from_json(j[0], context);
  MatrixXd m(static_cast<Index>(j.size()), first.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const VectorXd row = vector_from_json(j[i], context);
    if (row.size() != m.cols()) throw InputError(std::string(context) + ": rows differ in length");
    m.row(static_cast<Index>(i)) = row.transpose();
  }
  return m;
}

json cov_spec_to_json(const CovSpec& spec) {
  json j{{"kind", std::string(to_string(spec.kind))}, {"dim", spec.dim}};
  if (!spec.parts.empty()) {
    json parts = json::array();
    for (const CovSpec& p : spec.parts) parts.push_back(cov_spec_to_json(p));
    j["parts"] = parts;
  }
  if (spec.mask) j["mask"] = std::vector<bool>(*spec.mask);
  if (spec.fixed_factor.size() > 0) j["fixed_factor"] = matrix_to_json(spec.fixed_factor);
  if (spec.learned_rank != 0) j["learned_rank"] = spec.learned_rank;
  if (spec.blocks != 0) j["blocks"] = spec.blocks;
  if (spec.seed != 0) j["seed"] = spec.seed;
  if (spec.params) j["params"] = vector_to_json(*spec.params);
  return j;
}

CovSpec cov_spec_from_json(const json& j) {
  check_keys(j, {"kind", "dim", "parts", "mask", "fixed_factor", "learned_rank", "blocks", "seed", "params"},
             "covariance spec");
  if (!j.contains("kind") || !j["kind"].is_string()) throw InputError("covariance spec needs a string 'kind'");
  CovSpec spec;
  spec.kind = cov_kind_from_string(j["kind"].get<std::string>());
  read_field(j, "dim", spec.dim, "covariance spec");
  read_field(j, "learned_rank", spec.learned_rank, "covariance spec");
  read_field(j, "blocks", spec.blocks, "covariance spec");
  read_field(j, "seed", spec.seed, "covariance spec");
  if (j.contains("parts")) {
    if (!j["parts"].is_array()) throw InputError("covariance spec: 'parts' must be an array");
    for (const json& p : j["parts"]) spec.parts.push_back(cov_spec_from_json(p));
  }
  if (j.contains("mask")) {
    std::vector<bool> mask;
    read_field(j, "mask", mask, "covariance spec");
    spec.mask = mask;
  }
  if (j.contains("fixed_factor")) spec.fixed_factor = matrix_from_json(j["fixed_factor"], "fixed_factor");
  if (j.contains("params")) spec.params = vector_from_json(j["params"], "covariance params");
  return spec;
}

json to_json(const RsaSynthConfig& c) {
  return {{"t", c.t},
          {"v", c.v},
          {"c", c.c},
          {"snr", c.snr},
          {"ar1_rho", c.ar1_rho},
          {"gp_lengthscale", c.gp_lengthscale},
          {"n_nuisance", c.n_nuisance},
          {"condition_bound", c.condition_bound},
          {"seed", c.seed}};
}

json to_json(const SrmSynthConfig& c) {
  return {{"n", c.n},
          {"v", c.v},
          {"t", c.t},
          {"k", c.k},
          {"n_heldout", c.n_heldout},
          {"snr", c.snr},
          {"orthonormal_w", c.orthonormal_w},
          {"ar1_rho", c.ar1_rho},
          {"shared_rho", c.shared_rho},
          {"seed", c.seed}};
}

RsaSynthConfig rsa_synth_from_json(const json& j) {
  constexpr std::string_view ctx = "rsa config";
  check_keys(j, {"t", "v", "c", "snr", "ar1_rho", "gp_lengthscale", "n_nuisance", "condition_bound", "seed"}, ctx);
  RsaSynthConfig c;
  read_field(j, "t", c.t, ctx);
  read_field(j, "v", c.v, ctx);
  read_field(j, "c", c.c, ctx);
  read_field(j, "snr", c.snr, ctx);
  read_field(j, "ar1_rho", c.ar1_rho, ctx);
  read_field(j, "gp_lengthscale", c.gp_lengthscale, ctx);
  read_field(j, "n_nuisance", c.n_nuisance, ctx);
  read_field(j, "condition_bound", c.condition_bound, ctx);
  read_field(j, "seed", c.seed, ctx);
  c.validate();
  return c;
}

SrmSynthConfig srm_synth_from_json(const json& j) {
  constexpr std::string_view ctx = "srm config";
  check_keys(j, {"n", "v", "t", "k", "n_heldout", "snr", "orthonormal_w", "ar1_rho", "shared_rho", "seed"}, ctx);
  SrmSynthConfig c;
  read_field(j, "n", c.n, ctx);
  read_field(j, "v", c.v, ctx);
  read_field(j, "t", c.t, ctx);
  read_field(j, "k", c.k, ctx);
  read_field(j, "n_heldout", c.n_heldout, ctx);
  read_field(j, "snr", c.snr, ctx);
  read_field(j, "orthonormal_w", c.orthonormal_w, ctx);
  read_field(j, "ar1_rho", c.ar1_rho, ctx);
  read_field(j, "shared_rho", c.shared_rho, ctx);
  read_field(j, "seed", c.seed, ctx);
  c.validate();
  return c;
}

void save_srm_model(const std::filesystem::path& dir, const SrmModel& m, SrmVariant variant) {
  std::filesystem::create_directories(dir);
  MatrixXd b(m.b.front().size(), m.n());
  for (Index j = 0; j < m.n(); ++j) b.col(j) = m.b[static_cast<std::size_t>(j)];
  write_matrix(dir / "s.mnm", m.s);
  write_matrix(dir / "b.mnm", b);
  write_matrix(dir / "w_post_mean.mnm", m.w_post_mean);
  write_matrix(dir / "w_post_colcov.mnm", m.w_post_colcov);
  const json manifest{{"format", "mnkit-srm-model"},
                      {"format_version", model_format_version},
                      {"variant", std::string(to_string(variant))},
                      {"k", m.k()},
                      {"n", m.n()},
                      {"v", b.rows()},
                      {"t", m.s.cols()},
                      {"tau2", vector_to_json(m.tau2)},
                      {"sigma_v", cov_spec_to_json(m.sigma_v->spec())},
                      {"sigma_t", cov_spec_to_json(m.sigma_t->spec())},
                      {"latent_prior", m.latent_prior},
                      {"iterations", m.iterations},
                      {"converged", m.converged},
                      {"loglik_trace", m.loglik_trace}};
  // Written last so a directory with a manifest always has its matrices.
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedSrmModel load_srm_model(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw InputError((dir / "manifest.json").string() + ": " + e.what());
  }
  check_keys(manifest, {"format", "format_version", "variant", "k", "n", "v", "t", "tau2", "sigma_v", "sigma_t",
                        "latent_prior", "iterations", "converged", "loglik_trace"},
             "model manifest");
  if (manifest.value("format", "") != "mnkit-srm-model" || manifest.value("format_version", 0) != model_format_version) {
    throw InputError((dir / "manifest.json").string() + " is not a version 1 SRM model manifest");
  }
  LoadedSrmModel out;
  SrmModel& m = out.model;
  out.variant = srm_variant_from_string(manifest["variant"].get<std::string>());
  m.s = read_matrix(dir / "s.mnm");
  const MatrixXd b = read_matrix(dir / "b.mnm");
  m.w_post_mean = read_matrix(dir / "w_post_mean.mnm");
  m.w_post_colcov = read_matrix(dir / "w_post_colcov.mnm");
  m.tau2 = vector_from_json(manifest["tau2"], "tau2");
  m.sigma_v = make_cov(cov_spec_from_json(manifest["sigma_v"]));
  m.sigma_t = make_cov(cov_spec_from_json(manifest["sigma_t"]));
  read_field(manifest, "latent_prior", m.latent_prior, "model manifest");
  read_field(manifest, "iterations", m.iterations, "model manifest");
  read_field(manifest, "converged", m.converged, "model manifest");
  read_field(manifest, "loglik_trace", m.loglik_trace, "model manifest");
  for (Index j = 0; j < b.cols(); ++j) m.b.push_back(b.col(j));
  const Index k = manifest.value("k", Index{0}), t = manifest.value("t", Index{0}), v = manifest.value("v", Index{0});
  if (m.s.rows() != k || m.s.cols() != t || b.rows() != v || b.cols() != m.tau2.size() ||
      m.sigma_v->dim() != v || m.sigma_t->dim() != t || m.w_post_colcov.rows() != k) {
    throw InputError(dir.string() + ": model files disagree with the manifest dimensions");
  }
  return out;
}

}  // namespace mnkit::cli
