#include "mnkit/mnsrm.hpp"

#include "mnkit/errors.hpp"
#include "mnkit/matnorm.hpp"

#include <cmath>
#include <string>

namespace mnkit {

namespace {

CovSpec default_spec(SrmVariant variant, bool spatial) {
  if (variant == SrmVariant::dp) return CovSpec::simple(CovKind::identity, 0);
  return CovSpec::simple(spatial ? CovKind::diagonal : CovKind::ar1, 0);
}

CovPtr build_cov(CovSpec spec, Index dim, std::string_view what, SrmVariant variant) {
  if (spec.kind == CovKind::kron || spec.kind == CovKind::lowrank_plus || spec.kind == CovKind::block_scaled) {
    throw InputError(std::string(what) + " covariance must be a simple kind for SRM");
  }
  if (variant == SrmVariant::dp && spec.kind != CovKind::identity) {
    throw InputError("DP-SRM uses identity covariances; got " + std::string(to_string(spec.kind)) + " for " +
                     std::string(what));
  }
  if (spec.dim == 0) spec.dim = dim;
  if (spec.dim != dim) {
    throw InputError(std::string(what) + " covariance has dimension " + std::to_string(spec.dim) + ", data needs " +
                     std::to_string(dim));
  }
  return make_cov(spec);
}

void check_model(const SrmDataset& data, const SrmModel& m) {
  if (!m.sigma_v || !m.sigma_t) throw InputError("SRM: model is missing a covariance");
  if (m.s.cols() != data.t() || m.tau2.size() != data.n() || static_cast<Index>(m.b.size()) != data.n() ||
      m.sigma_v->dim() != data.v() || m.sigma_t->dim() != data.t()) {
    throw InputError("SRM: model dimensions do not match the data");
  }
  for (const auto& b : m.b)
    if (b.size() != data.v()) throw InputError("SRM: intercept length does not match the voxel count");
}

MatrixXd stacked_intercepts(const SrmModel& m, Index t) {
  const Index v = m.b.front().size();
  MatrixXd out(m.n() * v, t);
  for (Index j = 0; j < m.n(); ++j) out.middleRows(j * v, v) = m.b[static_cast<std::size_t>(j)].replicate(1, t);
  return out;
}

// Tr[Σ_w′ (I + S Σ_t⁻¹ Sᵀ)].
double posterior_trace(const SrmModel& m, const SrmStats& stats) {
  const MatrixXd k = MatrixXd::Identity(m.k(), m.k()) + m.s * m.sigma_t->solve(m.s.transpose());
  return stats.w_colcov.cwiseProduct(k).sum();
}

}  // namespace

std::string_view to_string(SrmVariant v) { return v == SrmVariant::dp ? "dp" : "mn"; }

SrmVariant srm_variant_from_string(std::string_view name) {
  if (name == "dp") return SrmVariant::dp;
  if (name == "mn") return SrmVariant::mn;
  throw InputError("unknown SRM variant '" + std::string(name) + "' (expected dp or mn)");
}

void SrmDataset::validate() const {
  if (subjects.size() < 2) throw InputError("SRM: need at least two subjects");
  for (std::size_t j = 0; j < subjects.size(); ++j) {
    const MatrixXd& x = subjects[j];
    if (x.rows() != v() || x.cols() != t()) {
      throw InputError("SRM: subject " + std::to_string(j) + " is " + std::to_string(x.rows()) + "x" +
                       std::to_string(x.cols()) + ", expected " + std::to_string(v()) + "x" + std::to_string(t()));
    }
    if (x.size() == 0) throw InputError("SRM: empty subject matrix");
    if (!x.allFinite()) throw InputError("SRM: subject " + std::to_string(j) + " has non-finite entries");
    for (Index i = 0; i < x.rows(); ++i) {
      if (x.row(i).maxCoeff() == x.row(i).minCoeff()) {
        throw InputError("SRM: subject " + std::to_string(j) + " voxel " + std::to_string(i) + " is constant");
      }
    }
  }
}

MatrixXd SrmDataset::stacked() const {
  MatrixXd out(n() * v(), t());
  for (Index j = 0; j < n(); ++j) out.middleRows(j * v(), v()) = subjects[static_cast<std::size_t>(j)];
  return out;
}

Index SrmModel::free_parameter_count() const {
  Index count = s.size() + (n() - 1) + sigma_v->n_params() + sigma_t->n_params();
  for (const auto& bj : b) count += bj.size();
  return count;
}

CovPtr SrmModel::row_cov() const {
  if (tau2[0] == 1.0) return make_block_scaled(sigma_v, tau2);
  // Unanchored precisions: move τ_1² into Σ_v so the block model stays anchored.
  return make_block_scaled(full_rank_from_matrix(sigma_v->dense() / tau2[0]), tau2 / tau2[0]);
}

CovPtr SrmModel::col_cov() const {
  return make_lowrank_plus(sigma_t, s.transpose(), make_cov(CovSpec::simple(CovKind::identity, k())),
                           MatrixXd(s.cols(), 0));
}

SrmStats srm_e_step(const SrmDataset& data, const SrmModel& model) {
  check_model(data, model);
  const MatrixXd tinv_st = model.sigma_t->solve(model.s.transpose());  // Σ_t⁻¹ Sᵀ
  const MatrixXd precision = MatrixXd::Identity(model.k(), model.k()) + model.s * tinv_st;
  Eigen::LLT<MatrixXd> llt(0.5 * (precision + precision.transpose()));
  if (llt.info() != Eigen::Success) throw ConditioningError("SRM E-step: I + S Σ_t⁻¹ Sᵀ is not positive definite");
  SrmStats stats;
  stats.w_colcov = llt.solve(MatrixXd::Identity(model.k(), model.k()));
  stats.w_colcov = 0.5 * (stats.w_colcov + stats.w_colcov.transpose());
  stats.w_mean = (data.stacked() - stacked_intercepts(model, data.t())) * tinv_st * stats.w_colcov;
  return stats;
}

SrmModel srm_cm_step(const SrmDataset& data, const SrmModel& model, const SrmStats& stats) {
  check_model(data, model);
  const Index n = data.n(), v = data.v(), t = data.t(), k = model.k();
  if (stats.w_mean.rows() != n * v || stats.w_mean.cols() != k || stats.w_colcov.rows() != k) {
    throw InputError("SRM CM-step: sufficient statistics do not match the model");
  }
  const MatrixXd x = data.stacked();
  const MatrixXd& wm = stats.w_mean;
  const MatrixXd& sw = stats.w_colcov;
  const double nv = static_cast<double>(n * v);
  const double prior = model.latent_prior ? 1.0 : 0.0;
  SrmModel next = model;

  // ρ and Σ_v are unchanged until their own steps, so Tr[A⁻¹A′] = nv here.
  const CovPtr a = model.row_cov();
  const MatrixXd ainv_w = a->solve(wm);

  // S
  {
    MatrixXd lhs = wm.transpose() * ainv_w + nv * sw + prior * MatrixXd::Identity(k, k);
    lhs = 0.5 * (lhs + lhs.transpose());
    Eigen::LLT<MatrixXd> llt(lhs);
    if (llt.info() != Eigen::Success) throw ConditioningError("SRM CM-step: the S system is singular");
    next.s = llt.solve(ainv_w.transpose() * (x - stacked_intercepts(model, t)));
  }
  const MatrixXd& s = next.s;

  // b
  {
    const VectorXd u = model.sigma_t->solve(VectorXd::Ones(t));
    const VectorXd bs = (x - wm * s) * u / u.sum();
    for (Index j = 0; j < n; ++j) next.b[static_cast<std::size_t>(j)] = bs.segment(j * v, v);
  }
  const MatrixXd r = x - stacked_intercepts(next, t) - wm * s;

  // Σ_t
  {
    MatrixXd scatter = r.transpose() * a->solve(r) + nv * s.transpose() * sw * s + prior * s.transpose() * s;
    scatter = 0.5 * (scatter + scatter.transpose());
    next.sigma_t = model.sigma_t->fit_scatter(scatter, nv + prior * static_cast<double>(k));
  }

  // Σ_v
  const MatrixXd rt = next.sigma_t->solve(r.transpose());  // Σ_t⁻¹ Rᵀ, t × nv
  const double post_trace = posterior_trace(next, stats);
  const MatrixXd sigma_v_prev = model.sigma_v->dense();
  {
    MatrixXd scatter = static_cast<double>(n) * post_trace * sigma_v_prev;
    for (Index j = 0; j < n; ++j) {
      const auto rj = r.middleRows(j * v, v);
      const auto wj = wm.middleRows(j * v, v);
      scatter += model.tau2[j] * (rj * rt.middleCols(j * v, v) + wj * wj.transpose());
    }
    scatter = 0.5 * (scatter + scatter.transpose());
    next.sigma_v = model.sigma_v->fit_scatter(scatter, static_cast<double>(n * (k + t)));
  }

  // τ_j² for j ≥ 2; τ_1 stays at 1.
  {
    const double coupling = next.sigma_v->solve(sigma_v_prev).trace() * post_trace;
    for (Index j = 1; j < n; ++j) {
      const auto rj = r.middleRows(j * v, v);
      const auto wj = wm.middleRows(j * v, v);
      const MatrixXd vinv_r = next.sigma_v->solve(rj);
      const MatrixXd vinv_w = next.sigma_v->solve(wj);
      const double q = vinv_r.cwiseProduct(rt.middleCols(j * v, v).transpose()).sum() +
                       vinv_w.cwiseProduct(wj).sum() + coupling / model.tau2[j];
      next.tau2[j] = static_cast<double>(v * (k + t)) / q;
    }
  }
  return next;
}

double srm_q_function(const SrmDataset& data, const SrmModel& params, const SrmModel& previous,
                      const SrmStats& stats) {
  check_model(data, params);
  const Index n = data.n(), v = data.v(), t = data.t(), k = params.k();
  const CovPtr a = params.row_cov();
  const MatrixXd r = data.stacked() - stacked_intercepts(params, t) - stats.w_mean * params.s;
  double tr_rho = 0.0;
  for (Index j = 0; j < n; ++j) tr_rho += params.tau2[j] / previous.tau2[j];
  const double c_a = tr_rho * params.sigma_v->solve(previous.sigma_v->dense()).trace();
  const MatrixXd tinv_st = params.sigma_t->solve(params.s.transpose());
  double q = -0.5 * static_cast<double>(t + k) * a->logdet() - 0.5 * static_cast<double>(n * v) * params.sigma_t->logdet();
  q -= 0.5 * params.sigma_t->solve(r.transpose()).cwiseProduct(a->solve(r).transpose()).sum();
  q -= 0.5 * c_a * (params.s.transpose() * stats.w_colcov).cwiseProduct(tinv_st).sum();
  q -= 0.5 * a->solve(stats.w_mean).cwiseProduct(stats.w_mean).sum();
  q -= 0.5 * c_a * stats.w_colcov.trace();
  if (params.latent_prior) {
    q -= 0.5 * static_cast<double>(k) * params.sigma_t->logdet();
    q -= 0.5 * tinv_st.cwiseProduct(params.s.transpose()).sum();
  }
  return q;
}

double srm_marginal_loglik(const SrmDataset& data, const SrmModel& model) {
  check_model(data, model);
  return mn_logpdf(data.stacked(), {stacked_intercepts(model, data.t()), model.row_cov(), model.col_cov()});
}

namespace {

double monitored(const SrmDataset& data, const SrmModel& model) {
  double value = srm_marginal_loglik(data, model);
  if (model.latent_prior) {
    value += mn_logpdf(model.s, {MatrixXd::Zero(model.k(), data.t()),
                                 make_cov(CovSpec::simple(CovKind::identity, model.k())), model.sigma_t});
  }
  return value;
}

}  // namespace

SrmModel srm_initialize(const SrmDataset& data, const SrmConfig& cfg) {
  data.validate();
  const Index n = data.n(), v = data.v(), t = data.t();
  if (cfg.k < 1 || cfg.k >= std::min(v, t)) {
    throw InputError("SRM: k must satisfy 1 <= k < min(v, t) = " + std::to_string(std::min(v, t)));
  }
  if (cfg.max_iters < 0 || !(cfg.rel_tol > 0)) throw InputError("SRM: max_iters and rel_tol must be positive");
  SrmModel m;
  m.latent_prior = cfg.latent_prior;
  m.sigma_v = build_cov(cfg.spatial.value_or(default_spec(cfg.variant, true)), v, "spatial", cfg.variant);
  m.sigma_t = build_cov(cfg.temporal.value_or(default_spec(cfg.variant, false)), t, "temporal", cfg.variant);
  m.tau2 = VectorXd::Ones(n);
  MatrixXd centered = data.stacked();
  for (Index j = 0; j < n; ++j) {
    const VectorXd mean = data.subjects[static_cast<std::size_t>(j)].rowwise().mean();
    m.b.push_back(mean);
    centered.middleRows(j * v, v).colwise() -= mean;
  }
  Eigen::BDCSVD<MatrixXd> svd(centered, Eigen::ComputeThinV);
  const VectorXd sv = svd.singularValues().head(cfg.k) / std::sqrt(static_cast<double>(n * v));
  m.s = sv.asDiagonal() * svd.matrixV().leftCols(cfg.k).transpose();
  const SrmStats stats = srm_e_step(data, m);
  m.w_post_mean = stats.w_mean;
  m.w_post_colcov = stats.w_colcov;
  return m;
}

SrmModel fit_srm_ecm(const SrmDataset& data, const SrmConfig& cfg) {
  return fit_srm_ecm(data, cfg, srm_initialize(data, cfg));
}

SrmModel fit_srm_ecm(const SrmDataset& data, const SrmConfig& cfg, const SrmModel& init) {
  data.validate();
  check_model(data, init);
  if (cfg.max_iters < 0 || !(cfg.rel_tol > 0)) throw InputError("SRM: max_iters and rel_tol must be positive");
  SrmModel model = init;
  model.latent_prior = cfg.latent_prior;
  model.loglik_trace.clear();
  model.iterations = 0;
  model.converged = false;
  double current = monitored(data, model);
  if (!std::isfinite(current)) throw FitError("SRM: log-likelihood is not finite at the initial model");
  model.loglik_trace.push_back(current);

  for (int it = 1; it <= cfg.max_iters; ++it) {
    SrmModel next;
    try {
      next = srm_cm_step(data, model, srm_e_step(data, model));
    } catch (const ConditioningError& e) {
      throw ConditioningError(std::string(e.what()) + " (iteration " + std::to_string(it) + ")");
    }
    const double value = monitored(data, next);
    if (!std::isfinite(value)) {
      throw FitError("SRM: log-likelihood became non-finite at iteration " + std::to_string(it));
    }
    next.loglik_trace = std::move(model.loglik_trace);
    next.loglik_trace.push_back(value);
    next.iterations = it;
    model = std::move(next);
    const double previous = current;
    current = value;
    if (std::abs(current - previous) <= cfg.rel_tol * std::abs(previous)) {
      model.converged = true;
      break;
    }
  }
  const SrmStats stats = srm_e_step(data, model);
  model.w_post_mean = stats.w_mean;
  model.w_post_colcov = stats.w_colcov;
  return model;
}

MatrixXd transform_new_subject(const SrmModel& model, const MatrixXd& y_new) {
  return transform_new_subject(model, y_new, y_new.rowwise().mean());
}

MatrixXd transform_new_subject(const SrmModel& model, const MatrixXd& y_new, const VectorXd& intercept) {
  if (y_new.cols() != model.s.cols() || y_new.rows() != model.sigma_v->dim() || intercept.size() != y_new.rows()) {
    throw InputError("transform: new subject is " + std::to_string(y_new.rows()) + "x" +
                     std::to_string(y_new.cols()) + ", model expects " + std::to_string(model.sigma_v->dim()) + "x" +
                     std::to_string(model.s.cols()));
  }
  const MatrixXd tinv_st = model.sigma_t->solve(model.s.transpose());
  const MatrixXd precision = MatrixXd::Identity(model.k(), model.k()) + model.s * tinv_st;
  const MatrixXd centered = y_new.colwise() - intercept;
  return Eigen::LLT<MatrixXd>(precision).solve((centered * tinv_st).transpose()).transpose();
}

Reconstruction reconstruct(const SrmModel& model, const MatrixXd& w, const VectorXd& b, const MatrixXd& y) {
  if (w.cols() != model.k() || w.rows() != b.size() || y.rows() != w.rows() || y.cols() != model.s.cols()) {
    throw InputError("reconstruct: dimensions of W, b and Y do not match the model");
  }
  Reconstruction out;
  out.y_hat = w * model.s;
  out.y_hat.colwise() += b;
  const MatrixXd centered = y.colwise() - y.rowwise().mean();
  out.error = (y - out.y_hat).norm() / centered.norm();
  return out;
}

}  // namespace mnkit
