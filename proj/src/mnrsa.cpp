#include "mnkit/mnrsa.hpp"

#include "mnkit/errors.hpp"
#include "mnkit/matnorm.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace mnkit {

namespace {

bool is_simple(CovKind k) {
  return k != CovKind::kron && k != CovKind::lowrank_plus && k != CovKind::block_scaled;
}

CovSpec fill_dim(CovSpec spec, Index dim, std::string_view what) {
  if (spec.dim == 0 && is_simple(spec.kind)) spec.dim = dim;
  if (spec.dim != 0 && spec.dim != dim) {
    throw InputError(std::string(what) + " covariance has dimension " + std::to_string(spec.dim) + ", data needs " +
                     std::to_string(dim));
  }
  return spec;
}

VectorXd sample_variances(const MatrixXd& y) {
  return y.colwise().squaredNorm().transpose() / static_cast<double>(y.rows());
}

}  // namespace

RsaProblem RsaProblem::make(MatrixXd y, MatrixXd x) {
  if (y.rows() != x.rows()) {
    throw InputError("RSA: data has " + std::to_string(y.rows()) + " timepoints, design has " +
                     std::to_string(x.rows()));
  }
  if (x.cols() < 1) throw InputError("RSA: design needs at least one condition");
  if (y.cols() < 1) throw InputError("RSA: data needs at least one voxel");
  if (y.rows() <= x.cols()) {
    throw InputError("RSA: need more timepoints (" + std::to_string(y.rows()) + ") than conditions (" +
                     std::to_string(x.cols()) + ")");
  }
  if (!y.allFinite() || !x.allFinite()) throw InputError("RSA: data and design must be finite");
  // Centering the data removes an intercept; the design is centered to match.
  y.rowwise() -= y.colwise().mean();
  x.rowwise() -= x.colwise().mean();
  return {std::move(y), std::move(x)};
}

RsaObjective rsa_objective(const RsaProblem& p, const RsaConfig& cfg, std::uint64_t draw) {
  if (cfg.residual_rank < 0) throw InputError("RSA: residual rank must be non-negative");
  const CovSpec temporal = fill_dim(cfg.temporal_base, p.t(), "temporal");
  CovSpec spatial_spec = fill_dim(cfg.spatial, p.v(), "spatial");
  CovSpec row_spec = CovSpec::lowrank_plus(temporal, p.x, cfg.residual_rank);
  row_spec.seed = cfg.seed + draw;
  CovPtr row = make_cov(row_spec);
  CovPtr spatial = make_cov(spatial_spec);

  // Start the spatial covariance at the data scale.
  if (!spatial_spec.params) {
    const VectorXd var = sample_variances(p.y);
    if (spatial->kind() == CovKind::diagonal) {
      spatial = spatial->with_params(var.array().log().matrix());
    } else if (spatial->kind() == CovKind::isotropic) {
      spatial = spatial->with_params(VectorXd::Constant(1, std::log(var.mean())));
    }
  }

  const Index nr = row->n_params();
  const Index ns = spatial->n_params();
  const double constant = -0.5 * static_cast<double>(p.t() * p.v()) * std::log(2.0 * std::numbers::pi);
  RsaObjective out;
  out.row_cov = row;
  out.spatial = spatial;
  out.constant = constant;
  out.init.resize(nr + ns);
  out.init << row->params(), spatial->params();
  out.objective = Objective{nr + ns, [row, spatial, nr, ns, constant, &y = p.y](const VectorXd& theta) {
                              const MatnormDist d{MatrixXd::Zero(y.rows(), y.cols()),
                                                  row->with_params(theta.head(nr)),
                                                  spatial->with_params(theta.tail(ns))};
                              const MatnormGradient g = mn_logpdf_grad(y, d);
                              Evaluation e;
                              e.value = g.value - constant;
                              e.gradient.resize(nr + ns);
                              e.gradient << g.row_params, g.col_params;
                              return e;
                            }};
  return out;
}

RsaResult fit_mnrsa(const RsaProblem& p, const RsaConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  // Redraw the random residual factor if the starting point is not finite.
  std::optional<RsaObjective> obj;
  for (std::uint64_t draw = 0; draw < 3 && !obj; ++draw) {
    RsaObjective candidate = rsa_objective(p, cfg, draw);
    try {
      const Evaluation e = candidate.objective.evaluate(candidate.init);
      if (std::isfinite(e.value) && e.gradient.allFinite()) obj = std::move(candidate);
    } catch (const NumericalError&) {
    }
  }
  if (!obj) throw FitError("MN-RSA: objective is not finite at the initial point after 3 draws");

  const OptimResult opt = maximize(obj->objective, obj->init, cfg.optim);

  RsaResult r;
  const Index nr = obj->row_cov->n_params();
  r.row_cov = obj->row_cov->with_params(opt.params.head(nr));
  r.spatial = obj->spatial->with_params(opt.params.tail(obj->spatial->n_params()));
  const LowRankParts parts = lowrank_parts(*r.row_cov);
  r.temporal = parts.base;
  r.learned = parts.learned;
  // Σ_t and Σ_v share one free scale; express U relative to the mean spatial
  // variance so it is in the units of the data.
  const double spatial_scale = r.spatial->diagonal().mean();
  r.u = spatial_scale * parts.inner->dense();
  r.u = 0.5 * (r.u + r.u.transpose());
  const double mean_var = sample_variances(p.y).mean();
  r.trace_ratio = r.u.trace() / mean_var;
  r.degenerate = r.u.diagonal().minCoeff() < 1e-10 * mean_var;
  if (!r.degenerate) {
    r.corr = u_to_correlation(r.u);
    if (!r.corr) r.degenerate = true;
  }
  r.loglik = opt.value + obj->constant;
  for (const auto& tp : opt.trace) r.loglik_trace.push_back(tp.value + obj->constant);
  r.iterations = opt.iterations;
  r.converged = opt.converged;
  r.stop_reason = opt.stop_reason;
  r.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

MatrixXd naive_rsa(const RsaProblem& p) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(p.x);
  if (qr.rank() < p.c()) {
    throw InputError("naive RSA: design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                     std::to_string(p.c()) + ")");
  }
  MatrixXd beta = qr.solve(p.y);  // c × v
  beta.colwise() -= beta.rowwise().mean();
  const MatrixXd gram = beta * beta.transpose();
  const VectorXd inv_sd = gram.diagonal().cwiseSqrt().cwiseInverse();
  return inv_sd.asDiagonal() * gram * inv_sd.asDiagonal();
}

std::optional<MatrixXd> u_to_correlation(const MatrixXd& u) {
  if (u.rows() != u.cols()) throw InputError("u_to_correlation: matrix is not square");
  if ((u - u.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw InputError("u_to_correlation: matrix is not symmetric");
  if (u.diagonal().minCoeff() < 1e-12) return std::nullopt;
  const VectorXd inv_sd = u.diagonal().cwiseSqrt().cwiseInverse();
  MatrixXd corr = inv_sd.asDiagonal() * u * inv_sd.asDiagonal();
  corr.diagonal().setOnes();
  return corr;
}

}  // namespace mnkit
