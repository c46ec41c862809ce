#include "mnkit/matnorm.hpp"

#include "mnkit/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace mnkit {

namespace {

std::string shape(const MatrixXd& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

void check_x(const MatrixXd& x, const MatnormDist& d) {
  d.validate();
  if (x.rows() != d.mean.rows() || x.cols() != d.mean.cols()) {
    throw InputError("matrix-normal: observation is " + shape(x) + ", distribution is " + shape(d.mean));
  }
}

double normalizer(const MatnormDist& d) {
  const auto m = static_cast<double>(d.mean.rows());
  const auto n = static_cast<double>(d.mean.cols());
  return -0.5 * m * n * std::log(2.0 * std::numbers::pi) - 0.5 * m * d.col_cov->logdet() -
         0.5 * n * d.row_cov->logdet();
}

bool same_covariance(const CovPtr& a, const CovPtr& b) {
  if (a == b) return true;
  if (!a || !b || a->dim() != b->dim()) return false;
  const MatrixXd da = a->dense();
  return (da - b->dense()).norm() <= 1e-12 * std::max(1.0, da.norm());
}

}  // namespace

void MatnormDist::validate() const {
  if (!row_cov || !col_cov) throw InputError("matrix-normal: missing covariance");
  if (mean.rows() != row_cov->dim() || mean.cols() != col_cov->dim()) {
    throw InputError("matrix-normal: mean is " + shape(mean) + " but covariances are " +
                     std::to_string(row_cov->dim()) + " and " + std::to_string(col_cov->dim()));
  }
}

double mn_logpdf(const MatrixXd& x, const MatnormDist& d) {
  check_x(x, d);
  const MatrixXd e = x - d.mean;
  const MatrixXd v = d.row_cov->solve(e);
  const MatrixXd w = d.col_cov->solve(e.transpose());
  return normalizer(d) - 0.5 * w.cwiseProduct(v.transpose()).sum();
}

MatnormGradient mn_logpdf_grad(const MatrixXd& x, const MatnormDist& d) {
  check_x(x, d);
  const auto m = static_cast<double>(d.mean.rows());
  const auto n = static_cast<double>(d.mean.cols());
  const MatrixXd e = x - d.mean;
  const MatrixXd v = d.row_cov->solve(e);                    // R⁻¹E
  const MatrixXd ct = d.col_cov->solve(e.transpose());       // C⁻¹Eᵀ
  const MatrixXd wt = d.col_cov->solve(v.transpose());       // C⁻¹EᵀR⁻¹
  MatnormGradient g;
  g.value = normalizer(d) - 0.5 * ct.cwiseProduct(v.transpose()).sum();
  g.row_params = -0.5 * n * d.row_cov->grad_logdet() + 0.5 * d.row_cov->grad_quadratic(wt.transpose(), v);
  g.col_params = -0.5 * m * d.col_cov->grad_logdet() + 0.5 * d.col_cov->grad_quadratic(wt, ct);
  return g;
}

MatrixXd mn_sample(const MatnormDist& d, std::uint64_t seed) {
  d.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd z(d.mean.rows(), d.mean.cols());
  for (Index j = 0; j < z.cols(); ++j)
    for (Index i = 0; i < z.rows(); ++i) z(i, j) = normal(rng);
  const MatrixXd az = d.row_cov->chol_multiply(z);
  return d.mean + d.col_cov->chol_multiply(az.transpose()).transpose();
}

MatnormDist mn_transpose(const MatnormDist& d) { return {d.mean.transpose(), d.col_cov, d.row_cov}; }

MatnormDist mn_marginalize_factor(const MatrixXd& prior_mean, const CovPtr& prior_rowcov,
                                  const MatrixXd& x_factor, const CovPtr& noise_rowcov,
                                  const CovPtr& shared_colcov, const MatrixXd& offset) {
  if (!prior_rowcov || !noise_rowcov || !shared_colcov) throw InputError("marginalize: missing covariance");
  if (x_factor.cols() != prior_mean.rows() || prior_rowcov->dim() != prior_mean.rows()) {
    throw InputError("marginalize: factor is " + shape(x_factor) + ", prior mean is " + shape(prior_mean));
  }
  if (noise_rowcov->dim() != x_factor.rows() || shared_colcov->dim() != prior_mean.cols()) {
    throw InputError("marginalize: covariance dimensions do not match the factor and prior mean");
  }
  if (offset.rows() != x_factor.rows() || offset.cols() != prior_mean.cols()) {
    throw InputError("marginalize: offset is " + shape(offset) + ", expected " +
                     std::to_string(x_factor.rows()) + "x" + std::to_string(prior_mean.cols()));
  }
  MatnormDist out{x_factor * prior_mean + offset,
                  make_lowrank_plus(noise_rowcov, x_factor, prior_rowcov, MatrixXd(x_factor.rows(), 0)),
                  shared_colcov};
  return out;
}

MatnormDist mn_marginalize_factor(const MatrixXd& prior_mean, const CovPtr& prior_rowcov,
                                  const CovPtr& prior_colcov, const MatrixXd& x_factor,
                                  const CovPtr& noise_rowcov, const CovPtr& noise_colcov,
                                  const MatrixXd& offset) {
  if (!same_covariance(prior_colcov, noise_colcov)) {
    throw ContractError(
        "marginalize: the factor and the conditional must share one column covariance for the marginal to be "
        "matrix-normal");
  }
  return mn_marginalize_factor(prior_mean, prior_rowcov, x_factor, noise_rowcov, noise_colcov, offset);
}

MatnormDist mn_condition(const PartitionedMatnorm& joint, const MatrixXd& observed) {
  const Index total = joint.col_cov.rows();
  const Index j = joint.split;
  const Index k = total - j;
  if (!joint.row_cov) throw InputError("condition: missing row covariance");
  if (joint.col_cov.cols() != total || joint.mean.cols() != total || joint.mean.rows() != joint.row_cov->dim()) {
    throw InputError("condition: joint mean is " + shape(joint.mean) + ", column covariance is " +
                     shape(joint.col_cov));
  }
  if (j < 1 || k < 1) throw InputError("condition: split must leave at least one column on each side");
  if (observed.rows() != joint.mean.rows() || observed.cols() != k) {
    throw InputError("condition: observed block is " + shape(observed) + ", expected " +
                     std::to_string(joint.mean.rows()) + "x" + std::to_string(k));
  }
  const MatrixXd s_jj = joint.col_cov.topLeftCorner(j, j);
  const MatrixXd s_kj = joint.col_cov.bottomLeftCorner(k, j);
  const MatrixXd s_kk = joint.col_cov.bottomRightCorner(k, k);
  Eigen::LLT<MatrixXd> llt(s_kk);
  if (llt.info() != Eigen::Success) throw ConditioningError("condition: observed-block covariance is not positive definite");
  const MatrixXd gain = llt.solve(s_kj);  // Σ_k⁻¹ Σ_kj
  const MatrixXd mean =
      joint.mean.leftCols(j) + (observed - joint.mean.rightCols(k)) * gain;
  const MatrixXd schur = s_jj - s_kj.transpose() * gain;
  CovPtr cov;
  try {
    cov = full_rank_from_matrix(schur);
  } catch (const ConditioningError&) {
    throw ConditioningError("condition: Schur complement is not positive definite");
  }
  return {mean, joint.row_cov, cov};
}

MatnormDist mn_condition_rows(const MatrixXd& mean, const MatrixXd& joint_row_cov, const CovPtr& col_cov,
                              Index split, const MatrixXd& observed) {
  PartitionedMatnorm t{mean.transpose(), col_cov, joint_row_cov, split};
  return mn_transpose(mn_condition(t, observed.transpose()));
}

}  // namespace mnkit
