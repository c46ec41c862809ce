#pragma once

// Matrix-normal distribution X ~ MN(M, R, C): vec(X) ~ N(vec(M), C ⊗ R).

#include "mnkit/covmodels.hpp"

#include <cstdint>

namespace mnkit {

struct MatnormDist {
  MatrixXd mean;   // m × n
  CovPtr row_cov;  // m × m
  CovPtr col_cov;  // n × n

  // Throws InputError when shapes disagree or a covariance is missing.
  void validate() const;
};

// log density with the standard normalizer. Only solve/logdet are used.
double mn_logpdf(const MatrixXd& x, const MatnormDist& d);

struct MatnormGradient {
  double value = 0.0;
  VectorXd row_params;  // ∂/∂θ of row_cov's unconstrained parameters
  VectorXd col_params;
};

// mn_logpdf together with its gradient in both covariances' parameters.
MatnormGradient mn_logpdf_grad(const MatrixXd& x, const MatnormDist& d);

// M + A Z Bᵀ with A, B the Cholesky factors of R, C and Z standard normal
// drawn from mt19937_64(seed) in column-major order.
MatrixXd mn_sample(const MatnormDist& d, std::uint64_t seed);

// MN(Mᵀ, C, R).
MatnormDist mn_transpose(const MatnormDist& d);

// Z | Y ~ MN(X Y + offset, noise_rowcov, Σ_k) and Y ~ MN(prior_mean, prior_rowcov, Σ_k)
// give Z ~ MN(X prior_mean + offset, noise_rowcov + X prior_rowcov Xᵀ, Σ_k).
// The row covariance is returned as a lowrank_plus model.
MatnormDist mn_marginalize_factor(const MatrixXd& prior_mean, const CovPtr& prior_rowcov,
                                  const MatrixXd& x_factor, const CovPtr& noise_rowcov,
                                  const CovPtr& shared_colcov, const MatrixXd& offset);

// Same, with the prior's and the conditional's column covariances passed
// separately. Throws ContractError unless they describe the same matrix.
MatnormDist mn_marginalize_factor(const MatrixXd& prior_mean, const CovPtr& prior_rowcov,
                                  const CovPtr& prior_colcov, const MatrixXd& x_factor,
                                  const CovPtr& noise_rowcov, const CovPtr& noise_colcov,
                                  const MatrixXd& offset);

// Joint MN over column blocks [X | Y] with shared row covariance. The first
// `split` columns belong to X.
struct PartitionedMatnorm {
  MatrixXd mean;      // m × (j + k)
  CovPtr row_cov;     // m × m
  MatrixXd col_cov;   // (j + k) × (j + k), symmetric positive definite
  Index split = 0;    // j
};

// Law of X given Y = observed (m × k). Throws ConditioningError if the Schur
// complement is not positive definite.
MatnormDist mn_condition(const PartitionedMatnorm& joint, const MatrixXd& observed);

// Row-partitioned variant: the first `split` rows of the mean are X, the rest
// Y, and `joint_row_cov` is the full row covariance shared by column
// covariance `col_cov`. Returns the law of X given Y = observed.
MatnormDist mn_condition_rows(const MatrixXd& mean, const MatrixXd& joint_row_cov, const CovPtr& col_cov,
                              Index split, const MatrixXd& observed);

}  // namespace mnkit
