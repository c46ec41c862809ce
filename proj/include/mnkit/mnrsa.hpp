#pragma once

// MN-RSA: Y ~ MN(0, Σ_t + X U Xᵀ + L Lᵀ, Σ_v), fit by maximizing the marginal
// likelihood jointly over U, the temporal nuisance covariance and Σ_v.

#include "mnkit/covmodels.hpp"
#include "mnkit/optim.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace mnkit {

struct RsaProblem {
  MatrixXd y;  // t × v, columns centered
  MatrixXd x;  // t × c design, columns centered

  // Validates shapes (t > c ≥ 1, v ≥ 1, finite entries) and centers the
  // columns of y and x.
  static RsaProblem make(MatrixXd y, MatrixXd x);

  Index t() const { return y.rows(); }
  Index v() const { return y.cols(); }
  Index c() const { return x.cols(); }
};

struct RsaConfig {
  // A zero dimension in a simple spec is filled in with v (spatial) or t
  // (temporal).
  CovSpec spatial = CovSpec::simple(CovKind::diagonal, 0);
  CovSpec temporal_base = CovSpec::simple(CovKind::ar1, 0);
  Index residual_rank = 15;
  std::uint64_t seed = 0;
  OptimSettings optim;
};

struct RsaResult {
  MatrixXd u;                   // c × c, in data units
  std::optional<MatrixXd> corr; // empty when degenerate
  bool degenerate = false;
  double trace_ratio = 0.0;     // tr(U) / mean per-voxel sample variance
  CovPtr row_cov;               // Σ_t + X U Xᵀ + L Lᵀ as fitted
  CovPtr temporal;              // fitted Σ_t
  CovPtr spatial;               // fitted Σ_v
  MatrixXd learned;             // L
  double loglik = 0.0;          // full log-likelihood at the optimum
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  std::string stop_reason;
  double wall_time_seconds = 0.0;
};

// The marginal log-likelihood over the joint unconstrained parameter vector
// [row covariance params, spatial params], without the 2π constant.
struct RsaObjective {
  Objective objective;
  VectorXd init;
  CovPtr row_cov;   // at init
  CovPtr spatial;   // at init
  double constant;  // add to objective values to obtain the full log-likelihood
};

RsaObjective rsa_objective(const RsaProblem& problem, const RsaConfig& cfg, std::uint64_t draw = 0);

RsaResult fit_mnrsa(const RsaProblem& problem, const RsaConfig& cfg);

// Row correlation of the per-voxel least-squares coefficients (c × c).
// Throws InputError for a rank-deficient design.
MatrixXd naive_rsa(const RsaProblem& problem);

// D^{-1/2} U D^{-1/2}; empty if any diagonal entry is below 1e-12. Throws
// InputError if U is not symmetric to 1e-10.
std::optional<MatrixXd> u_to_correlation(const MatrixXd& u);

}  // namespace mnkit
