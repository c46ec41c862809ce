#pragma once

// Shared response model with the per-subject maps W marginalized:
//
//   X = W S + b 1ᵀ + E,  W ~ MN(0, ρ ⊗ Σ_v, I_k),  E ~ MN(0, ρ ⊗ Σ_v, Σ_t)
//
// where X stacks the n subjects' v × t matrices and ρ = diag(1/τ_j²). Fit by
// expectation conditional maximization; DP-SRM is the case Σ_v = Σ_t = I.

#include "mnkit/covmodels.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace mnkit {

struct SrmDataset {
  std::vector<MatrixXd> subjects;  // v × t each

  // Throws InputError unless there are at least two subjects of equal shape
  // with finite entries and no constant voxel rows.
  void validate() const;

  Index n() const { return static_cast<Index>(subjects.size()); }
  Index v() const { return subjects.empty() ? 0 : subjects.front().rows(); }
  Index t() const { return subjects.empty() ? 0 : subjects.front().cols(); }
  MatrixXd stacked() const;  // nv × t
};

enum class SrmVariant { dp, mn };
std::string_view to_string(SrmVariant v);
SrmVariant srm_variant_from_string(std::string_view name);

struct SrmConfig {
  Index k = 3;
  SrmVariant variant = SrmVariant::mn;
  // Defaults by variant: dp uses identity for both; mn uses diagonal Σ_v and
  // ar1 Σ_t. A zero dimension is filled in from the data.
  std::optional<CovSpec> spatial;
  std::optional<CovSpec> temporal;
  int max_iters = 200;
  double rel_tol = 1e-6;
  std::uint64_t seed = 0;
  // Adds the prior S ~ MN(0, I_k, Σ_t). The monitored objective then becomes
  // the marginal log-likelihood plus log p(S).
  bool latent_prior = false;
};

struct SrmModel {
  MatrixXd s;                  // k × t
  std::vector<VectorXd> b;     // per-subject intercepts, length v
  VectorXd tau2;               // per-subject precisions, tau2[0] = 1
  CovPtr sigma_v;
  CovPtr sigma_t;
  MatrixXd w_post_mean;        // nv × k
  MatrixXd w_post_colcov;      // k × k
  std::vector<double> loglik_trace;
  int iterations = 0;
  bool converged = false;
  bool latent_prior = false;

  Index k() const { return s.rows(); }
  Index n() const { return tau2.size(); }
  // S, b, τ_2..τ_n and both covariances' parameters. W is not a parameter.
  Index free_parameter_count() const;
  CovPtr row_cov() const;  // ρ ⊗ Σ_v
  CovPtr col_cov() const;  // Σ_t + Sᵀ S
};

struct SrmStats {
  MatrixXd w_mean;    // W′, nv × k
  MatrixXd w_colcov;  // Σ_w′, k × k
};

SrmStats srm_e_step(const SrmDataset& data, const SrmModel& model);

// One sweep of conditional maximizations in the order S, b, Σ_t, Σ_v, τ.
// `stats` must come from srm_e_step at `model`.
SrmModel srm_cm_step(const SrmDataset& data, const SrmModel& model, const SrmStats& stats);

// Expected complete-data log-likelihood (without 2π constants) of `params`,
// with the expectation over W taken under `stats`, which came from
// srm_e_step at `previous`.
double srm_q_function(const SrmDataset& data, const SrmModel& params, const SrmModel& previous,
                      const SrmStats& stats);

// log p(X | S, b, ρ, Σ_v, Σ_t) with W marginalized.
double srm_marginal_loglik(const SrmDataset& data, const SrmModel& model);

// The model the fit starts from: S from the leading singular vectors of the
// row-centered data, b at the voxel means, τ = 1, identity-like covariances.
SrmModel srm_initialize(const SrmDataset& data, const SrmConfig& cfg);

SrmModel fit_srm_ecm(const SrmDataset& data, const SrmConfig& cfg);
// Continue from `init` (for example a previously fitted model).
SrmModel fit_srm_ecm(const SrmDataset& data, const SrmConfig& cfg, const SrmModel& init);

// Posterior-mean map for a new subject, using its own voxel means as the
// intercept, or an explicit intercept.
MatrixXd transform_new_subject(const SrmModel& model, const MatrixXd& y_new);
MatrixXd transform_new_subject(const SrmModel& model, const MatrixXd& y_new, const VectorXd& intercept);

struct Reconstruction {
  MatrixXd y_hat;
  double error = 0.0;  // ‖Y − Ŷ‖_F / ‖Y − row means of Y‖_F
};

// Ŷ = W S + b 1ᵀ scored against y.
Reconstruction reconstruct(const SrmModel& model, const MatrixXd& w, const VectorXd& b, const MatrixXd& y);

}  // namespace mnkit
