#pragma once

// Structured covariance models. Every model answers Σ⁻¹X and log|Σ| without
// forming an inverse, and exposes derivatives with respect to its unconstrained
// parameters so marginal likelihoods can be differentiated analytically.
//
// Models are immutable: with_params() returns a new model.

#include "mnkit/kron.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mnkit {

enum class CovKind {
  identity,
  isotropic,
  diagonal,
  full_rank,
  ar1,
  sq_exp,
  lowrank_plus,
  kron,
  block_scaled,
};

std::string_view to_string(CovKind kind);
CovKind cov_kind_from_string(std::string_view name);

class CovModel;
using CovPtr = std::shared_ptr<const CovModel>;

// Declarative description of a covariance; make_cov() turns it into a model.
//
//   kron:         parts = factor specs (outermost first), mask optional
//   lowrank_plus: parts[0] = base spec, parts[1] = inner spec for U (defaults to
//                 full_rank over fixed_factor.cols()), learned_rank columns of L
//   block_scaled: parts[0] = per-block spec, blocks = number of blocks
struct CovSpec {
  CovKind kind = CovKind::identity;
  Index dim = 0;
  std::vector<CovSpec> parts;
  std::optional<std::vector<bool>> mask;
  MatrixXd fixed_factor;
  Index learned_rank = 0;
  Index blocks = 0;
  // Seed for the random initialization of L in lowrank_plus.
  std::uint64_t seed = 0;
  // Overrides the default (all-zero) unconstrained parameters when set.
  std::optional<VectorXd> params;

  static CovSpec simple(CovKind kind, Index dim);
  static CovSpec kron(std::vector<CovSpec> factors,
                      std::optional<std::vector<bool>> mask = std::nullopt);
  static CovSpec lowrank_plus(CovSpec base, MatrixXd fixed_factor, Index learned_rank,
                              std::optional<CovSpec> inner = std::nullopt);
  static CovSpec block_scaled(Index blocks, CovSpec inner);
};

class CovModel {
 public:
  virtual ~CovModel() = default;

  virtual CovKind kind() const = 0;
  Index dim() const { return dim_; }
  Index n_params() const { return params_.size(); }
  const VectorXd& params() const { return params_; }

  // A copy of this model at a new unconstrained parameter vector.
  virtual CovPtr with_params(const VectorXd& params) const = 0;

  virtual MatrixXd solve(const MatrixXd& x) const = 0;
  virtual double logdet() const = 0;
  virtual MatrixXd dense() const = 0;

  virtual MatrixXd multiply(const MatrixXd& x) const;
  virtual VectorXd diagonal() const;
  // A Z where A Aᵀ = Σ and A is the lower Cholesky factor.
  virtual MatrixXd chol_multiply(const MatrixXd& z) const;

  // (∂Σ/∂θ_k) X.
  virtual MatrixXd dsigma_apply(Index k, const MatrixXd& x) const = 0;
  // g_k = Tr[Pᵀ (∂Σ/∂θ_k) Q] for all k.
  virtual VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const;
  // g_k = Tr[Σ⁻¹ ∂Σ/∂θ_k] for all k.
  virtual VectorXd grad_logdet() const;

  // The member of this family maximizing -count/2 log|Σ| - 1/2 Tr[Σ⁻¹ scatter].
  // Families with a closed form override this; the default runs a warm-started
  // quasi-Newton ascent from the current parameters, so the objective never
  // decreases relative to *this.
  virtual CovPtr fit_scatter(const MatrixXd& scatter, double count) const;

  // Spec describing this model including its current parameters.
  virtual CovSpec spec() const = 0;

 protected:
  CovModel(Index dim, VectorXd params);

  void check_rows(const MatrixXd& x, std::string_view op) const;
  void check_param_index(Index k) const;

 private:
  Index dim_;
  VectorXd params_;
};

CovPtr make_cov(const CovSpec& spec);

// full_rank model whose Σ equals the given symmetric positive-definite matrix.
CovPtr full_rank_from_matrix(const MatrixXd& sigma);

// Accessors for composite families. Throw InputError on a kind mismatch.
struct LowRankParts {
  CovPtr base;
  CovPtr inner;
  MatrixXd fixed_factor;
  MatrixXd learned;  // L, t × r
};
LowRankParts lowrank_parts(const CovModel& model);

struct BlockScaledParts {
  CovPtr inner;
  VectorXd precisions;  // τ_j², first entry fixed at 1
};
BlockScaledParts block_scaled_parts(const CovModel& model);

// ρ ⊗ Σ_v with ρ = diag(1/precisions); precisions[0] must equal 1.
CovPtr make_block_scaled(const CovPtr& inner, const VectorXd& precisions);

// Base + F U Fᵀ + L Lᵀ from existing models (L may have zero columns).
CovPtr make_lowrank_plus(const CovPtr& base, const MatrixXd& fixed_factor, const CovPtr& inner,
                         const MatrixXd& learned);

}  // namespace mnkit
