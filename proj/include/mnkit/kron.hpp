#pragma once

// Triangular solves and log-determinants for Kronecker products of
// lower-triangular Cholesky factors, with optional masking of rows/columns.
//
// Ordering convention: factors[0] is the outermost (slowest-varying) index,
// so the full index of (i_0, i_1, ..., i_{n-1}) is
//   i_0 * (d_1 * ... * d_{n-1}) + i_1 * (d_2 * ... * d_{n-1}) + ... + i_{n-1}.

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace mnkit {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

class TriFactorList {
 public:
  // Throws InputError for an empty list or non-square factors and
  // SingularFactorError for a non-positive diagonal entry. Entries above the
  // diagonal are ignored.
  explicit TriFactorList(std::vector<MatrixXd> factors);

  const std::vector<MatrixXd>& factors() const { return factors_; }
  const MatrixXd& operator[](std::size_t i) const { return factors_[i]; }
  std::size_t size() const { return factors_.size(); }
  std::vector<Index> dims() const;
  Index full_dim() const { return full_dim_; }

 private:
  std::vector<MatrixXd> factors_;
  Index full_dim_ = 0;
};

class KronMask {
 public:
  explicit KronMask(std::vector<bool> keep);

  // Mask that keeps (i_0, ..., i_{n-1}) iff every per-factor mask keeps i_f.
  static KronMask from_factor_masks(const std::vector<std::vector<bool>>& per_factor);

  const std::vector<bool>& keep() const { return keep_; }
  Index size() const { return static_cast<Index>(keep_.size()); }
  Index kept_count() const { return kept_count_; }
  bool all_kept() const { return kept_count_ == size(); }
  const std::vector<Index>& kept_indices() const { return kept_; }

  // Zero-filled full-length rows from kept-only rows, and the reverse.
  MatrixXd scatter(const MatrixXd& kept_rows) const;
  MatrixXd gather(const MatrixXd& full_rows) const;

 private:
  std::vector<bool> keep_;
  std::vector<Index> kept_;
  Index kept_count_ = 0;
};

// x with (L_0 ⊗ ... ⊗ L_{n-1}) x = y. Matrix right-hand sides are solved
// column by column (the recursion runs over row blocks).
VectorXd kron_tri_solve(const TriFactorList& factors, const VectorXd& y);
MatrixXd kron_tri_solve(const TriFactorList& factors, const MatrixXd& y);

// Same for the transpose (L_0 ⊗ ... ⊗ L_{n-1})ᵀ x = y.
MatrixXd kron_tri_solve_upper(const TriFactorList& factors, const MatrixXd& y);

// Solve against the principal submatrix of the Kronecker product restricted to
// the kept indices. y has kept_count rows.
VectorXd kron_tri_solve_masked(const TriFactorList& factors, const KronMask& mask,
                               const VectorXd& y);
MatrixXd kron_tri_solve_masked(const TriFactorList& factors, const KronMask& mask,
                               const MatrixXd& y);
MatrixXd kron_tri_solve_upper_masked(const TriFactorList& factors, const KronMask& mask,
                                     const MatrixXd& y);

// log|Σ| for Σ = L Lᵀ, L = ⊗ L_i, i.e. twice the log-determinant of the
// (masked) triangular Kronecker product.
double kron_logdet(const TriFactorList& factors,
                   const std::optional<KronMask>& mask = std::nullopt);

// (A_0 ⊗ ... ⊗ A_{n-1}) X or its transpose for arbitrary square factors,
// without forming the product.
MatrixXd kron_multiply(const std::vector<MatrixXd>& factors, const MatrixXd& x,
                       bool transpose = false);

// Dense Kronecker product; intended for small problems and tests.
MatrixXd kron_dense(const std::vector<MatrixXd>& factors);

}  // namespace mnkit
