#include "mnkit/kron.hpp"

#include "mnkit/errors.hpp"

#include <cmath>
#include <span>
#include <string>

namespace mnkit {

namespace {

using FactorSpan = std::span<const MatrixXd>;
using MaskSpan = std::span<const char>;
using Block = Eigen::Ref<MatrixXd>;

void check_rows(Index rows, Index expected, const char* what) {
  if (rows != expected) {
    throw InputError(std::string(what) + ": right-hand side has " + std::to_string(rows) +
                     " rows, expected " + std::to_string(expected));
  }
}

// Algorithm: for each outer block i, divide by the outer diagonal, recurse on
// the remaining factors, and eliminate the block from the later blocks.
void lower_solve(FactorSpan factors, Block x) {
  const MatrixXd& outer = factors.front();
  if (factors.size() == 1) {
    outer.triangularView<Eigen::Lower>().solveInPlace(x);
    return;
  }
  const FactorSpan rest = factors.subspan(1);
  const Index na = outer.rows();
  const Index nb = x.rows() / na;
  for (Index i = 0; i < na; ++i) {
    const MatrixXd t = x.middleRows(i * nb, nb) / outer(i, i);
    x.middleRows(i * nb, nb) = t;
    lower_solve(rest, x.middleRows(i * nb, nb));
    for (Index j = i + 1; j < na; ++j) {
      x.middleRows(j * nb, nb) -= outer(j, i) * t;
    }
  }
}

// Mirror of lower_solve for the transposed product, running blocks backwards.
void upper_solve(FactorSpan factors, Block x) {
  const MatrixXd& outer = factors.front();
  if (factors.size() == 1) {
    outer.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
    return;
  }
  const FactorSpan rest = factors.subspan(1);
  const Index na = outer.rows();
  const Index nb = x.rows() / na;
  for (Index i = na - 1; i >= 0; --i) {
    const MatrixXd t = x.middleRows(i * nb, nb) / outer(i, i);
    x.middleRows(i * nb, nb) = t;
    upper_solve(rest, x.middleRows(i * nb, nb));
    for (Index j = 0; j < i; ++j) {
      x.middleRows(j * nb, nb) -= outer(i, j) * t;
    }
  }
}

MatrixXd multiply_rec(FactorSpan factors, const MatrixXd& x, bool transpose) {
  const MatrixXd& outer = factors.front();
  if (factors.size() == 1) {
    return transpose ? MatrixXd(outer.transpose() * x) : MatrixXd(outer * x);
  }
  const FactorSpan rest = factors.subspan(1);
  const Index na = outer.rows();
  const Index nb = x.rows() / na;
  std::vector<MatrixXd> inner(static_cast<std::size_t>(na));
  for (Index j = 0; j < na; ++j) {
    inner[static_cast<std::size_t>(j)] = multiply_rec(rest, x.middleRows(j * nb, nb), transpose);
  }
  MatrixXd out = MatrixXd::Zero(x.rows(), x.cols());
  for (Index i = 0; i < na; ++i) {
    for (Index j = 0; j < na; ++j) {
      const double a = transpose ? outer(j, i) : outer(i, j);
      if (a != 0.0) out.middleRows(i * nb, nb) += a * inner[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

Index count_kept(MaskSpan mask) {
  Index n = 0;
  for (char c : mask) n += c ? 1 : 0;
  return n;
}

void masked_base_solve(const MatrixXd& factor, MaskSpan mask, Block x, bool upper) {
  std::vector<Index> idx;
  for (Index i = 0; i < static_cast<Index>(mask.size()); ++i) {
    if (mask[static_cast<std::size_t>(i)]) idx.push_back(i);
  }
  const MatrixXd sub = factor(idx, idx);
  MatrixXd rhs = x(idx, Eigen::all);
  if (upper) {
    sub.triangularView<Eigen::Lower>().transpose().solveInPlace(rhs);
  } else {
    sub.triangularView<Eigen::Lower>().solveInPlace(rhs);
  }
  x.setZero();
  x(idx, Eigen::all) = rhs;
}

// Masked variant. The block update uses t' = (L_1 ⊗ ... ) x_i (the re-multiplied
// block with masked entries zeroed) in place of t. Masked entries of x are 0.
void masked_solve(FactorSpan factors, MaskSpan mask, Block x, bool upper) {
  const MatrixXd& outer = factors.front();
  if (factors.size() == 1) {
    masked_base_solve(outer, mask, x, upper);
    return;
  }
  const FactorSpan rest = factors.subspan(1);
  const Index na = outer.rows();
  const Index nb = x.rows() / na;

  auto step = [&](Index i) -> MatrixXd {
    const MaskSpan block_mask = mask.subspan(static_cast<std::size_t>(i * nb),
                                             static_cast<std::size_t>(nb));
    const Index kept = count_kept(block_mask);
    auto xi = x.middleRows(i * nb, nb);
    if (kept == 0) {
      xi.setZero();
      return MatrixXd::Zero(nb, x.cols());
    }
    const MatrixXd t = xi / outer(i, i);
    xi = t;
    if (kept == nb) {
      upper ? upper_solve(rest, xi) : lower_solve(rest, xi);
      return t;
    }
    masked_solve(rest, block_mask, xi, upper);
    return multiply_rec(rest, xi, upper);
  };

  if (!upper) {
    for (Index i = 0; i < na; ++i) {
      const MatrixXd tp = step(i);
      for (Index j = i + 1; j < na; ++j) x.middleRows(j * nb, nb) -= outer(j, i) * tp;
    }
  } else {
    for (Index i = na - 1; i >= 0; --i) {
      const MatrixXd tp = step(i);
      for (Index j = 0; j < i; ++j) x.middleRows(j * nb, nb) -= outer(i, j) * tp;
    }
  }
}

std::vector<char> mask_chars(const KronMask& mask) {
  std::vector<char> out(mask.keep().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.keep()[i] ? 1 : 0;
  return out;
}

void check_mask(const TriFactorList& factors, const KronMask& mask) {
  if (mask.size() != factors.full_dim()) {
    throw InputError("kron mask has length " + std::to_string(mask.size()) +
                     ", expected " + std::to_string(factors.full_dim()));
  }
}

MatrixXd solve_masked_impl(const TriFactorList& factors, const KronMask& mask,
                           const MatrixXd& y, bool upper) {
  check_mask(factors, mask);
  check_rows(y.rows(), mask.kept_count(), "kron_tri_solve_masked");
  if (mask.all_kept()) {
    return upper ? kron_tri_solve_upper(factors, y) : kron_tri_solve(factors, y);
  }
  MatrixXd full = mask.scatter(y);
  const auto chars = mask_chars(mask);
  masked_solve(FactorSpan(factors.factors()), MaskSpan(chars), full, upper);
  return mask.gather(full);
}

}  // namespace

TriFactorList::TriFactorList(std::vector<MatrixXd> factors) : factors_(std::move(factors)) {
  if (factors_.empty()) throw InputError("TriFactorList: at least one factor is required");
  full_dim_ = 1;
  for (std::size_t f = 0; f < factors_.size(); ++f) {
    const MatrixXd& m = factors_[f];
    if (m.rows() != m.cols() || m.rows() == 0) {
      throw InputError("TriFactorList: factor " + std::to_string(f) + " is not square and non-empty");
    }
    for (Index i = 0; i < m.rows(); ++i) {
      const double d = m(i, i);
      if (!(d > 0.0) || !std::isfinite(d)) {
        throw SingularFactorError("TriFactorList: factor " + std::to_string(f) +
                                  " has non-positive diagonal entry at " + std::to_string(i));
      }
    }
    // Only the lower triangle is meaningful.
    factors_[f] = MatrixXd(m.triangularView<Eigen::Lower>());
    full_dim_ *= m.rows();
  }
}

std::vector<Index> TriFactorList::dims() const {
  std::vector<Index> d;
  d.reserve(factors_.size());
  for (const auto& f : factors_) d.push_back(f.rows());
  return d;
}

KronMask::KronMask(std::vector<bool> keep) : keep_(std::move(keep)) {
  for (std::size_t i = 0; i < keep_.size(); ++i) {
    if (keep_[i]) kept_.push_back(static_cast<Index>(i));
  }
  kept_count_ = static_cast<Index>(kept_.size());
  if (kept_count_ == 0) throw InputError("KronMask: mask keeps no entries");
}

KronMask KronMask::from_factor_masks(const std::vector<std::vector<bool>>& per_factor) {
  if (per_factor.empty()) throw InputError("KronMask: no per-factor masks");
  std::vector<bool> keep{true};
  for (const auto& m : per_factor) {
    std::vector<bool> next;
    next.reserve(keep.size() * m.size());
    for (bool outer : keep) {
      for (bool inner : m) next.push_back(outer && inner);
    }
    keep = std::move(next);
  }
  return KronMask(std::move(keep));
}

MatrixXd KronMask::scatter(const MatrixXd& kept_rows) const {
  check_rows(kept_rows.rows(), kept_count_, "KronMask::scatter");
  MatrixXd full = MatrixXd::Zero(size(), kept_rows.cols());
  full(kept_, Eigen::all) = kept_rows;
  return full;
}

MatrixXd KronMask::gather(const MatrixXd& full_rows) const {
  check_rows(full_rows.rows(), size(), "KronMask::gather");
  return full_rows(kept_, Eigen::all);
}

MatrixXd kron_tri_solve(const TriFactorList& factors, const MatrixXd& y) {
  check_rows(y.rows(), factors.full_dim(), "kron_tri_solve");
  MatrixXd x = y;
  lower_solve(FactorSpan(factors.factors()), x);
  return x;
}

VectorXd kron_tri_solve(const TriFactorList& factors, const VectorXd& y) {
  return kron_tri_solve(factors, MatrixXd(y)).col(0);
}

MatrixXd kron_tri_solve_upper(const TriFactorList& factors, const MatrixXd& y) {
  check_rows(y.rows(), factors.full_dim(), "kron_tri_solve_upper");
  MatrixXd x = y;
  upper_solve(FactorSpan(factors.factors()), x);
  return x;
}

MatrixXd kron_tri_solve_masked(const TriFactorList& factors, const KronMask& mask,
                               const MatrixXd& y) {
  return solve_masked_impl(factors, mask, y, false);
}

VectorXd kron_tri_solve_masked(const TriFactorList& factors, const KronMask& mask,
                               const VectorXd& y) {
  return kron_tri_solve_masked(factors, mask, MatrixXd(y)).col(0);
}

MatrixXd kron_tri_solve_upper_masked(const TriFactorList& factors, const KronMask& mask,
                                     const MatrixXd& y) {
  return solve_masked_impl(factors, mask, y, true);
}

double kron_logdet(const TriFactorList& factors, const std::optional<KronMask>& mask) {
  const auto dims = factors.dims();
  if (!mask) {
    double total = 0.0;
    for (std::size_t i = 0; i < factors.size(); ++i) {
      const double log_diag = factors[i].diagonal().array().log().sum();
      double others = 1.0;
      for (std::size_t j = 0; j < dims.size(); ++j) {
        if (j != i) others *= static_cast<double>(dims[j]);
      }
      total += log_diag * others;
    }
    return 2.0 * total;
  }

  check_mask(factors, *mask);
  // counts[f][a]: kept entries whose factor-f index equals a.
  std::vector<std::vector<Index>> counts(factors.size());
  std::vector<Index> strides(factors.size());
  for (std::size_t f = 0; f < factors.size(); ++f) {
    counts[f].assign(static_cast<std::size_t>(dims[f]), 0);
    Index stride = 1;
    for (std::size_t g = f + 1; g < factors.size(); ++g) stride *= dims[g];
    strides[f] = stride;
  }
  for (Index idx : mask->kept_indices()) {
    for (std::size_t f = 0; f < factors.size(); ++f) {
      const Index a = (idx / strides[f]) % dims[f];
      ++counts[f][static_cast<std::size_t>(a)];
    }
  }
  double total = 0.0;
  for (std::size_t f = 0; f < factors.size(); ++f) {
    for (Index a = 0; a < dims[f]; ++a) {
      total += std::log(factors[f](a, a)) * static_cast<double>(counts[f][static_cast<std::size_t>(a)]);
    }
  }
  return 2.0 * total;
}

MatrixXd kron_multiply(const std::vector<MatrixXd>& factors, const MatrixXd& x, bool transpose) {
  if (factors.empty()) throw InputError("kron_multiply: no factors");
  Index n = 1;
  for (const auto& f : factors) {
    if (f.rows() != f.cols()) throw InputError("kron_multiply: factors must be square");
    n *= f.rows();
  }
  check_rows(x.rows(), n, "kron_multiply");
  return multiply_rec(FactorSpan(factors), x, transpose);
}

MatrixXd kron_dense(const std::vector<MatrixXd>& factors) {
  if (factors.empty()) throw InputError("kron_dense: no factors");
  MatrixXd out = factors.front();
  for (std::size_t f = 1; f < factors.size(); ++f) {
    const MatrixXd& b = factors[f];
    MatrixXd next(out.rows() * b.rows(), out.cols() * b.cols());
    for (Index i = 0; i < out.rows(); ++i) {
      for (Index j = 0; j < out.cols(); ++j) {
        next.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = out(i, j) * b;
      }
    }
    out = std::move(next);
  }
  return out;
}

}  // namespace mnkit
