#include "mnkit/covmodels.hpp"

#include "mnkit/errors.hpp"
#include "mnkit/optim.hpp"

#include <cmath>
#include <random>
#include <string>

namespace mnkit {

namespace {

Eigen::LLT<MatrixXd> llt_or_throw(const MatrixXd& m, std::string_view context) {
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw ConditioningError(std::string(context) + ": matrix is not numerically positive definite");
  }
  return llt;
}

double log_diag_sum(const Eigen::LLT<MatrixXd>& llt) {
  return llt.matrixLLT().diagonal().array().log().sum();
}

VectorXd concat(std::initializer_list<const VectorXd*> parts) {
  Index n = 0;
  for (const auto* p : parts) n += p->size();
  VectorXd out(n);
  Index at = 0;
  for (const auto* p : parts) {
    out.segment(at, p->size()) = *p;
    at += p->size();
  }
  return out;
}

void check_param_length(const VectorXd& v, Index expected, std::string_view kind) {
  if (v.size() != expected) {
    throw InputError(std::string(kind) + ": parameter vector has length " + std::to_string(v.size()) +
                     ", expected " + std::to_string(expected));
  }
}

void check_scatter(const MatrixXd& scatter, double count, Index dim) {
  if (scatter.rows() != dim || scatter.cols() != dim) {
    throw InputError("fit_scatter: scatter matrix must be " + std::to_string(dim) + "x" + std::to_string(dim));
  }
  if (!(count > 0)) throw InputError("fit_scatter: count must be positive");
}

// ---------------------------------------------------------------------------

class IdentityCov final : public CovModel {
 public:
  explicit IdentityCov(Index d) : CovModel(d, VectorXd()) {}
  CovKind kind() const override { return CovKind::identity; }
  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, 0, "identity");
    return std::make_shared<IdentityCov>(dim());
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    return x;
  }
  double logdet() const override { return 0.0; }
  MatrixXd dense() const override { return MatrixXd::Identity(dim(), dim()); }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return x;
  }
  VectorXd diagonal() const override { return VectorXd::Ones(dim()); }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return z;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd&) const override {
    check_param_index(k);
    return {};
  }
  VectorXd grad_quadratic(const MatrixXd&, const MatrixXd&) const override { return VectorXd(); }
  VectorXd grad_logdet() const override { return VectorXd(); }
  CovPtr fit_scatter(const MatrixXd& scatter, double count) const override {
    check_scatter(scatter, count, dim());
    return with_params(params());
  }
  CovSpec spec() const override { return CovSpec::simple(CovKind::identity, dim()); }
};

class IsotropicCov final : public CovModel {
 public:
  IsotropicCov(Index d, double log_var)
      : CovModel(d, VectorXd::Constant(1, log_var)), var_(std::exp(log_var)) {}
  CovKind kind() const override { return CovKind::isotropic; }
  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, 1, "isotropic");
    return std::make_shared<IsotropicCov>(dim(), v[0]);
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    return x / var_;
  }
  double logdet() const override { return static_cast<double>(dim()) * params()[0]; }
  MatrixXd dense() const override { return var_ * MatrixXd::Identity(dim(), dim()); }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return var_ * x;
  }
  VectorXd diagonal() const override { return VectorXd::Constant(dim(), var_); }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return std::sqrt(var_) * z;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    return var_ * x;
  }
  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    return VectorXd::Constant(1, var_ * p.cwiseProduct(q).sum());
  }
  VectorXd grad_logdet() const override { return VectorXd::Constant(1, static_cast<double>(dim())); }
  CovPtr fit_scatter(const MatrixXd& scatter, double count) const override {
    check_scatter(scatter, count, dim());
    const double var = scatter.trace() / (count * static_cast<double>(dim()));
    if (!(var > 0)) throw ConditioningError("isotropic fit_scatter: non-positive variance");
    return std::make_shared<IsotropicCov>(dim(), std::log(var));
  }
  CovSpec spec() const override {
    CovSpec s = CovSpec::simple(CovKind::isotropic, dim());
    s.params = params();
    return s;
  }

 private:
  double var_;
};

class DiagonalCov final : public CovModel {
 public:
  explicit DiagonalCov(const VectorXd& log_var)
      : CovModel(log_var.size(), log_var), var_(log_var.array().exp()) {}
  CovKind kind() const override { return CovKind::diagonal; }
  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, dim(), "diagonal");
    return std::make_shared<DiagonalCov>(v);
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    return var_.cwiseInverse().asDiagonal() * x;
  }
  double logdet() const override { return params().sum(); }
  MatrixXd dense() const override { return var_.asDiagonal(); }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return var_.asDiagonal() * x;
  }
  VectorXd diagonal() const override { return var_; }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return var_.cwiseSqrt().asDiagonal() * z;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    MatrixXd out = MatrixXd::Zero(x.rows(), x.cols());
    out.row(k) = var_[k] * x.row(k);
    return out;
  }
  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    return var_.cwiseProduct(p.cwiseProduct(q).rowwise().sum());
  }
  VectorXd grad_logdet() const override { return VectorXd::Ones(dim()); }
  CovPtr fit_scatter(const MatrixXd& scatter, double count) const override {
    check_scatter(scatter, count, dim());
    const VectorXd var = scatter.diagonal() / count;
    if (!(var.array() > 0).all()) throw ConditioningError("diagonal fit_scatter: non-positive variance");
    return std::make_shared<DiagonalCov>(var.array().log().matrix());
  }
  CovSpec spec() const override {
    CovSpec s = CovSpec::simple(CovKind::diagonal, dim());
    s.params = params();
    return s;
  }

 private:
  VectorXd var_;
};

// Log-Cholesky parametrization: row-major lower triangle, diagonal entries
// stored as logs.
class FullRankCov final : public CovModel {
 public:
  FullRankCov(Index d, const VectorXd& theta) : CovModel(d, theta), chol_(MatrixXd::Zero(d, d)) {
    Index k = 0;
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j <= i; ++j, ++k) {
        chol_(i, j) = i == j ? std::exp(theta[k]) : theta[k];
        entries_.push_back({i, j});
      }
    }
  }
  static Index count(Index d) { return d * (d + 1) / 2; }
  static VectorXd params_from_chol(const MatrixXd& l) {
    const Index d = l.rows();
    VectorXd theta(count(d));
    Index k = 0;
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j <= i; ++j, ++k) theta[k] = i == j ? std::log(l(i, i)) : l(i, j);
    }
    return theta;
  }

  CovKind kind() const override { return CovKind::full_rank; }
  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, count(dim()), "full_rank");
    return std::make_shared<FullRankCov>(dim(), v);
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    MatrixXd y = chol_.triangularView<Eigen::Lower>().solve(x);
    chol_.triangularView<Eigen::Lower>().transpose().solveInPlace(y);
    return y;
  }
  double logdet() const override { return 2.0 * chol_.diagonal().array().log().sum(); }
  MatrixXd dense() const override { return chol_ * chol_.transpose(); }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return chol_ * (chol_.transpose() * x);
  }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return chol_ * z;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    const auto [i, j] = entries_[static_cast<std::size_t>(k)];
    const double scale = i == j ? chol_(i, i) : 1.0;
    // dΣ = dL Lᵀ + L dLᵀ with dL = scale · E_ij.
    MatrixXd out = MatrixXd::Zero(x.rows(), x.cols());
    out.row(i) += scale * (chol_.col(j).transpose() * x);
    out += scale * chol_.col(j) * x.row(i);
    return out;
  }
  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    const MatrixXd g = p * (q.transpose() * chol_) + q * (p.transpose() * chol_);
    VectorXd out(n_params());
    for (Index k = 0; k < n_params(); ++k) {
      const auto [i, j] = entries_[static_cast<std::size_t>(k)];
      out[k] = g(i, j) * (i == j ? chol_(i, i) : 1.0);
    }
    return out;
  }
  VectorXd grad_logdet() const override {
    VectorXd out = VectorXd::Zero(n_params());
    for (Index k = 0; k < n_params(); ++k) {
      const auto [i, j] = entries_[static_cast<std::size_t>(k)];
      if (i == j) out[k] = 2.0;
    }
    return out;
  }
  CovPtr fit_scatter(const MatrixXd& scatter, double count) const override {
    check_scatter(scatter, count, dim());
    const MatrixXd target = 0.5 * (scatter + scatter.transpose()) / count;
    const auto llt = llt_or_throw(target, "full_rank fit_scatter");
    return std::make_shared<FullRankCov>(dim(), params_from_chol(llt.matrixL()));
  }
  CovSpec spec() const override {
    CovSpec s = CovSpec::simple(CovKind::full_rank, dim());
    s.params = params();
    return s;
  }

 private:
  MatrixXd chol_;
  std::vector<std::pair<Index, Index>> entries_;
};

// Σ_ij = σ² ρ^|i-j| with σ² = exp(a), ρ = tanh(z).
class Ar1Cov final : public CovModel {
 public:
  Ar1Cov(Index t, double a, double z)
      : CovModel(t, (VectorXd(2) << a, z).finished()),
        var_(std::exp(a)),
        rho_(std::tanh(z)),
        one_minus_rho2_(1.0 / (std::cosh(z) * std::cosh(z))) {
    // log(1 - tanh²z) = -2 log cosh z, evaluated without overflow.
    const double az = std::abs(z);
    log_one_minus_rho2_ = -2.0 * (az + std::log1p(std::exp(-2.0 * az)) - std::log(2.0));
  }
  CovKind kind() const override { return CovKind::ar1; }
  double variance() const { return var_; }
  double rho() const { return rho_; }

  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, 2, "ar1");
    return std::make_shared<Ar1Cov>(dim(), v[0], v[1]);
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    const Index t = dim();
    if (t == 1) return x / var_;
    // Tridiagonal inverse: diag (1, 1+ρ², ..., 1+ρ², 1), off-diagonal -ρ.
    const double scale = 1.0 / (var_ * one_minus_rho2_);
    MatrixXd out(x.rows(), x.cols());
    const double mid = 1.0 + rho_ * rho_;
    out.row(0) = x.row(0) - rho_ * x.row(1);
    for (Index i = 1; i + 1 < t; ++i) {
      out.row(i) = mid * x.row(i) - rho_ * (x.row(i - 1) + x.row(i + 1));
    }
    out.row(t - 1) = x.row(t - 1) - rho_ * x.row(t - 2);
    return scale * out;
  }
  double logdet() const override {
    return static_cast<double>(dim()) * params()[0] + static_cast<double>(dim() - 1) * log_one_minus_rho2_;
  }
  MatrixXd dense() const override {
    MatrixXd out(dim(), dim());
    for (Index i = 0; i < dim(); ++i) {
      for (Index j = 0; j < dim(); ++j) {
        out(i, j) = var_ * std::pow(rho_, static_cast<double>(std::abs(i - j)));
      }
    }
    return out;
  }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return var_ * toeplitz_apply(x, nullptr);
  }
  VectorXd diagonal() const override { return VectorXd::Constant(dim(), var_); }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    // Stationary AR(1) recursion; its coefficient matrix is the Cholesky factor.
    MatrixXd out(z.rows(), z.cols());
    const double sd = std::sqrt(var_);
    const double innov = sd * std::sqrt(one_minus_rho2_);
    out.row(0) = sd * z.row(0);
    for (Index i = 1; i < z.rows(); ++i) out.row(i) = rho_ * out.row(i - 1) + innov * z.row(i);
    return out;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    if (k == 0) return var_ * toeplitz_apply(x, nullptr);
    MatrixXd d_rho;
    toeplitz_apply(x, &d_rho);
    return var_ * one_minus_rho2_ * d_rho;
  }
  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    VectorXd g(2);
    MatrixXd d_rho;
    const MatrixXd tq = toeplitz_apply(q, &d_rho);
    g[0] = var_ * p.cwiseProduct(tq).sum();
    g[1] = var_ * one_minus_rho2_ * p.cwiseProduct(d_rho).sum();
    return g;
  }
  VectorXd grad_logdet() const override {
    return (VectorXd(2) << static_cast<double>(dim()), -2.0 * rho_ * static_cast<double>(dim() - 1)).finished();
  }
  CovSpec spec() const override {
    CovSpec s = CovSpec::simple(CovKind::ar1, dim());
    s.params = params();
    return s;
  }

 private:
  // T X with T_ij = ρ^|i-j| via forward/backward recursions; optionally also
  // (dT/dρ) X by differentiating the recursions.
  MatrixXd toeplitz_apply(const MatrixXd& x, MatrixXd* d_rho) const {
    const Index t = x.rows();
    MatrixXd fwd(t, x.cols()), bwd(t, x.cols());
    MatrixXd dfwd, dbwd;
    if (d_rho) {
      dfwd = MatrixXd::Zero(t, x.cols());
      dbwd = MatrixXd::Zero(t, x.cols());
    }
    fwd.row(0) = x.row(0);
    for (Index i = 1; i < t; ++i) {
      fwd.row(i) = x.row(i) + rho_ * fwd.row(i - 1);
      if (d_rho) dfwd.row(i) = fwd.row(i - 1) + rho_ * dfwd.row(i - 1);
    }
    bwd.row(t - 1) = x.row(t - 1);
    for (Index i = t - 2; i >= 0; --i) {
      bwd.row(i) = x.row(i) + rho_ * bwd.row(i + 1);
      if (d_rho) dbwd.row(i) = bwd.row(i + 1) + rho_ * dbwd.row(i + 1);
    }
    if (d_rho) *d_rho = dfwd + dbwd;
    return fwd + bwd - x;
  }

  double var_;
  double rho_;
  double one_minus_rho2_;
  double log_one_minus_rho2_ = 0.0;
};

// Σ_ij = s·exp(-(i-j)²/(2ℓ²)) + 1e-6·s·δ_ij over unit-spaced indices.
// Parameters: (log ℓ, log s).
class SqExpCov final : public CovModel {
 public:
  static constexpr double kJitter = 1e-6;

  SqExpCov(Index t, double log_length, double log_scale)
      : CovModel(t, (VectorXd(2) << log_length, log_scale).finished()),
        length_(std::exp(log_length)),
        scale_(std::exp(log_scale)),
        sigma_(t, t) {
    for (Index i = 0; i < t; ++i) {
      for (Index j = 0; j < t; ++j) {
        const double d = static_cast<double>(i - j);
        sigma_(i, j) = scale_ * std::exp(-d * d / (2.0 * length_ * length_));
      }
      sigma_(i, i) += kJitter * scale_;
    }
    llt_ = llt_or_throw(sigma_, "sq_exp");
  }
  CovKind kind() const override { return CovKind::sq_exp; }
  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, 2, "sq_exp");
    return std::make_shared<SqExpCov>(dim(), v[0], v[1]);
  }
  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    return llt_.solve(x);
  }
  double logdet() const override { return 2.0 * log_diag_sum(llt_); }
  MatrixXd dense() const override { return sigma_; }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return sigma_ * x;
  }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return llt_.matrixL() * z;
  }
  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    return derivative(k) * x;
  }
  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    const MatrixXd qp = q * p.transpose();
    VectorXd g(2);
    for (Index k = 0; k < 2; ++k) g[k] = derivative(k).cwiseProduct(qp.transpose()).sum();
    return g;
  }
  CovSpec spec() const override {
    CovSpec s = CovSpec::simple(CovKind::sq_exp, dim());
    s.params = params();
    return s;
  }

 private:
  MatrixXd derivative(Index k) const {
    if (k == 1) return sigma_;
    MatrixXd out(dim(), dim());
    for (Index i = 0; i < dim(); ++i) {
      for (Index j = 0; j < dim(); ++j) {
        const double d2 = static_cast<double>((i - j) * (i - j));
        const double l2 = length_ * length_;
        out(i, j) = scale_ * std::exp(-d2 / (2.0 * l2)) * d2 / l2;
      }
    }
    return out;
  }

  double length_;
  double scale_;
  MatrixXd sigma_;
  Eigen::LLT<MatrixXd> llt_;
};

// Σ = B + F U Fᵀ + L Lᵀ. Written as B + H Hᵀ with H = [F·chol(U), L] so that
// solve and log-det go through the Woodbury identity and determinant lemma with
// an identity-plus-low-rank capacitance matrix K = I + Hᵀ B⁻¹ H.
class LowRankPlusCov final : public CovModel {
 public:
  LowRankPlusCov(CovPtr base, MatrixXd fixed, CovPtr inner, MatrixXd learned)
      : CovModel(base->dim(), gather_params(*base, inner.get(), learned)),
        base_(std::move(base)),
        fixed_(std::move(fixed)),
        inner_(std::move(inner)),
        learned_(std::move(learned)) {
    const Index t = dim();
    const Index c = fixed_.cols();
    const Index r = learned_.cols();
    if (fixed_.rows() != t || learned_.rows() != t) {
      throw InputError("lowrank_plus: fixed factor and learned factor must have " + std::to_string(t) + " rows");
    }
    if (c > 0 && (!inner_ || inner_->dim() != c)) {
      throw InputError("lowrank_plus: inner covariance must have dimension " + std::to_string(c));
    }
    h_.resize(t, c + r);
    if (c > 0) {
      const auto u_llt = llt_or_throw(inner_->dense(), "lowrank_plus inner covariance");
      h_.leftCols(c) = fixed_ * MatrixXd(u_llt.matrixL());
    }
    h_.rightCols(r) = learned_;
    base_logdet_ = base_->logdet();
    if (h_.cols() > 0) {
      binv_h_ = base_->solve(h_);
      MatrixXd cap = MatrixXd::Identity(h_.cols(), h_.cols()) + h_.transpose() * binv_h_;
      cap = 0.5 * (cap + cap.transpose());
      cap_llt_ = llt_or_throw(cap, "lowrank_plus capacitance");
      cap_logdet_ = 2.0 * log_diag_sum(cap_llt_);
    }
  }

  CovKind kind() const override { return CovKind::lowrank_plus; }
  const CovPtr& base() const { return base_; }
  const CovPtr& inner() const { return inner_; }
  const MatrixXd& fixed() const { return fixed_; }
  const MatrixXd& learned() const { return learned_; }

  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, n_params(), "lowrank_plus");
    const Index nb = base_->n_params();
    const Index ni = inner_ ? inner_->n_params() : 0;
    CovPtr base = base_->with_params(v.head(nb));
    CovPtr inner = inner_ ? inner_->with_params(v.segment(nb, ni)) : nullptr;
    MatrixXd learned = Eigen::Map<const MatrixXd>(v.data() + nb + ni, dim(), learned_.cols());
    return std::make_shared<LowRankPlusCov>(std::move(base), fixed_, std::move(inner), std::move(learned));
  }

  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    MatrixXd out = base_->solve(x);
    if (h_.cols() > 0) out -= binv_h_ * cap_llt_.solve(binv_h_.transpose() * x);
    return out;
  }
  double logdet() const override { return base_logdet_ + cap_logdet_; }
  MatrixXd dense() const override { return base_->dense() + h_ * h_.transpose(); }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return base_->multiply(x) + h_ * (h_.transpose() * x);
  }
  VectorXd diagonal() const override { return base_->diagonal() + h_.rowwise().squaredNorm(); }

  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    const Index nb = base_->n_params();
    const Index ni = inner_ ? inner_->n_params() : 0;
    if (k < nb) return base_->dsigma_apply(k, x);
    if (k < nb + ni) return fixed_ * inner_->dsigma_apply(k - nb, fixed_.transpose() * x);
    const Index idx = k - nb - ni;
    const Index a = idx % dim();
    const Index b = idx / dim();
    // d(L Lᵀ) = E_ab Lᵀ + L E_ba.
    MatrixXd out = learned_.col(b) * x.row(a);
    out.row(a) += learned_.col(b).transpose() * x;
    return out;
  }

  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    const Index nb = base_->n_params();
    const Index ni = inner_ ? inner_->n_params() : 0;
    VectorXd g(n_params());
    g.head(nb) = base_->grad_quadratic(p, q);
    if (ni > 0) g.segment(nb, ni) = inner_->grad_quadratic(fixed_.transpose() * p, fixed_.transpose() * q);
    if (learned_.cols() > 0) {
      const MatrixXd gl = p * (q.transpose() * learned_) + q * (p.transpose() * learned_);
      g.tail(learned_.size()) = Eigen::Map<const VectorXd>(gl.data(), gl.size());
    }
    return g;
  }

  VectorXd grad_logdet() const override {
    const Index nb = base_->n_params();
    const Index ni = inner_ ? inner_->n_params() : 0;
    VectorXd g(n_params());
    // Tr[Σ⁻¹ ∂B] = Tr[B⁻¹ ∂B] - Tr[B⁻¹H K⁻¹ HᵀB⁻¹ ∂B].
    g.head(nb) = base_->grad_logdet();
    if (h_.cols() > 0 && nb > 0) {
      const MatrixXd left = cap_llt_.solve(binv_h_.transpose()).transpose();
      g.head(nb) -= base_->grad_quadratic(left, binv_h_);
    }
    if (fixed_.cols() > 0 || learned_.cols() > 0) {
      MatrixXd lowrank(dim(), fixed_.cols() + learned_.cols());
      lowrank << fixed_, learned_;
      const MatrixXd sinv = solve(lowrank);
      if (ni > 0) {
        const MatrixXd gram = fixed_.transpose() * sinv.leftCols(fixed_.cols());
        g.segment(nb, ni) = inner_->grad_quadratic(gram, MatrixXd::Identity(fixed_.cols(), fixed_.cols()));
      }
      if (learned_.cols() > 0) {
        const MatrixXd gl = 2.0 * sinv.rightCols(learned_.cols());
        g.tail(learned_.size()) = Eigen::Map<const VectorXd>(gl.data(), gl.size());
      }
    }
    return g;
  }

  CovSpec spec() const override {
    CovSpec s;
    s.kind = CovKind::lowrank_plus;
    s.dim = dim();
    s.parts.push_back(base_->spec());
    if (inner_) s.parts.push_back(inner_->spec());
    s.fixed_factor = fixed_;
    s.learned_rank = learned_.cols();
    s.params = params();
    return s;
  }

 private:
  static VectorXd gather_params(const CovModel& base, const CovModel* inner, const MatrixXd& learned) {
    const VectorXd empty;
    const VectorXd inner_params = inner ? inner->params() : empty;
    const VectorXd flat = Eigen::Map<const VectorXd>(learned.data(), learned.size());
    return concat({&base.params(), &inner_params, &flat});
  }

  CovPtr base_;
  MatrixXd fixed_;
  CovPtr inner_;
  MatrixXd learned_;
  MatrixXd h_;
  MatrixXd binv_h_;
  Eigen::LLT<MatrixXd> cap_llt_;
  double base_logdet_ = 0.0;
  double cap_logdet_ = 0.0;
};

// Σ = Σ_0 ⊗ Σ_1 ⊗ ... (outermost first). With a mask, Σ is defined through its
// Cholesky factor: the kept principal submatrix of ⊗ chol(Σ_i).
class KronCov final : public CovModel {
 public:
  KronCov(std::vector<CovPtr> factors, std::optional<KronMask> mask)
      : CovModel(kron_dim(factors, mask), gather_params(factors)),
        factors_(std::move(factors)),
        mask_(std::move(mask)),
        tri_(cholesky_factors(factors_)) {
    for (const auto& f : factors_) dense_factors_.push_back(f->dense());
  }

  CovKind kind() const override { return CovKind::kron; }

  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, n_params(), "kron");
    std::vector<CovPtr> next;
    Index at = 0;
    for (const auto& f : factors_) {
      next.push_back(f->with_params(v.segment(at, f->n_params())));
      at += f->n_params();
    }
    return std::make_shared<KronCov>(std::move(next), mask_);
  }

  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    if (!mask_) return kron_tri_solve_upper(tri_, kron_tri_solve(tri_, x));
    return kron_tri_solve_upper_masked(tri_, *mask_, kron_tri_solve_masked(tri_, *mask_, x));
  }
  double logdet() const override { return kron_logdet(tri_, mask_); }

  MatrixXd dense() const override {
    if (!mask_) return kron_dense(dense_factors_);
    const MatrixXd l = kron_dense(tri_.factors());
    const auto& kept = mask_->kept_indices();
    const MatrixXd lk = l(kept, kept);
    return lk * lk.transpose();
  }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    if (!mask_) return kron_multiply(dense_factors_, x);
    return masked_mult(tri_.factors(), masked_mult(tri_.factors(), x, true), false);
  }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    if (!mask_) return kron_multiply(tri_.factors(), z);
    return masked_mult(tri_.factors(), z, false);
  }

  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    auto [f, local] = locate(k);
    const MatrixXd d_factor = factors_[f]->dsigma_apply(local, MatrixXd::Identity(factors_[f]->dim(), factors_[f]->dim()));
    if (!mask_) {
      auto parts = dense_factors_;
      parts[f] = d_factor;
      return kron_multiply(parts, x);
    }
    // Differentiate through the Cholesky factor: dL = L Φ(L⁻¹ dΣ L⁻ᵀ), where Φ
    // keeps the strict lower triangle and half the diagonal.
    const MatrixXd& l = tri_[f];
    MatrixXd m = l.triangularView<Eigen::Lower>().solve(d_factor);
    m = l.triangularView<Eigen::Lower>().solve(m.transpose()).transpose();
    MatrixXd phi = m.triangularView<Eigen::StrictlyLower>();
    phi.diagonal() = 0.5 * m.diagonal();
    auto d_chol = tri_.factors();
    d_chol[f] = l * phi;
    const auto& chol = tri_.factors();
    return masked_mult(d_chol, masked_mult(chol, x, true), false) +
           masked_mult(chol, masked_mult(d_chol, x, true), false);
  }

  CovSpec spec() const override {
    std::vector<CovSpec> parts;
    for (const auto& f : factors_) parts.push_back(f->spec());
    std::optional<std::vector<bool>> mask;
    if (mask_) mask = mask_->keep();
    CovSpec s = CovSpec::kron(std::move(parts), std::move(mask));
    s.params = params();
    return s;
  }

 private:
  static Index kron_dim(const std::vector<CovPtr>& factors, const std::optional<KronMask>& mask) {
    if (factors.empty()) throw InputError("kron: at least one factor is required");
    Index n = 1;
    for (const auto& f : factors) n *= f->dim();
    if (mask) {
      if (mask->size() != n) {
        throw InputError("kron: mask length " + std::to_string(mask->size()) + " does not match " +
                         std::to_string(n));
      }
      return mask->kept_count();
    }
    return n;
  }
  static VectorXd gather_params(const std::vector<CovPtr>& factors) {
    Index n = 0;
    for (const auto& f : factors) n += f->n_params();
    VectorXd out(n);
    Index at = 0;
    for (const auto& f : factors) {
      out.segment(at, f->n_params()) = f->params();
      at += f->n_params();
    }
    return out;
  }
  static TriFactorList cholesky_factors(const std::vector<CovPtr>& factors) {
    std::vector<MatrixXd> chols;
    for (const auto& f : factors) chols.push_back(llt_or_throw(f->dense(), "kron factor").matrixL());
    return TriFactorList(std::move(chols));
  }

  std::pair<std::size_t, Index> locate(Index k) const {
    for (std::size_t f = 0; f < factors_.size(); ++f) {
      if (k < factors_[f]->n_params()) return {f, k};
      k -= factors_[f]->n_params();
    }
    throw InputError("kron: parameter index out of range");
  }

  // Kept rows of (⊗ A_i)ᵀ or (⊗ A_i) applied to the zero-filled x.
  MatrixXd masked_mult(const std::vector<MatrixXd>& parts, const MatrixXd& x, bool transpose) const {
    return mask_->gather(kron_multiply(parts, mask_->scatter(x), transpose));
  }

  std::vector<CovPtr> factors_;
  std::optional<KronMask> mask_;
  TriFactorList tri_;
  std::vector<MatrixXd> dense_factors_;
};

// Σ = diag(1/τ_1², ..., 1/τ_n²) ⊗ Σ_v with τ_1² = 1 fixed.
// Parameters: log τ_j² for j = 2..n, then Σ_v's parameters.
class BlockScaledCov final : public CovModel {
 public:
  BlockScaledCov(CovPtr inner, VectorXd precisions)
      : CovModel(inner->dim() * precisions.size(), gather_params(*inner, precisions)),
        inner_(std::move(inner)),
        prec_(std::move(precisions)) {
    if (prec_.size() < 1) throw InputError("block_scaled: at least one block is required");
    if (prec_[0] != 1.0) throw InputError("block_scaled: the first precision is anchored at 1");
    if (!(prec_.array() > 0).all()) throw InputError("block_scaled: precisions must be positive");
  }

  CovKind kind() const override { return CovKind::block_scaled; }
  const CovPtr& inner() const { return inner_; }
  const VectorXd& precisions() const { return prec_; }

  CovPtr with_params(const VectorXd& v) const override {
    check_param_length(v, n_params(), "block_scaled");
    const Index nt = prec_.size() - 1;
    VectorXd prec(prec_.size());
    prec[0] = 1.0;
    prec.tail(nt) = v.head(nt).array().exp();
    return std::make_shared<BlockScaledCov>(inner_->with_params(v.tail(inner_->n_params())), std::move(prec));
  }

  MatrixXd solve(const MatrixXd& x) const override {
    check_rows(x, "solve");
    return per_block(x, [&](Index j, const MatrixXd& xj) { return MatrixXd(prec_[j] * inner_->solve(xj)); });
  }
  double logdet() const override {
    return static_cast<double>(prec_.size()) * inner_->logdet() -
           static_cast<double>(inner_->dim()) * prec_.array().log().sum();
  }
  MatrixXd dense() const override {
    const MatrixXd d = prec_.cwiseInverse().asDiagonal();
    return kron_dense({d, inner_->dense()});
  }
  MatrixXd multiply(const MatrixXd& x) const override {
    check_rows(x, "multiply");
    return per_block(x, [&](Index j, const MatrixXd& xj) { return MatrixXd(inner_->multiply(xj) / prec_[j]); });
  }
  VectorXd diagonal() const override {
    const VectorXd d = inner_->diagonal();
    VectorXd out(dim());
    for (Index j = 0; j < prec_.size(); ++j) out.segment(j * d.size(), d.size()) = d / prec_[j];
    return out;
  }
  MatrixXd chol_multiply(const MatrixXd& z) const override {
    check_rows(z, "chol_multiply");
    return per_block(z, [&](Index j, const MatrixXd& zj) {
      return MatrixXd(inner_->chol_multiply(zj) / std::sqrt(prec_[j]));
    });
  }

  MatrixXd dsigma_apply(Index k, const MatrixXd& x) const override {
    check_param_index(k);
    check_rows(x, "dsigma_apply");
    const Index nt = prec_.size() - 1;
    const Index v = inner_->dim();
    if (k < nt) {
      const Index j = k + 1;
      MatrixXd out = MatrixXd::Zero(x.rows(), x.cols());
      out.middleRows(j * v, v) = -inner_->multiply(x.middleRows(j * v, v)) / prec_[j];
      return out;
    }
    return per_block(x, [&](Index j, const MatrixXd& xj) {
      return MatrixXd(inner_->dsigma_apply(k - nt, xj) / prec_[j]);
    });
  }

  VectorXd grad_quadratic(const MatrixXd& p, const MatrixXd& q) const override {
    const Index n = prec_.size();
    const Index v = inner_->dim();
    const Index m = q.cols();
    VectorXd g(n_params());
    MatrixXd ps(v, n * m), qs(v, n * m);
    for (Index j = 0; j < n; ++j) {
      const MatrixXd pj = p.middleRows(j * v, v);
      const MatrixXd qj = q.middleRows(j * v, v);
      if (j > 0) g[j - 1] = -pj.cwiseProduct(inner_->multiply(qj)).sum() / prec_[j];
      ps.middleCols(j * m, m) = pj / prec_[j];
      qs.middleCols(j * m, m) = qj;
    }
    if (inner_->n_params() > 0) g.tail(inner_->n_params()) = inner_->grad_quadratic(ps, qs);
    return g;
  }
  VectorXd grad_logdet() const override {
    const Index n = prec_.size();
    VectorXd g(n_params());
    g.head(n - 1).setConstant(-static_cast<double>(inner_->dim()));
    if (inner_->n_params() > 0) g.tail(inner_->n_params()) = static_cast<double>(n) * inner_->grad_logdet();
    return g;
  }

  CovSpec spec() const override {
    CovSpec s = CovSpec::block_scaled(prec_.size(), inner_->spec());
    s.params = params();
    return s;
  }

 private:
  static VectorXd gather_params(const CovModel& inner, const VectorXd& prec) {
    const VectorXd logs = prec.size() > 1 ? VectorXd(prec.tail(prec.size() - 1).array().log()) : VectorXd();
    return concat({&logs, &inner.params()});
  }

  template <typename F>
  MatrixXd per_block(const MatrixXd& x, F&& fn) const {
    const Index v = inner_->dim();
    MatrixXd out(x.rows(), x.cols());
    for (Index j = 0; j < prec_.size(); ++j) out.middleRows(j * v, v) = fn(j, x.middleRows(j * v, v));
    return out;
  }

  CovPtr inner_;
  VectorXd prec_;
};

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(CovKind kind) {
  switch (kind) {
    case CovKind::identity: return "identity";
    case CovKind::isotropic: return "isotropic";
    case CovKind::diagonal: return "diagonal";
    case CovKind::full_rank: return "full_rank";
    case CovKind::ar1: return "ar1";
    case CovKind::sq_exp: return "sq_exp";
    case CovKind::lowrank_plus: return "lowrank_plus";
    case CovKind::kron: return "kron";
    case CovKind::block_scaled: return "block_scaled";
  }
  return "unknown";
}

CovKind cov_kind_from_string(std::string_view name) {
  for (CovKind k : {CovKind::identity, CovKind::isotropic, CovKind::diagonal, CovKind::full_rank, CovKind::ar1,
                    CovKind::sq_exp, CovKind::lowrank_plus, CovKind::kron, CovKind::block_scaled}) {
    if (to_string(k) == name) return k;
  }
  throw InputError("unknown covariance kind '" + std::string(name) + "'");
}

CovSpec CovSpec::simple(CovKind kind, Index dim) {
  CovSpec s;
  s.kind = kind;
  s.dim = dim;
  return s;
}

CovSpec CovSpec::kron(std::vector<CovSpec> factors, std::optional<std::vector<bool>> mask) {
  CovSpec s;
  s.kind = CovKind::kron;
  s.parts = std::move(factors);
  s.mask = std::move(mask);
  return s;
}

CovSpec CovSpec::lowrank_plus(CovSpec base, MatrixXd fixed_factor, Index learned_rank,
                              std::optional<CovSpec> inner) {
  CovSpec s;
  s.kind = CovKind::lowrank_plus;
  s.dim = base.dim;
  s.parts.push_back(std::move(base));
  if (inner) s.parts.push_back(std::move(*inner));
  s.fixed_factor = std::move(fixed_factor);
  s.learned_rank = learned_rank;
  return s;
}

CovSpec CovSpec::block_scaled(Index blocks, CovSpec inner) {
  CovSpec s;
  s.kind = CovKind::block_scaled;
  s.blocks = blocks;
  s.dim = blocks * inner.dim;
  s.parts.push_back(std::move(inner));
  return s;
}

CovModel::CovModel(Index dim, VectorXd params) : dim_(dim), params_(std::move(params)) {
  if (dim_ <= 0) throw InputError("covariance dimension must be positive");
}

void CovModel::check_rows(const MatrixXd& x, std::string_view op) const {
  if (x.rows() != dim_) {
    throw InputError(std::string(to_string(kind())) + " " + std::string(op) + ": input has " +
                     std::to_string(x.rows()) + " rows, covariance dimension is " + std::to_string(dim_));
  }
}

void CovModel::check_param_index(Index k) const {
  if (k < 0 || k >= n_params()) {
    throw InputError(std::string(to_string(kind())) + ": parameter index " + std::to_string(k) +
                     " out of range [0, " + std::to_string(n_params()) + ")");
  }
}

MatrixXd CovModel::multiply(const MatrixXd& x) const {
  check_rows(x, "multiply");
  return dense() * x;
}

VectorXd CovModel::diagonal() const { return dense().diagonal(); }

MatrixXd CovModel::chol_multiply(const MatrixXd& z) const {
  check_rows(z, "chol_multiply");
  return llt_or_throw(dense(), to_string(kind())).matrixL() * z;
}

VectorXd CovModel::grad_quadratic(const MatrixXd& p, const MatrixXd& q) const {
  check_rows(p, "grad_quadratic");
  check_rows(q, "grad_quadratic");
  VectorXd g(n_params());
  for (Index k = 0; k < n_params(); ++k) g[k] = p.cwiseProduct(dsigma_apply(k, q)).sum();
  return g;
}

VectorXd CovModel::grad_logdet() const {
  const MatrixXd eye = MatrixXd::Identity(dim_, dim_);
  return grad_quadratic(solve(eye), eye);
}

CovPtr CovModel::fit_scatter(const MatrixXd& scatter, double count) const {
  check_scatter(scatter, count, dim_);
  const MatrixXd sym = 0.5 * (scatter + scatter.transpose());
  const MatrixXd eye = MatrixXd::Identity(dim_, dim_);
  Objective objective{n_params(), [&](const VectorXd& theta) {
                        const CovPtr m = with_params(theta);
                        const MatrixXd inv = m->solve(eye);
                        const MatrixXd inv_scatter = inv * sym;
                        Evaluation e;
                        e.value = -0.5 * count * m->logdet() - 0.5 * inv_scatter.trace();
                        e.gradient = -0.5 * count * m->grad_logdet() + 0.5 * m->grad_quadratic(inv, inv_scatter);
                        return e;
                      }};
  OptimSettings settings;
  settings.max_iters = 200;
  settings.grad_tol = 1e-9 * count;
  settings.rel_tol = 1e-14;
  const OptimResult fit = maximize(objective, params(), settings);
  return with_params(fit.params);
}

CovPtr make_cov(const CovSpec& spec) {
  auto override_or = [&](CovPtr model) -> CovPtr {
    if (!spec.params) return model;
    check_param_length(*spec.params, model->n_params(), to_string(spec.kind));
    return model->with_params(*spec.params);
  };

  switch (spec.kind) {
    case CovKind::identity:
    case CovKind::isotropic:
    case CovKind::diagonal:
    case CovKind::full_rank:
    case CovKind::ar1:
    case CovKind::sq_exp: {
      if (spec.dim <= 0) throw InputError(std::string(to_string(spec.kind)) + ": dimension must be positive");
      CovPtr m;
      switch (spec.kind) {
        case CovKind::identity: m = std::make_shared<IdentityCov>(spec.dim); break;
        case CovKind::isotropic: m = std::make_shared<IsotropicCov>(spec.dim, 0.0); break;
        case CovKind::diagonal: m = std::make_shared<DiagonalCov>(VectorXd::Zero(spec.dim)); break;
        case CovKind::full_rank:
          m = std::make_shared<FullRankCov>(spec.dim, VectorXd::Zero(FullRankCov::count(spec.dim)));
          break;
        case CovKind::ar1: m = std::make_shared<Ar1Cov>(spec.dim, 0.0, 0.0); break;
        default: m = std::make_shared<SqExpCov>(spec.dim, 0.0, 0.0); break;
      }
      return override_or(std::move(m));
    }
    case CovKind::kron: {
      if (spec.parts.empty()) throw InputError("kron: at least one factor spec is required");
      std::vector<CovPtr> factors;
      Index n = 1;
      for (const auto& p : spec.parts) {
        factors.push_back(make_cov(p));
        n *= factors.back()->dim();
      }
      std::optional<KronMask> mask;
      if (spec.mask) mask = KronMask(*spec.mask);
      const Index expected = mask ? mask->kept_count() : n;
      if (spec.dim != 0 && spec.dim != expected) {
        throw InputError("kron: factor dimensions give " + std::to_string(expected) + ", spec says " +
                         std::to_string(spec.dim));
      }
      return override_or(std::make_shared<KronCov>(std::move(factors), std::move(mask)));
    }
    case CovKind::lowrank_plus: {
      if (spec.parts.empty()) throw InputError("lowrank_plus: base spec is required");
      if (spec.learned_rank < 0) throw InputError("lowrank_plus: learned rank must be non-negative");
      CovPtr base = make_cov(spec.parts[0]);
      const Index t = base->dim();
      MatrixXd fixed = spec.fixed_factor.size() == 0 ? MatrixXd(t, 0) : spec.fixed_factor;
      if (fixed.rows() != t) {
        throw InputError("lowrank_plus: fixed factor has " + std::to_string(fixed.rows()) + " rows, base has " +
                         std::to_string(t));
      }
      CovPtr inner;
      if (fixed.cols() > 0) {
        inner = spec.parts.size() > 1 ? make_cov(spec.parts[1])
                                      : make_cov(CovSpec::simple(CovKind::full_rank, fixed.cols()));
        if (inner->dim() != fixed.cols()) {
          throw InputError("lowrank_plus: inner covariance dimension does not match fixed factor columns");
        }
      }
      std::mt19937_64 rng(spec.seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      MatrixXd learned(t, spec.learned_rank);
      for (Index j = 0; j < learned.cols(); ++j) {
        for (Index i = 0; i < t; ++i) learned(i, j) = 0.01 * normal(rng);
      }
      return override_or(std::make_shared<LowRankPlusCov>(std::move(base), std::move(fixed), std::move(inner),
                                                          std::move(learned)));
    }
    case CovKind::block_scaled: {
      if (spec.parts.empty()) throw InputError("block_scaled: inner spec is required");
      if (spec.blocks < 1) throw InputError("block_scaled: block count must be at least 1");
      CovPtr inner = make_cov(spec.parts[0]);
      if (spec.dim != 0 && spec.dim != spec.blocks * inner->dim()) {
        throw InputError("block_scaled: dimension does not equal blocks x inner dimension");
      }
      return override_or(std::make_shared<BlockScaledCov>(std::move(inner), VectorXd::Ones(spec.blocks)));
    }
  }
  throw InputError("make_cov: unknown kind");
}

CovPtr full_rank_from_matrix(const MatrixXd& sigma) {
  if (sigma.rows() != sigma.cols() || sigma.rows() == 0) throw InputError("full_rank_from_matrix: not square");
  const MatrixXd sym = 0.5 * (sigma + sigma.transpose());
  const auto llt = llt_or_throw(sym, "full_rank_from_matrix");
  return std::make_shared<FullRankCov>(sigma.rows(), FullRankCov::params_from_chol(llt.matrixL()));
}

LowRankParts lowrank_parts(const CovModel& model) {
  const auto* m = dynamic_cast<const LowRankPlusCov*>(&model);
  if (!m) throw InputError("lowrank_parts: model is " + std::string(to_string(model.kind())));
  return {m->base(), m->inner(), m->fixed(), m->learned()};
}

BlockScaledParts block_scaled_parts(const CovModel& model) {
  const auto* m = dynamic_cast<const BlockScaledCov*>(&model);
  if (!m) throw InputError("block_scaled_parts: model is " + std::string(to_string(model.kind())));
  return {m->inner(), m->precisions()};
}

CovPtr make_block_scaled(const CovPtr& inner, const VectorXd& precisions) {
  return std::make_shared<BlockScaledCov>(inner, precisions);
}

CovPtr make_lowrank_plus(const CovPtr& base, const MatrixXd& fixed_factor, const CovPtr& inner,
                         const MatrixXd& learned) {
  return std::make_shared<LowRankPlusCov>(base, fixed_factor, fixed_factor.cols() > 0 ? inner : nullptr, learned);
}

}  // namespace mnkit
