#include "mnkit/synth.hpp"

#include "mnkit/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace mnkit {

namespace {

MatrixXd randn(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

CovPtr ar1(Index t, double rho) {
  return make_cov(CovSpec::simple(CovKind::ar1, t))->with_params(Eigen::Vector2d(0.0, std::atanh(rho)));
}

// Smoothing along the voxel axis: Z Kᵀ with K the truncated Gaussian
// convolution matrix whose interior rows have unit norm. K Kᵀ approximates a
// squared-exponential kernel with the given lengthscale.
class SpatialSmoother {
 public:
  SpatialSmoother(Index v, double lengthscale) : v_(v) {
    if (lengthscale <= 0) return;
    const auto half = static_cast<Index>(std::ceil(4.0 * lengthscale));
    weights_.resize(2 * half + 1);
    for (Index d = -half; d <= half; ++d) {
      const double r = static_cast<double>(d) / lengthscale;
      weights_[d + half] = std::exp(-r * r);
    }
    weights_ /= weights_.norm();
  }

  MatrixXd apply(const MatrixXd& z) const {
    if (weights_.size() == 0) return z;
    const Index half = weights_.size() / 2;
    MatrixXd out = MatrixXd::Zero(z.rows(), z.cols());
    for (Index j = 0; j < v_; ++j) {
      for (Index d = -half; d <= half; ++d) {
        const Index src = j + d;
        if (src >= 0 && src < v_) out.col(j) += weights_[d + half] * z.col(src);
      }
    }
    return out;
  }

  // tr(K Kᵀ).
  double trace() const {
    if (weights_.size() == 0) return static_cast<double>(v_);
    const Index half = weights_.size() / 2;
    double total = 0.0;
    for (Index j = 0; j < v_; ++j)
      for (Index d = -half; d <= half; ++d)
        if (j + d >= 0 && j + d < v_) total += weights_[d + half] * weights_[d + half];
    return total;
  }

 private:
  Index v_;
  VectorXd weights_;
};

// Binary events convolved with a Gaussian bump, each column scaled to unit
// standard deviation so that U is in units of explained variance.
MatrixXd event_design(Index t, Index c, std::mt19937_64& rng) {
  std::bernoulli_distribution event(0.08);
  std::uniform_int_distribution<Index> any(0, t - 1);
  const double width = 2.0;
  MatrixXd x = MatrixXd::Zero(t, c);
  for (Index j = 0; j < c; ++j) {
    VectorXd onsets = VectorXd::Zero(t);
    for (Index i = 0; i < t; ++i) onsets[i] = event(rng) ? 1.0 : 0.0;
    if (onsets.sum() == 0) onsets[any(rng)] = 1.0;
    for (Index i = 0; i < t; ++i) {
      if (onsets[i] == 0) continue;
      for (Index s = std::max<Index>(0, i - 8); s < std::min(t, i + 9); ++s) {
        const double r = static_cast<double>(s - i) / width;
        x(s, j) += std::exp(-0.5 * r * r);
      }
    }
    const double mean = x.col(j).mean();
    x.col(j) /= std::sqrt((x.col(j).array() - mean).square().mean());
  }
  return x;
}

MatrixXd random_orthogonal(Index n, std::mt19937_64& rng) {
  Eigen::HouseholderQR<MatrixXd> qr(randn(n, n, rng));
  return qr.householderQ() * MatrixXd::Identity(n, n);
}

}  // namespace

void RsaSynthConfig::validate() const {
  if (t <= 0 || v <= 0 || c <= 0) throw InputError("rsa synth: dimensions must be positive");
  if (t <= c) throw InputError("rsa synth: need t > c");
  if (!(snr >= 0)) throw InputError("rsa synth: snr must be non-negative");
  if (!(std::abs(ar1_rho) < 1)) throw InputError("rsa synth: ar1_rho must lie in (-1, 1)");
  if (!(gp_lengthscale >= 0)) throw InputError("rsa synth: gp_lengthscale must be non-negative");
  if (n_nuisance < 0) throw InputError("rsa synth: n_nuisance must be non-negative");
  if (!(condition_bound >= 1 && condition_bound <= 20)) throw InputError("rsa synth: condition_bound must be in [1, 20]");
}

RsaSynthBundle gen_rsa_synth(const RsaSynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const SpatialSmoother smooth(cfg.v, cfg.gp_lengthscale);

  RsaSynthBundle b;
  b.x = event_design(cfg.t, cfg.c, rng);

  // U_true = Q diag(λ) Qᵀ with log-uniform λ, normalized to unit mean variance.
  std::uniform_real_distribution<double> log_eig(0.0, std::log(cfg.condition_bound));
  VectorXd eig(cfg.c);
  for (Index i = 0; i < cfg.c; ++i) eig[i] = std::exp(log_eig(rng));
  const MatrixXd q = random_orthogonal(cfg.c, rng);
  MatrixXd u = q * eig.asDiagonal() * q.transpose();
  u = 0.5 * (u + u.transpose());
  u *= static_cast<double>(cfg.c) / u.trace();

  const Eigen::LLT<MatrixXd> u_llt(u);
  const MatrixXd w = smooth.apply(MatrixXd(u_llt.matrixL()) * randn(cfg.c, cfg.v, rng));
  const MatrixXd signal = b.x * w;

  MatrixXd noise = smooth.apply(ar1(cfg.t, cfg.ar1_rho)->chol_multiply(randn(cfg.t, cfg.v, rng)));
  const CovPtr nuisance_cov = ar1(cfg.t, 0.9);
  for (Index k = 0; k < cfg.n_nuisance; ++k) {
    MatrixXd course = nuisance_cov->chol_multiply(randn(cfg.t, 1, rng));
    course *= std::sqrt(static_cast<double>(cfg.t)) / course.norm();
    noise += course * randn(1, cfg.v, rng);
  }

  // Scale by expected energies so the model stays exactly matrix-normal.
  const double tr_v = smooth.trace();
  const double signal_energy = (b.x * u * b.x.transpose()).trace() * tr_v;
  const double noise_energy = static_cast<double>(cfg.t) * tr_v +
                              static_cast<double>(cfg.n_nuisance * cfg.t * cfg.v);
  b.signal_scale = cfg.snr * std::sqrt(noise_energy / signal_energy);
  b.realized_snr = b.signal_scale * signal.norm() / noise.norm();
  b.y = b.signal_scale * signal + noise;
  b.y.rowwise() -= b.y.colwise().mean();
  b.u_true = b.signal_scale * b.signal_scale * u * (tr_v / static_cast<double>(cfg.v));
  const VectorXd inv_sd = u.diagonal().cwiseSqrt().cwiseInverse();
  b.corr_true = inv_sd.asDiagonal() * u * inv_sd.asDiagonal();
  b.corr_true.diagonal().setOnes();
  return b;
}

void SrmSynthConfig::validate() const {
  if (n < 2) throw InputError("srm synth: need at least two subjects");
  if (v <= 0 || t <= 0 || k <= 0) throw InputError("srm synth: dimensions must be positive");
  if (k >= std::min(v, t)) throw InputError("srm synth: need k < min(v, t)");
  if (n_heldout < 0) throw InputError("srm synth: n_heldout must be non-negative");
  if (!(snr >= 0)) throw InputError("srm synth: snr must be non-negative");
  if (!(std::abs(ar1_rho) < 1) || !(std::abs(shared_rho) < 1)) {
    throw InputError("srm synth: autocorrelations must lie in (-1, 1)");
  }
}

SrmSynthBundle gen_srm_synth(const SrmSynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SrmSynthBundle b;
  b.s_true = ar1(cfg.t, cfg.shared_rho)->chol_multiply(randn(cfg.t, cfg.k, rng)).transpose();
  // A time-constant part of S is indistinguishable from the intercepts.
  b.s_true = (b.s_true.colwise() - b.s_true.rowwise().mean()).eval();
  const CovPtr noise_t = ar1(cfg.t, cfg.ar1_rho);
  // E‖W S‖² = tr(WᵀW)·t for unit-variance rows of S.
  const double w_energy = cfg.orthonormal_w ? static_cast<double>(cfg.k) : static_cast<double>(cfg.v * cfg.k);
  b.signal_scale = cfg.snr * std::sqrt(static_cast<double>(cfg.v) / w_energy);
  double signal_sq = 0.0, noise_sq = 0.0;
  for (Index j = 0; j < cfg.n + cfg.n_heldout; ++j) {
    MatrixXd w = randn(cfg.v, cfg.k, rng);
    if (cfg.orthonormal_w) {
      Eigen::HouseholderQR<MatrixXd> qr(w);
      w = qr.householderQ() * MatrixXd::Identity(cfg.v, cfg.k);
    }
    const VectorXd bias = randn(cfg.v, 1, rng).col(0);
    const MatrixXd noise = noise_t->chol_multiply(randn(cfg.t, cfg.v, rng)).transpose();
    const MatrixXd signal = b.signal_scale * w * b.s_true;
    signal_sq += signal.squaredNorm();
    noise_sq += noise.squaredNorm();
    MatrixXd x = signal + noise;
    x.colwise() += bias;
    (j < cfg.n ? b.subjects : b.heldout).push_back(std::move(x));
    b.w_true.push_back(std::move(w));
    b.b_true.push_back(bias);
  }
  b.realized_snr = std::sqrt(signal_sq / noise_sq);
  return b;
}

double rmse_corr(const MatrixXd& est, const MatrixXd& truth) {
  if (est.rows() != truth.rows() || est.cols() != truth.cols() || est.rows() != est.cols()) {
    throw InputError("rmse_corr: matrices must be square and of equal size");
  }
  const Index c = est.rows();
  if (c < 2) return 0.0;
  double sum = 0.0;
  for (Index i = 0; i < c; ++i)
    for (Index j = i + 1; j < c; ++j) sum += (est(i, j) - truth(i, j)) * (est(i, j) - truth(i, j));
  return std::sqrt(sum / static_cast<double>(c * (c - 1) / 2));
}

CorrError rmse_corr(const std::optional<MatrixXd>& est, const MatrixXd& truth) {
  if (est) return {rmse_corr(*est, truth), false};
  return {rmse_corr(MatrixXd(MatrixXd::Zero(truth.rows(), truth.cols())), truth), true};
}

std::vector<double> principal_angles(const MatrixXd& a, const MatrixXd& b) {
  if (a.cols() != b.cols()) throw InputError("principal_angles: row lengths differ");
  auto basis = [](const MatrixXd& m, const char* name) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(m.transpose());
    if (qr.rank() < m.rows()) throw InputError(std::string("principal_angles: ") + name + " is not of full row rank");
    // Column pivoting permutes only the coefficients; span(Q_thin) = row space of m.
    return MatrixXd(qr.householderQ() * MatrixXd::Identity(m.cols(), m.rows()));
  };
  const MatrixXd qa = basis(a, "first argument");
  const MatrixXd qb = basis(b, "second argument");
  const MatrixXd cross = qa.transpose() * qb;
  const VectorXd cosines = Eigen::JacobiSVD<MatrixXd>(cross).singularValues();  // descending
  // acos loses precision near zero; small angles come from the sines instead.
  const VectorXd sines = Eigen::JacobiSVD<MatrixXd>(qb - qa * cross).singularValues().reverse();
  std::vector<double> angles;
  for (Index i = 0; i < cosines.size(); ++i) {
    const double c = std::clamp(cosines[i], 0.0, 1.0);
    const double rad = c * c > 0.5 ? std::asin(std::clamp(sines[i], 0.0, 1.0)) : std::acos(c);
    angles.push_back(rad * 180.0 / std::numbers::pi);
  }
  return angles;
}

}  // namespace mnkit
