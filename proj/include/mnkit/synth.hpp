#pragma once

// Synthetic data with known ground truth, and recovery metrics.

#include "mnkit/covmodels.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace mnkit {

struct RsaSynthConfig {
  Index t = 300;
  Index v = 2500;
  Index c = 16;
  double snr = 0.08;            // expected ‖signal‖_F / expected ‖noise‖_F
  double ar1_rho = 0.5;         // temporal noise autocorrelation
  double gp_lengthscale = 2.0;  // spatial smoothness in voxels; 0 gives independent voxels
  Index n_nuisance = 3;         // design-irrelevant timecourses added to the noise
  double condition_bound = 10.0;  // largest allowed condition number of U_true (at most 20)
  std::uint64_t seed = 0;

  void validate() const;
};

struct RsaSynthBundle {
  MatrixXd y;          // t × v, columns centered
  MatrixXd x;          // t × c design
  MatrixXd u_true;     // c × c in data units
  MatrixXd corr_true;
  double signal_scale = 0.0;
  double realized_snr = 0.0;  // ‖signal‖_F / ‖noise‖_F as drawn
};

// With gp_lengthscale = 0 and n_nuisance = 0 the data follow the MN-RSA model
// exactly: Y = X W + E, W ~ MN(0, U_true, I), E ~ MN(0, AR(1), I).
RsaSynthBundle gen_rsa_synth(const RsaSynthConfig& cfg);

struct SrmSynthConfig {
  Index n = 5;
  Index v = 50;
  Index t = 200;
  Index k = 3;
  Index n_heldout = 1;       // extra subjects sharing S, for held-out evaluation
  double snr = 2.0;          // expected ‖signal‖_F / expected ‖noise‖_F per subject
  bool orthonormal_w = false;
  double ar1_rho = 0.0;      // temporal noise autocorrelation
  double shared_rho = 0.8;   // autocorrelation of the rows of S
  std::uint64_t seed = 0;

  void validate() const;
};

struct SrmSynthBundle {
  std::vector<MatrixXd> subjects;  // v × t each
  std::vector<MatrixXd> heldout;
  MatrixXd s_true;                 // k × t, rows centered
  std::vector<MatrixXd> w_true;    // v × k, training then held-out subjects
  std::vector<VectorXd> b_true;
  double signal_scale = 0.0;       // X_j = signal_scale · W_j S + b_j 1ᵀ + noise
  double realized_snr = 0.0;
};

SrmSynthBundle gen_srm_synth(const SrmSynthConfig& cfg);

struct CorrError {
  double rmse = 0.0;
  bool degenerate = false;  // the estimate was missing and scored as the zero matrix
};

// Root mean square difference over the strict upper triangle.
double rmse_corr(const MatrixXd& est, const MatrixXd& truth);
CorrError rmse_corr(const std::optional<MatrixXd>& est, const MatrixXd& truth);

// Principal angles in degrees between the row spaces of a and b, ascending.
// Throws InputError if either is not of full row rank.
std::vector<double> principal_angles(const MatrixXd& a, const MatrixXd& b);

}  // namespace mnkit
