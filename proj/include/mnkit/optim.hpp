#pragma once

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace mnkit {

using Eigen::Index;
using Eigen::VectorXd;

struct Evaluation {
  double value = 0.0;
  VectorXd gradient;
};

// A smooth function to maximize. evaluate() may return a non-finite value or
// throw NumericalError for parameters it cannot handle; the line search treats
// both as a rejected step.
struct Objective {
  Index n_dims = 0;
  std::function<Evaluation(const VectorXd&)> evaluate;
};

struct OptimSettings {
  int max_iters = 500;
  double grad_tol = 1e-5;
  double rel_tol = 1e-9;
  int memory = 10;
  double armijo = 1e-4;
  double contraction = 0.5;
  int max_backtracks = 60;
};

struct TracePoint {
  int iteration = 0;
  double value = 0.0;
};

struct OptimResult {
  VectorXd params;
  double value = 0.0;
  VectorXd gradient;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string stop_reason;
  std::vector<TracePoint> trace;
};

// Limited-memory quasi-Newton ascent with Armijo backtracking. Accepted steps
// never decrease the objective. Throws FitError if the objective is not
// finite at init.
OptimResult maximize(const Objective& objective, const VectorXd& init,
                     const OptimSettings& settings = {});

// Largest per-coordinate discrepancy between the analytic gradient and central
// differences: relative to the finite-difference value, absolute when that
// value is below 1e-8 in magnitude.
double grad_check(const Objective& objective, const VectorXd& point, double step);

}  // namespace mnkit
