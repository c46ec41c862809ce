#include "mnkit/optim.hpp"

#include "mnkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <string>

namespace mnkit {

namespace {

struct Pair {
  VectorXd s;
  VectorXd y;
  double rho;
};

// Evaluation that converts numerical failures into a rejected (-inf) value.
Evaluation safe_evaluate(const Objective& objective, const VectorXd& x) {
  try {
    Evaluation e = objective.evaluate(x);
    if (!std::isfinite(e.value) || e.gradient.size() != x.size() || !e.gradient.allFinite()) {
      e.value = -std::numeric_limits<double>::infinity();
    }
    return e;
  } catch (const NumericalError&) {
    return {-std::numeric_limits<double>::infinity(), VectorXd()};
  }
}

// Two-loop recursion on the negated problem; returns an ascent direction.
VectorXd lbfgs_direction(const std::deque<Pair>& memory, const VectorXd& grad) {
  VectorXd q = -grad;
  std::vector<double> alpha(memory.size());
  for (std::size_t i = memory.size(); i-- > 0;) {
    alpha[i] = memory[i].rho * memory[i].s.dot(q);
    q -= alpha[i] * memory[i].y;
  }
  if (!memory.empty()) {
    const Pair& last = memory.back();
    q *= last.s.dot(last.y) / last.y.squaredNorm();
  }
  for (std::size_t i = 0; i < memory.size(); ++i) {
    const double beta = memory[i].rho * memory[i].y.dot(q);
    q += memory[i].s * (alpha[i] - beta);
  }
  return -q;
}

}  // namespace

OptimResult maximize(const Objective& objective, const VectorXd& init,
                     const OptimSettings& settings) {
  if (init.size() != objective.n_dims) {
    throw InputError("maximize: init has " + std::to_string(init.size()) + " entries, objective expects " +
                     std::to_string(objective.n_dims));
  }
  if (settings.max_iters < 0 || !(settings.grad_tol > 0) || !(settings.rel_tol > 0) ||
      settings.memory < 1) {
    throw InputError("maximize: settings must be positive");
  }

  OptimResult result;
  VectorXd x = init;
  Evaluation current = safe_evaluate(objective, x);
  result.evaluations = 1;
  if (!std::isfinite(current.value)) {
    throw FitError("maximize: objective is not finite at the initial point");
  }
  result.trace.push_back({0, current.value});

  std::deque<Pair> memory;
  auto finish = [&](bool converged, std::string reason) {
    result.params = x;
    result.value = current.value;
    result.gradient = current.gradient;
    result.converged = converged;
    result.stop_reason = std::move(reason);
    return result;
  };

  if (x.size() == 0 || current.gradient.lpNorm<Eigen::Infinity>() < settings.grad_tol) {
    return finish(true, "gradient tolerance");
  }

  for (int iter = 1; iter <= settings.max_iters; ++iter) {
    VectorXd direction = lbfgs_direction(memory, current.gradient);
    double slope = current.gradient.dot(direction);
    if (!(slope > 0) || !direction.allFinite()) {
      memory.clear();
      direction = current.gradient;
      slope = direction.squaredNorm();
    }
    // Without curvature information take a unit-length first step.
    double step = memory.empty() ? 1.0 / std::max(1.0, direction.norm()) : 1.0;

    Evaluation trial;
    VectorXd x_trial;
    bool accepted = false;
    for (int k = 0; k <= settings.max_backtracks; ++k) {
      x_trial = x + step * direction;
      trial = safe_evaluate(objective, x_trial);
      ++result.evaluations;
      if (std::isfinite(trial.value) &&
          trial.value >= current.value + settings.armijo * step * slope) {
        accepted = true;
        break;
      }
      step *= settings.contraction;
    }
    if (!accepted) {
      if (!memory.empty()) {
        // Retry from steepest ascent before giving up.
        memory.clear();
        --iter;
        continue;
      }
      return finish(false, "line search failed");
    }

    const VectorXd s = x_trial - x;
    const VectorXd y = current.gradient - trial.gradient;  // gradient change of -f
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      memory.push_back({s, y, 1.0 / sy});
      if (static_cast<int>(memory.size()) > settings.memory) memory.pop_front();
    }

    const double previous = current.value;
    x = x_trial;
    current = std::move(trial);
    result.iterations = iter;
    result.trace.push_back({iter, current.value});

    if (current.gradient.lpNorm<Eigen::Infinity>() < settings.grad_tol) {
      return finish(true, "gradient tolerance");
    }
    const double scale = std::max(std::abs(previous), std::abs(current.value));
    if (std::abs(current.value - previous) <= settings.rel_tol * scale) {
      return finish(true, "relative tolerance");
    }
  }
  return finish(false, "iteration limit");
}

double grad_check(const Objective& objective, const VectorXd& point, double step) {
  if (!(step > 0)) throw InputError("grad_check: step must be positive");
  const Evaluation base = objective.evaluate(point);
  double worst = 0.0;
  for (Index i = 0; i < point.size(); ++i) {
    VectorXd plus = point;
    VectorXd minus = point;
    plus[i] += step;
    minus[i] -= step;
    const double fd = (objective.evaluate(plus).value - objective.evaluate(minus).value) / (2.0 * step);
    const double diff = std::abs(base.gradient[i] - fd);
    const double err = std::abs(fd) < 1e-8 ? diff : diff / std::abs(fd);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mnkit
