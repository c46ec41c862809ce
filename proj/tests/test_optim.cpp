#include "doctest.h"
#include "oracles.hpp"

#include "mnkit/covmodels.hpp"
#include "mnkit/errors.hpp"
#include "mnkit/optim.hpp"

#include <limits>

using namespace mnkit;

namespace {

Objective bowl(const VectorXd& c) {
  return {c.size(), [c](const VectorXd& x) {
            return Evaluation{-(x - c).squaredNorm(), -2.0 * (x - c)};
          }};
}

}  // namespace

TEST_CASE("quadratic bowl") {
  const VectorXd c = Eigen::Vector2d(1.0, 2.0);
  const OptimResult r = maximize(bowl(c), VectorXd::Zero(2));
  CHECK(r.converged);
  CHECK(r.iterations <= 50);
  CHECK((r.params - c).norm() < 1e-6);
  for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i].value >= r.trace[i - 1].value);
}

TEST_CASE("zero gradient at init stops immediately") {
  const OptimResult r = maximize(bowl(Eigen::Vector2d(0.0, 0.0)), VectorXd::Zero(2));
  CHECK(r.converged);
  CHECK(r.iterations == 0);
}

TEST_CASE("non-finite init is a fit error, wrong length an input error") {
  Objective bad{1, [](const VectorXd&) {
                  return Evaluation{std::numeric_limits<double>::quiet_NaN(), VectorXd::Zero(1)};
                }};
  CHECK_THROWS_AS(maximize(bad, VectorXd::Zero(1)), FitError);
  CHECK_THROWS_AS(maximize(bowl(Eigen::Vector2d(1, 1)), VectorXd::Zero(3)), InputError);
}

TEST_CASE("non-finite values during line search shrink the step") {
  // log(1 - x²) is -inf outside (-1, 1); a unit step from 0.9 overshoots.
  Objective obj{1, [](const VectorXd& x) {
                  const double v = 1.0 - x[0] * x[0];
                  return Evaluation{std::log(v) + 3.0 * x[0], VectorXd::Constant(1, -2.0 * x[0] / v + 3.0)};
                }};
  const OptimResult r = maximize(obj, VectorXd::Constant(1, 0.9));
  CHECK(r.converged);
  CHECK(std::abs(r.params[0]) < 1.0);
  CHECK(std::abs(r.gradient[0]) < 1e-5);
}

TEST_CASE("grad_check sensitivity") {
  const VectorXd c = Eigen::Vector3d(1.0, -2.0, 0.5);
  CHECK(grad_check(bowl(c), Eigen::Vector3d(0.3, 0.1, -0.4), 1e-5) < 1e-9);
  Objective corrupted{3, [c](const VectorXd& x) {
                        Evaluation e{-(x - c).squaredNorm(), -2.0 * (x - c)};
                        e.gradient[1] *= 2.0;
                        return e;
                      }};
  CHECK(grad_check(corrupted, Eigen::Vector3d(0.3, 0.1, -0.4), 1e-5) > 0.5);
}

TEST_CASE("recovers AR(1) parameters by marginal likelihood") {
  std::mt19937_64 rng(42);
  const Index t = 200;
  auto truth = make_cov(CovSpec::simple(CovKind::ar1, t))->with_params(Eigen::Vector2d(0.0, std::atanh(0.6)));
  const MatrixXd y = truth->chol_multiply(oracle::randn(t, 1, rng));
  const CovPtr start = make_cov(CovSpec::simple(CovKind::ar1, t));
  Objective obj{2, [&](const VectorXd& p) {
                  auto m = start->with_params(p);
                  const MatrixXd a = m->solve(y);
                  return Evaluation{-0.5 * m->logdet() - 0.5 * y.col(0).dot(a.col(0)),
                                    -0.5 * m->grad_logdet() + 0.5 * m->grad_quadratic(a, a)};
                }};
  const OptimResult r = maximize(obj, VectorXd::Zero(2));
  CHECK(r.converged);
  CHECK(std::abs(std::tanh(r.params[1]) - 0.6) < 0.1);
  // Identical inputs give identical traces.
  const OptimResult r2 = maximize(obj, VectorXd::Zero(2));
  REQUIRE(r2.trace.size() == r.trace.size());
  for (std::size_t i = 0; i < r.trace.size(); ++i) CHECK(r2.trace[i].value == r.trace[i].value);
}
