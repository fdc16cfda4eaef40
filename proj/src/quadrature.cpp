#include "marconflow/quadrature.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace marconflow {

namespace {

using Kronrod = boost::math::quadrature::gauss_kronrod<double, 15>;
constexpr double kFloor = 1e-14;

double panel(const std::function<double(double)>& f, double a, double b, double* err, double* l1) {
  return Kronrod::integrate(f, a, b, 0, 0.0, err, l1);
}

// Bisection with an absolute budget that halves with the panel width, so
// panels where the integrand is negligible are accepted at once instead of
// being resolved to their own relative precision. The Kronrod error estimate
// bottoms out near rounding level, hence the floor.
double refine(const std::function<double(double)>& f, double a, double b, double est, double err, double budget,
              unsigned depth, double floor) {
  if (err <= std::max(budget, floor) || depth == 0) return est;
  const double m = 0.5 * (a + b);
  double el = 0.0, er = 0.0, l1 = 0.0;
  const double left = panel(f, a, m, &el, &l1);
  const double right = panel(f, m, b, &er, &l1);
  return refine(f, a, m, left, el, 0.5 * budget, depth - 1, floor) +
         refine(f, m, b, right, er, 0.5 * budget, depth - 1, floor);
}

}  // namespace

double integrate_1d(const std::function<double(double)>& f, double a, double b, double rel_tol, unsigned max_depth) {
  if (a == b) return 0.0;
  double err = 0.0, l1 = 0.0;
  const double est = panel(f, a, b, &err, &l1);
  const double budget = rel_tol * std::max(l1, std::abs(est));
  return refine(f, a, b, est, err, budget, max_depth, kFloor * l1);
}

double integrate_piecewise(const std::function<double(double)>& f, const std::vector<double>& cuts, double rel_tol,
                           unsigned max_depth) {
  const std::size_t n = cuts.size() < 2 ? 0 : cuts.size() - 1;
  std::vector<double> est(n), err(n);
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double piece_l1 = 0.0;
    est[i] = panel(f, cuts[i], cuts[i + 1], &err[i], &piece_l1);
    l1 += piece_l1;
  }
  const double span = n ? cuts.back() - cuts.front() : 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double budget = rel_tol * l1 * (cuts[i + 1] - cuts[i]) / span;
    total += refine(f, cuts[i], cuts[i + 1], est[i], err[i], budget, max_depth, kFloor * l1);
  }
  return total;
}

double integrate_2d(const std::function<double(double, double)>& f, double a0, double b0, double a1, double b1,
                    double rel_tol, unsigned max_depth) {
  auto outer = [&](double x) {
    return integrate_1d([&](double y) { return f(x, y); }, a1, b1, rel_tol, max_depth);
  };
  return integrate_1d(outer, a0, b0, rel_tol, max_depth);
}

}  // namespace marconflow
