#pragma once

#include <functional>
#include <vector>

namespace marconflow {

/// Adaptive Gauss-Kronrod (15 point) integral of f over [a, b]. The error
/// budget is rel_tol times the first-pass estimate of the integral of abs(f).
double integrate_1d(const std::function<double(double)>& f, double a, double b, double rel_tol = 1e-10,
                    unsigned max_depth = 20);

/// Same rule over consecutive pieces [cuts[i], cuts[i+1]] sharing one error
/// budget. Cut at every point where f is not smooth.
double integrate_piecewise(const std::function<double(double)>& f, const std::vector<double>& cuts,
                           double rel_tol = 1e-10, unsigned max_depth = 20);

/// Nested adaptive integral over [a0, b0] x [a1, b1].
double integrate_2d(const std::function<double(double, double)>& f, double a0, double b0, double a1, double b1,
                    double rel_tol = 1e-9, unsigned max_depth = 15);

}  // namespace marconflow
