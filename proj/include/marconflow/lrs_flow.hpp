#pragma once

#include <span>
#include <vector>

#include "marconflow/tape.hpp"
#include "marconflow/tensor.hpp"

namespace marconflow {

struct SplineConfig {
  std::size_t bins = 8;
  double bound = 5.0;
  double min_derivative = 1e-3;
  double min_bin_fraction = 1e-3;

  /// widths (bins) + heights (bins) + interior derivatives (bins - 1) + lambdas (bins).
  std::size_t raw_size() const { return 4 * bins - 1; }
  void validate() const;
};

/// Monotone knot set of one linear rational spline on [-bound, bound].
struct SplineKnots {
  std::vector<double> u;       // bins + 1, strictly increasing, u[0] = -bound, u[bins] = bound
  std::vector<double> v;       // same for the outputs
  std::vector<double> deriv;   // bins + 1, boundary entries are 1
  std::vector<double> lambda;  // bins, in [0.025, 0.975]

  std::size_t bins() const { return lambda.size(); }
  double bound() const { return u.back(); }
};

SplineKnots build_knots(std::span<const double> raw, const SplineConfig& config);
SplineKnots identity_knots(const SplineConfig& config);

struct SplineValue {
  double value;
  double log_deriv;  // log |d out / d in|
};

SplineValue spline_forward(const SplineKnots& knots, double x);
SplineValue spline_inverse(const SplineKnots& knots, double y);

enum class Direction { Forward, Inverse };

struct SeparableResult {
  std::vector<double> values;
  double log_jacobian = 0.0;
};

/// Coordinatewise spline; row k of `knots` acts on z[k] only.
SeparableResult separable_transform(const std::vector<SplineKnots>& knots, std::span<const double> z,
                                    Direction direction);

/// Differentiable per-variable spline. raw is K x raw_size, input has K entries.
/// Output is 2 x K: row 0 the transformed values, row 1 the log-derivatives.
Var spline_transform(Var raw, Var input, const SplineConfig& config, Direction direction);

}  // namespace marconflow
