#pragma once

#include <random>
#include <span>
#include <vector>

#include "marconflow/tape.hpp"
#include "marconflow/tensor.hpp"

namespace marconflow {

/// N(mean, I + scale * factor * factor^T) with factor of shape K x M'.
///
/// All algebra runs through the M' x M' capacitance matrix
/// A = I + scale * factor^T factor, so density evaluation costs O(K M'^2).
struct LowRankGaussian {
  std::vector<double> mean;
  Tensor factor;
  double scale = 1.0;

  std::size_t dim() const { return mean.size(); }
  std::size_t rank() const { return factor.cols(); }
  /// Dense K x K covariance; for audits and tests only.
  Tensor dense_covariance() const;
};

/// mean = h theta_mean, factor = h theta_cov, scale = 1/sqrt(M').
LowRankGaussian build_gaussian(const Tensor& h, const Tensor& theta_mean, const Tensor& theta_cov);

double log_density(const LowRankGaussian& g, std::span<const double> z);

/// Row selection of mean and factor; indices are 0-based, distinct, non-empty.
LowRankGaussian marginalize(const LowRankGaussian& g, const std::vector<std::size_t>& indices);

/// z = mean + eps + sqrt(scale) * factor * xi with eps ~ N(0, I_K), xi ~ N(0, I_M').
std::vector<double> sample(const LowRankGaussian& g, std::mt19937_64& rng);

/// Differentiable log-density on a tape. `factor` may be an invalid Var,
/// meaning a zero factor (identity covariance).
Var gaussian_log_density(Var mean, Var factor, Var z, double scale);

namespace detail {

// Quantities shared by the value path and the gradient path.
struct CapacitanceSolve {
  double logdet = 0.0;            // logdet(I_K + c U U^T) = logdet(A)
  double quadratic = 0.0;         // r^T Sigma^{-1} r
  std::vector<double> precision_residual;  // b = Sigma^{-1} r (K)
  std::vector<double> projected;  // a = A^{-1} U^T r (M')
  std::vector<double> capacitance_inverse;  // A^{-1}, row-major M' x M'
};

CapacitanceSolve solve_capacitance(std::span<const double> residual, const Tensor& factor, double scale,
                                   bool want_inverse);

}  // namespace detail

}  // namespace marconflow
