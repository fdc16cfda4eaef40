#include "marconflow/lowrank_gauss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>

#include "marconflow/errors.hpp"

namespace marconflow {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// In-place lower Cholesky of a symmetric n x n matrix.
void cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) throw NumericalError("capacitance matrix is not positive definite");
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0.0;
  }
}

// Solve L L^T x = b in place.
void cholesky_solve(const std::vector<double>& l, std::size_t n, std::vector<double>& b) {
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
    b[i] = s / l[i * n + i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * b[k];
    b[i] = s / l[i * n + i];
  }
}

}  // namespace

namespace detail {

CapacitanceSolve solve_capacitance(std::span<const double> residual, const Tensor& factor, double scale,
                                   bool want_inverse) {
  const std::size_t k = residual.size();
  const std::size_t m = factor.cols();
  if (factor.rows() != k) throw ContractError("factor rows do not match dimension");

  // A = I + c U^T U ; s = U^T r
  std::vector<double> cap(m * m, 0.0);
  std::vector<double> s(m, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const double* row = factor.data().data() + i * m;
    for (std::size_t p = 0; p < m; ++p) {
      s[p] += row[p] * residual[i];
      for (std::size_t q = 0; q <= p; ++q) cap[p * m + q] += row[p] * row[q];
    }
  }
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = 0; q <= p; ++q) {
      cap[p * m + q] *= scale;
      cap[q * m + p] = cap[p * m + q];
    }
    cap[p * m + p] += 1.0;
  }
  cholesky(cap, m);

  CapacitanceSolve out;
  for (std::size_t p = 0; p < m; ++p) out.logdet += 2.0 * std::log(cap[p * m + p]);

  out.projected = s;
  cholesky_solve(cap, m, out.projected);

  // b = r - c U a ;  r^T Sigma^{-1} r = r^T r - c s^T a
  out.precision_residual.assign(residual.begin(), residual.end());
  double rr = 0.0;
  for (std::size_t i = 0; i < k; ++i) rr += residual[i] * residual[i];
  double sa = 0.0;
  for (std::size_t p = 0; p < m; ++p) sa += s[p] * out.projected[p];
  out.quadratic = rr - scale * sa;
  for (std::size_t i = 0; i < k; ++i) {
    double ua = 0.0;
    for (std::size_t p = 0; p < m; ++p) ua += factor[i * m + p] * out.projected[p];
    out.precision_residual[i] -= scale * ua;
  }

  if (want_inverse) {
    out.capacitance_inverse.assign(m * m, 0.0);
    std::vector<double> col(m);
    for (std::size_t q = 0; q < m; ++q) {
      std::fill(col.begin(), col.end(), 0.0);
      col[q] = 1.0;
      cholesky_solve(cap, m, col);
      for (std::size_t p = 0; p < m; ++p) out.capacitance_inverse[p * m + q] = col[p];
    }
  }
  return out;
}

}  // namespace detail

Tensor LowRankGaussian::dense_covariance() const {
  const std::size_t k = dim();
  const std::size_t m = rank();
  Tensor cov(Shape{k, k}, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < m; ++p) s += factor[i * m + p] * factor[j * m + p];
      cov(i, j) = scale * s + (i == j ? 1.0 : 0.0);
    }
  return cov;
}

LowRankGaussian build_gaussian(const Tensor& h, const Tensor& theta_mean, const Tensor& theta_cov) {
  if (h.rank() != 2 || theta_mean.rank() != 2 || theta_cov.rank() != 2 || theta_mean.rows() != h.cols() ||
      theta_mean.cols() != 1 || theta_cov.rows() != h.cols() || theta_cov.cols() < 1) {
    throw ContractError("build_gaussian: incompatible shapes " + shape_string(h.shape()) + ", " +
                        shape_string(theta_mean.shape()) + ", " + shape_string(theta_cov.shape()));
  }
  const std::size_t k = h.rows(), width = h.cols(), m = theta_cov.cols();
  LowRankGaussian g;
  g.mean.assign(k, 0.0);
  g.factor = Tensor(Shape{k, m}, 0.0);
  g.scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const double hij = h(i, j);
      g.mean[i] += hij * theta_mean(j, 0);
      for (std::size_t p = 0; p < m; ++p) g.factor(i, p) += hij * theta_cov(j, p);
    }
  }
  return g;
}

double log_density(const LowRankGaussian& g, std::span<const double> z) {
  if (z.size() != g.dim()) throw ContractError("log_density: point dimension does not match the Gaussian");
  std::vector<double> r(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) r[i] = z[i] - g.mean[i];
  const auto solve = detail::solve_capacitance(r, g.factor, g.scale, false);
  return -0.5 * (static_cast<double>(z.size()) * kLog2Pi + solve.logdet + solve.quadratic);
}

LowRankGaussian marginalize(const LowRankGaussian& g, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("marginalize: empty index set");
  if (std::set<std::size_t>(indices.begin(), indices.end()).size() != indices.size()) {
    throw ContractError("marginalize: duplicate index");
  }
  const std::size_t m = g.rank();
  LowRankGaussian out;
  out.scale = g.scale;
  out.factor = Tensor(Shape{indices.size(), m});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= g.dim()) throw ContractError("marginalize: index out of range");
    out.mean.push_back(g.mean[indices[i]]);
    for (std::size_t p = 0; p < m; ++p) out.factor(i, p) = g.factor(indices[i], p);
  }
  return out;
}

std::vector<double> sample(const LowRankGaussian& g, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  const std::size_t k = g.dim(), m = g.rank();
  std::vector<double> xi(m);
  for (auto& v : xi) v = normal(rng);
  const double root = std::sqrt(g.scale);
  std::vector<double> z(k);
  for (std::size_t i = 0; i < k; ++i) {
    double ux = 0.0;
    for (std::size_t p = 0; p < m; ++p) ux += g.factor(i, p) * xi[p];
    z[i] = g.mean[i] + normal(rng) + root * ux;
  }
  return z;
}

Var gaussian_log_density(Var mean, Var factor, Var z, double scale) {
  Tape& tape = *mean.tape;
  const Tensor& mu = mean.value();
  const Tensor& zv = z.value();
  const std::size_t k = mu.size();
  if (zv.size() != k) throw ContractError("gaussian_log_density: mean and point sizes differ");
  const bool has_factor = factor.valid();
  Tensor u = has_factor ? factor.value() : Tensor(Shape{k, 1}, 0.0);
  if (u.rank() != 2 || u.rows() != k) throw ContractError("gaussian_log_density: factor must be K x M'");

  std::vector<double> r(k);
  for (std::size_t i = 0; i < k; ++i) r[i] = zv[i] - mu[i];
  auto solve = std::make_shared<detail::CapacitanceSolve>(detail::solve_capacitance(r, u, scale, has_factor));
  const double value = -0.5 * (static_cast<double>(k) * kLog2Pi + solve->logdet + solve->quadratic);

  std::vector<int> inputs{mean.id, z.id};
  if (has_factor) inputs.push_back(factor.id);
  const int im = mean.id, iz = z.id, iu = has_factor ? factor.id : -1;
  return tape.record("gaussian_log_density", Tensor::scalar(value), inputs,
                     [im, iz, iu, k, scale, solve](Tape& t, const Tensor& g) {
                       const auto& b = solve->precision_residual;
                       if (t.requires_grad(im)) {
                         Tensor& gm = t.grad_buffer(im);
                         for (std::size_t i = 0; i < k; ++i) gm[i] += g[0] * b[i];
                       }
                       if (t.requires_grad(iz)) {
                         Tensor& gz = t.grad_buffer(iz);
                         for (std::size_t i = 0; i < k; ++i) gz[i] -= g[0] * b[i];
                       }
                       if (iu >= 0 && t.requires_grad(iu)) {
                         // d/dU = c (b a^T - U A^{-1})
                         const Tensor& uv = t.value(iu);
                         const std::size_t m = uv.cols();
                         const auto& a = solve->projected;
                         const auto& ainv = solve->capacitance_inverse;
                         Tensor& gu = t.grad_buffer(iu);
                         for (std::size_t i = 0; i < k; ++i)
                           for (std::size_t q = 0; q < m; ++q) {
                             double ua = 0.0;
                             for (std::size_t p = 0; p < m; ++p) ua += uv[i * m + p] * ainv[p * m + q];
                             gu[i * m + q] += g[0] * scale * (b[i] * a[q] - ua);
                           }
                       }
                     });
}

}  // namespace marconflow
