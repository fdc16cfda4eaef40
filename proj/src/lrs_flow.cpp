#include "marconflow/lrs_flow.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "marconflow/errors.hpp"

namespace marconflow {

namespace {

constexpr double kLambdaLow = 0.025;
constexpr double kLambdaSpan = 0.95;

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Forward-mode dual over the eight per-bin inputs:
// x, u_m, u_{m+1}, v_m, v_{m+1}, deriv_m, deriv_{m+1}, lambda_m.
constexpr std::size_t kSeeds = 8;

struct Dual {
  double v = 0.0;
  std::array<double, kSeeds> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constants are convenient here
  static Dual seed(double value, std::size_t i) {
    Dual r(value);
    r.d[i] = 1.0;
    return r;
  }
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r(a.v + b.v);
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r(a.v - b.v);
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r(a.v * b.v);
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r(a.v / b.v);
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) / b.v;
  return r;
}
Dual log(const Dual& a) {
  Dual r(std::log(a.v));
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = a.d[i] / a.v;
  return r;
}
Dual sqrt(const Dual& a) {
  Dual r(std::sqrt(a.v));
  for (std::size_t i = 0; i < kSeeds; ++i) r.d[i] = a.d[i] / (2.0 * r.v);
  return r;
}

double primal(double x) { return x; }
double primal(const Dual& x) { return x.v; }

template <class T>
struct Bin {
  T x, u0, u1, v0, v1, d0, d1, lam;
};

// Shared per-bin quantities, expressed relative to v0 so that the output
// offset y' = y - v0 runs over [0, h].
template <class T>
struct BinShape {
  T w, h, wb, wc, yc;
};

template <class T>
BinShape<T> bin_shape(const Bin<T>& b) {
  using std::log;
  using std::sqrt;
  BinShape<T> s;
  s.w = b.u1 - b.u0;
  s.h = b.v1 - b.v0;
  s.wb = sqrt(b.d0 / b.d1);
  s.wc = (b.lam * b.d0 + (T(1.0) - b.lam) * s.wb * b.d1) / (s.h / s.w);
  s.yc = b.lam * s.wb * s.h / ((T(1.0) - b.lam) + b.lam * s.wb);
  return s;
}

// Output offset and log-derivative at bin coordinate theta.
template <class T>
std::pair<T, T> bin_piece(const Bin<T>& b, const BinShape<T>& s, const T& theta) {
  using std::log;
  if (primal(theta) <= primal(b.lam)) {
    const T den = (b.lam - theta) + s.wc * theta;
    const T y = s.wc * s.yc * theta / den;
    const T ld = log(s.wc * b.lam * s.yc / s.w) - T(2.0) * log(den);
    return {y, ld};
  }
  const T den = s.wc * (T(1.0) - theta) + s.wb * (theta - b.lam);
  const T y = (s.wc * s.yc * (T(1.0) - theta) + s.wb * s.h * (theta - b.lam)) / den;
  const T ld = log(s.wb * s.wc * (T(1.0) - b.lam) * (s.h - s.yc) / s.w) - T(2.0) * log(den);
  return {y, ld};
}

template <class T>
std::pair<T, T> bin_forward(const Bin<T>& b) {
  const auto s = bin_shape(b);
  const T theta = (b.x - b.u0) / s.w;
  auto [y, ld] = bin_piece(b, s, theta);
  return {b.v0 + y, ld};
}

// Here b.x carries the output-side coordinate y.
template <class T>
std::pair<T, T> bin_inverse(const Bin<T>& b) {
  const auto s = bin_shape(b);
  const T y = b.x - b.v0;
  T theta;
  if (primal(y) <= primal(s.yc)) {
    theta = b.lam * y / (s.wc * s.yc - (s.wc - T(1.0)) * y);
  } else {
    theta = ((s.wc - b.lam * s.wb) * y + b.lam * s.wb * s.h - s.wc * s.yc) /
            ((s.wc - s.wb) * y + s.wb * s.h - s.wc * s.yc);
  }
  auto [unused, ld] = bin_piece(b, s, theta);
  (void)unused;
  return {b.u0 + theta * s.w, T(0.0) - ld};
}

std::size_t locate(const std::vector<double>& edges, double x) {
  const auto it = std::upper_bound(edges.begin(), edges.end(), x);
  const auto idx = static_cast<std::ptrdiff_t>(it - edges.begin()) - 1;
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(edges.size()) - 2));
}

Bin<double> bin_at(const SplineKnots& k, std::size_t m, double x) {
  return {x, k.u[m], k.u[m + 1], k.v[m], k.v[m + 1], k.deriv[m], k.deriv[m + 1], k.lambda[m]};
}

// Knots plus what the chain rule back to raw parameters needs.
struct KnotCache {
  SplineKnots knots;
  std::vector<double> width_probs;
  std::vector<double> height_probs;
  std::vector<double> deriv_sigmoid;   // d deriv_m / d raw, for interior m (bins - 1)
  std::vector<double> lambda_sigmoid;  // sigmoid(raw lambda)
};

void softmax(std::span<const double> raw, std::vector<double>& out) {
  const double mx = *std::max_element(raw.begin(), raw.end());
  out.resize(raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) total += (out[i] = std::exp(raw[i] - mx));
  for (auto& p : out) p /= total;
}

std::vector<double> edges_from(const std::vector<double>& probs, const SplineConfig& c) {
  const std::size_t n = probs.size();
  const double spread = 1.0 - c.min_bin_fraction * static_cast<double>(n);
  std::vector<double> edges(n + 1);
  edges[0] = -c.bound;
  double cum = 0.0;
  for (std::size_t i = 1; i < n; ++i) {
    cum += c.min_bin_fraction + spread * probs[i - 1];
    edges[i] = -c.bound + 2.0 * c.bound * cum;
  }
  edges[n] = c.bound;
  return edges;
}

KnotCache build_cache(std::span<const double> raw, const SplineConfig& c) {
  const std::size_t nb = c.bins;
  if (raw.size() != c.raw_size()) {
    throw ContractError("spline raw parameter count " + std::to_string(raw.size()) + ", expected " +
                        std::to_string(c.raw_size()));
  }
  KnotCache kc;
  softmax(raw.subspan(0, nb), kc.width_probs);
  softmax(raw.subspan(nb, nb), kc.height_probs);
  kc.knots.u = edges_from(kc.width_probs, c);
  kc.knots.v = edges_from(kc.height_probs, c);

  // shift makes a zero raw value map to slope exactly 1
  const double shift = std::log(std::expm1(1.0 - c.min_derivative));
  kc.knots.deriv.assign(nb + 1, 1.0);
  kc.deriv_sigmoid.resize(nb - 1);
  for (std::size_t m = 1; m < nb; ++m) {
    const double r = raw[2 * nb + m - 1] + shift;
    kc.knots.deriv[m] = c.min_derivative + stable_softplus(r);
    kc.deriv_sigmoid[m - 1] = stable_sigmoid(r);
  }
  kc.knots.lambda.resize(nb);
  kc.lambda_sigmoid.resize(nb);
  for (std::size_t m = 0; m < nb; ++m) {
    const double sg = stable_sigmoid(raw[3 * nb - 1 + m]);
    kc.lambda_sigmoid[m] = sg;
    kc.knots.lambda[m] = kLambdaLow + kLambdaSpan * sg;
  }
  return kc;
}

// Accumulate d/d raw of an edge (u or v) position j into grad[offset .. offset+bins).
void chain_edge(double g, std::size_t j, const std::vector<double>& probs, const SplineConfig& c, double* grad) {
  const std::size_t n = probs.size();
  if (j == 0 || j == n || g == 0.0) return;
  const double factor = 2.0 * c.bound * (1.0 - c.min_bin_fraction * static_cast<double>(n));
  double below = 0.0;
  for (std::size_t i = 0; i < j; ++i) below += probs[i];
  for (std::size_t i = 0; i < n; ++i) grad[i] += g * factor * probs[i] * ((i < j ? 1.0 : 0.0) - below);
}

}  // namespace

void SplineConfig::validate() const {
  if (bins < 1) throw ContractError("spline needs at least one bin");
  if (!(bound > 0.0)) throw ContractError("spline bound must be positive");
  if (!(min_derivative > 0.0 && min_derivative < 1.0)) throw ContractError("min_derivative must lie in (0, 1)");
  if (!(min_bin_fraction >= 0.0 && min_bin_fraction * static_cast<double>(bins) < 1.0)) {
    throw ContractError("min_bin_fraction too large for the bin count");
  }
}

SplineKnots build_knots(std::span<const double> raw, const SplineConfig& config) {
  return build_cache(raw, config).knots;
}

SplineKnots identity_knots(const SplineConfig& config) {
  std::vector<double> zeros(config.raw_size(), 0.0);
  return build_knots(zeros, config);
}

SplineValue spline_forward(const SplineKnots& k, double x) {
  if (x < k.u.front() || x > k.u.back()) return {x, 0.0};
  auto [y, ld] = bin_forward(bin_at(k, locate(k.u, x), x));
  return {y, ld};
}

SplineValue spline_inverse(const SplineKnots& k, double y) {
  if (y < k.v.front() || y > k.v.back()) return {y, 0.0};
  auto [x, ld] = bin_inverse(bin_at(k, locate(k.v, y), y));
  return {x, ld};
}

SeparableResult separable_transform(const std::vector<SplineKnots>& knots, std::span<const double> z,
                                    Direction direction) {
  if (knots.size() != z.size()) throw ContractError("separable_transform: knot rows and inputs differ in count");
  SeparableResult r;
  r.values.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const auto s = direction == Direction::Forward ? spline_forward(knots[i], z[i]) : spline_inverse(knots[i], z[i]);
    r.values[i] = s.value;
    r.log_jacobian += s.log_deriv;
  }
  return r;
}

Var spline_transform(Var raw, Var input, const SplineConfig& config, Direction direction) {
  Tape& tape = *raw.tape;
  const Tensor& rv = raw.value();
  const Tensor& xv = input.value();
  const std::size_t k = xv.size();
  const std::size_t width = config.raw_size();
  if (rv.rank() != 2 || rv.rows() != k || rv.cols() != width) {
    throw ContractError("spline_transform: raw must be " + std::to_string(k) + "x" + std::to_string(width) +
                        ", got " + shape_string(rv.shape()));
  }

  struct Saved {
    std::vector<KnotCache> caches;
    std::vector<std::size_t> bin;      // bins() marks an identity tail
    std::vector<Dual> value, logd;     // duals over the 8 bin inputs
  };
  auto saved = std::make_shared<Saved>();
  saved->caches.reserve(k);
  saved->bin.resize(k);
  saved->value.resize(k);
  saved->logd.resize(k);

  Tensor out(Shape{2, k});
  for (std::size_t i = 0; i < k; ++i) {
    saved->caches.push_back(build_cache(rv.data().subspan(i * width, width), config));
    const SplineKnots& kn = saved->caches.back().knots;
    const double x = xv[i];
    const auto& edges = direction == Direction::Forward ? kn.u : kn.v;
    if (x < edges.front() || x > edges.back()) {
      saved->bin[i] = config.bins;
      out(0, i) = x;
      out(1, i) = 0.0;
      continue;
    }
    const std::size_t m = locate(edges, x);
    saved->bin[i] = m;
    const Bin<double> b = bin_at(kn, m, x);
    const Bin<Dual> bd{Dual::seed(b.x, 0),  Dual::seed(b.u0, 1), Dual::seed(b.u1, 2), Dual::seed(b.v0, 3),
                       Dual::seed(b.v1, 4), Dual::seed(b.d0, 5), Dual::seed(b.d1, 6), Dual::seed(b.lam, 7)};
    auto [val, ld] = direction == Direction::Forward ? bin_forward(bd) : bin_inverse(bd);
    saved->value[i] = val;
    saved->logd[i] = ld;
    out(0, i) = val.v;
    out(1, i) = ld.v;
  }

  const int ir = raw.id, ix = input.id;
  return tape.record(direction == Direction::Forward ? "spline_forward" : "spline_inverse", std::move(out), {ir, ix},
                     [ir, ix, k, width, config, saved](Tape& t, const Tensor& g) {
                       const bool want_raw = t.requires_grad(ir);
                       const bool want_x = t.requires_grad(ix);
                       Tensor* graw = want_raw ? &t.grad_buffer(ir) : nullptr;
                       Tensor* gx = want_x ? &t.grad_buffer(ix) : nullptr;
                       const std::size_t nb = config.bins;
                       for (std::size_t i = 0; i < k; ++i) {
                         const double gv = g(0, i), gl = g(1, i);
                         const std::size_t m = saved->bin[i];
                         if (m == nb) {
                           if (gx) (*gx)[i] += gv;
                           continue;
                         }
                         std::array<double, kSeeds> dd{};
                         for (std::size_t s = 0; s < kSeeds; ++s)
                           dd[s] = gv * saved->value[i].d[s] + gl * saved->logd[i].d[s];
                         if (gx) (*gx)[i] += dd[0];
                         if (!graw) continue;
                         const KnotCache& kc = saved->caches[i];
                         double* row = &(*graw)[i * width];
                         chain_edge(dd[1], m, kc.width_probs, config, row);
                         chain_edge(dd[2], m + 1, kc.width_probs, config, row);
                         chain_edge(dd[3], m, kc.height_probs, config, row + nb);
                         chain_edge(dd[4], m + 1, kc.height_probs, config, row + nb);
                         if (m >= 1) row[2 * nb + m - 1] += dd[5] * kc.deriv_sigmoid[m - 1];
                         if (m + 1 < nb) row[2 * nb + m] += dd[6] * kc.deriv_sigmoid[m];
                         const double sg = kc.lambda_sigmoid[m];
                         row[3 * nb - 1 + m] += dd[7] * kLambdaSpan * sg * (1.0 - sg);
                       }
                     });
}

}  // namespace marconflow
