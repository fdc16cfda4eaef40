#include "marconflow/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <functional>
#include <numeric>
#include <sstream>

#include "marconflow/errors.hpp"
#include <boost/math/quadrature/gauss.hpp>

#include "marconflow/quadrature.hpp"

namespace marconflow {

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.size() != b.size()) throw ContractError("wasserstein_1d needs equal sample sizes");
  if (a.empty()) throw ContractError("wasserstein_1d needs at least one sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

double crps_sample(std::span<const double> samples, double y) {
  const std::size_t n = samples.size();
  if (n < 2) throw ContractError("crps_sample needs at least two samples");
  std::vector<double> s(samples.begin(), samples.end());
  std::sort(s.begin(), s.end());
  double abs_dev = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    abs_dev += std::abs(s[i] - y);
    // sum over ordered pairs of |s_i - s_j| equals 2 * sum_i s_(i) (2i - n + 1)
    spread += s[i] * (2.0 * static_cast<double>(i) - static_cast<double>(n) + 1.0);
  }
  const double nd = static_cast<double>(n);
  return abs_dev / nd - spread / (nd * (nd - 1.0));
}

double energy_score(const std::vector<std::vector<double>>& samples, std::span<const double> y) {
  const std::size_t n = samples.size();
  if (n < 2) throw ContractError("energy_score needs at least two samples");
  auto dist = [](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return std::sqrt(s);
  };
  double to_y = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i].size() != y.size()) throw ContractError("energy_score: sample dimension mismatch");
    to_y += dist(samples[i], y);
    for (std::size_t j = i + 1; j < n; ++j) pairs += dist(samples[i], samples[j]);
  }
  const double nd = static_cast<double>(n);
  // unordered pair sum counted once, so 2 * pairs / (2 n (n-1))
  return to_y / nd - pairs / (nd * (nd - 1.0));
}

DistributionSampler::DistributionSampler(const PredictiveDistribution& dist) : joint_(dist) {
  for (std::size_t k = 0; k < dist.dim(); ++k) marginals_.push_back(dist.marginal({k}));
}

double DistributionSampler::sample_marginal(std::size_t k, std::mt19937_64& rng) const {
  return marginals_.at(k).sample(rng)[0];
}

InconsistencyResult marginal_inconsistency(const MarginalSampler& sampler, std::size_t n, std::mt19937_64& rng) {
  if (n < 1) throw ContractError("marginal_inconsistency needs n >= 1");
  const std::size_t k = sampler.dim();
  std::vector<std::vector<double>> joint_a(k, std::vector<double>(n)), joint_b(k, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = sampler.sample_joint(rng);
    for (std::size_t j = 0; j < k; ++j) joint_a[j][i] = y[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = sampler.sample_joint(rng);
    for (std::size_t j = 0; j < k; ++j) joint_b[j][i] = y[j];
  }
  InconsistencyResult r;
  r.samples = n;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<double> direct(n);
    for (auto& v : direct) v = sampler.sample_marginal(j, rng);
    const double wd = wasserstein_1d(joint_a[j], direct);
    r.per_variable.push_back(wd);
    r.value += wd / static_cast<double>(k);
    r.noise_floor += wasserstein_1d(joint_a[j], joint_b[j]) / static_cast<double>(k);
  }
  return r;
}

nlohmann::json MetricReport::to_json() const {
  return nlohmann::json{{"metric", metric},       {"value", value},     {"stderr", stderr_},
                        {"count", count},         {"samples", samples}, {"per_instance", per_instance},
                        {"extra", extra}};
}

std::string MetricReport::csv_row(const std::string& dataset, const std::string& model) const {
  std::ostringstream os;
  os << std::setprecision(10) << metric << ',' << dataset << ',' << model << ',' << value << ',' << stderr_ << ','
     << count;
  return os.str();
}

namespace {

void summarize(MetricReport& r, const std::vector<double>& values) {
  r.count = values.size();
  if (values.empty()) return;
  const double n = static_cast<double>(values.size());
  r.value = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.value) * (v - r.value);
    r.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
}

}  // namespace

std::mt19937_64 instance_rng(std::uint64_t seed, std::size_t instance) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(instance), static_cast<std::uint32_t>(instance >> 32)};
  return std::mt19937_64(seq);
}

namespace {

// Runs fn(i) for every instance; outputs land in slot i, so the reduction
// order is fixed regardless of scheduling.
template <class Fn>
auto per_instance(std::size_t n, std::size_t threads, Fn fn) {
  using R = decltype(fn(std::size_t{0}));
  std::vector<R> out(n);
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          out[i] = fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::vector<double> flatten(const std::vector<std::vector<double>>& v) {
  std::vector<double> out;
  for (const auto& x : v) out.insert(out.end(), x.begin(), x.end());
  return out;
}

double average(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

MetricReport njnll(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t threads) {
  MetricReport r;
  r.metric = "njnll";
  r.per_instance = per_instance(instances.size(), threads, [&](std::size_t i) {
    return -log_density(model, instances[i]).log_joint / static_cast<double>(instances[i].n_query());
  });
  summarize(r, r.per_instance);
  return r;
}

MetricReport mnll(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t threads) {
  MetricReport r;
  r.metric = "mnll";
  const auto targets = per_instance(instances.size(), threads, [&](std::size_t i) {
    const auto& inst = instances[i];
    const auto marginals = predict_univariate_marginals(model, inst);
    std::vector<double> v;
    for (std::size_t k = 0; k < marginals.size(); ++k)
      v.push_back(-marginals[k].log_density(std::span<const double>(&inst.answer[k], 1)).log_joint);
    return v;
  });
  for (const auto& t : targets) r.per_instance.push_back(average(t));
  summarize(r, flatten(targets));
  return r;
}

MetricReport mi(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                std::uint64_t seed, std::size_t threads) {
  MetricReport r;
  r.metric = "mi";
  r.samples = n;
  const auto res = per_instance(instances.size(), threads, [&](std::size_t i) {
    auto rng = instance_rng(seed, i);
    const auto dist = condition(model, instances[i]);
    return marginal_inconsistency(DistributionSampler(dist), n, rng);
  });
  double floor = 0.0;
  for (const auto& x : res) {
    r.per_instance.push_back(x.value);
    floor += x.noise_floor;
  }
  summarize(r, r.per_instance);
  r.extra["noise_floor"] = instances.empty() ? 0.0 : floor / static_cast<double>(instances.size());
  return r;
}

MetricReport crps(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                  std::uint64_t seed, std::size_t threads) {
  MetricReport r;
  r.metric = "crps";
  r.samples = n;
  const auto targets = per_instance(instances.size(), threads, [&](std::size_t i) {
    auto rng = instance_rng(seed, i);
    const auto& inst = instances[i];
    const auto dist = condition(model, inst);
    std::vector<std::vector<double>> draws(dist.dim(), std::vector<double>(n));
    for (std::size_t s = 0; s < n; ++s) {
      const auto y = dist.sample(rng);
      for (std::size_t k = 0; k < y.size(); ++k) draws[k][s] = y[k];
    }
    std::vector<double> v;
    for (std::size_t k = 0; k < dist.dim(); ++k) v.push_back(crps_sample(draws[k], inst.answer[k]));
    return v;
  });
  for (const auto& t : targets) r.per_instance.push_back(average(t));
  summarize(r, flatten(targets));
  return r;
}

MetricReport energy(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                    std::uint64_t seed, std::size_t threads) {
  MetricReport r;
  r.metric = "energy";
  r.samples = n;
  r.per_instance = per_instance(instances.size(), threads, [&](std::size_t i) {
    auto rng = instance_rng(seed, i);
    const auto dist = condition(model, instances[i]);
    std::vector<std::vector<double>> draws(n);
    for (auto& d : draws) d = dist.sample(rng);
    return energy_score(draws, instances[i].answer);
  });
  summarize(r, r.per_instance);
  return r;
}

namespace {

using GaussRule = boost::math::quadrature::gauss<double, 7>;

// Per-coordinate view of one component: y -> (z, log dz/dy).
struct Axis {
  const SplineKnots* knots = nullptr;  // null: identity flow
  double mu = 0.0, sd = 1.0;

  SplineValue to_base(double y) const { return knots ? spline_inverse(*knots, y) : SplineValue{y, 0.0}; }
  double from_base(double z) const { return knots ? spline_forward(*knots, z).value : z; }
  // the component's own 1-D shape; only used to steer node placement
  double shape(double y) const {
    const auto s = to_base(y);
    const double u = (s.value - mu) / sd;
    return std::exp(-0.5 * u * u + s.log_deriv) / sd;
  }
};

struct Nodes {
  std::vector<double> y, w, z, logj;
};

// Adaptive composite Gauss-Legendre nodes for one integrated coordinate.
// The initial partition cuts at every knot, at every joint between the two
// rational pieces of a bin, and wherever the base coordinate crosses an
// integer multiple of the base sd, so the integrand is analytic and slowly
// varying on each piece. Pieces are then bisected until the rule agrees
// with its two halves on the component's 1-D shape.
Nodes make_nodes(const Axis& ax, double nsd, double tol) {
  std::vector<double> cuts;
  const double zlo = ax.mu - nsd * ax.sd, zhi = ax.mu + nsd * ax.sd;
  const int steps = static_cast<int>(std::ceil(nsd));
  for (int i = 0; i <= steps; ++i) cuts.push_back(ax.from_base(zlo + (zhi - zlo) * i / steps));
  if (ax.knots) {
    const auto& kn = *ax.knots;
    for (std::size_t b = 0; b < kn.bins(); ++b) {
      cuts.push_back(kn.v[b]);
      cuts.push_back(spline_forward(kn, kn.u[b] + kn.lambda[b] * (kn.u[b + 1] - kn.u[b])).value);
    }
    cuts.push_back(kn.v.back());
  }
  const double lo = ax.from_base(zlo), hi = ax.from_base(zhi);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  cuts.erase(std::remove_if(cuts.begin(), cuts.end(), [&](double c) { return c < lo || c > hi; }), cuts.end());

  auto f = [&](double y) { return ax.shape(y); };
  Nodes out;
  auto emit = [&](double a, double b) {
    const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    const auto& x = GaussRule::abscissa();
    const auto& wt = GaussRule::weights();
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int sgn : {-1, 1}) {
        if (i == 0 && x[0] == 0.0 && sgn == 1) continue;
        const double y = mid + sgn * half * x[i];
        const auto s = ax.to_base(y);
        out.y.push_back(y);
        out.w.push_back(half * wt[i]);
        out.z.push_back(s.value);
        out.logj.push_back(s.log_deriv);
      }
    }
  };
  std::function<void(double, double, double, int)> refine = [&](double a, double b, double whole, int depth) {
    const double m = 0.5 * (a + b);
    const double left = GaussRule::integrate(f, a, m), right = GaussRule::integrate(f, m, b);
    if (depth >= 30 || std::abs(left + right - whole) <= tol) {
      emit(a, b);
      return;
    }
    refine(a, m, left, depth + 1);
    refine(m, b, right, depth + 1);
  };
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i)
    refine(cuts[i], cuts[i + 1], GaussRule::integrate(f, cuts[i], cuts[i + 1]), 0);
  return out;
}

// Dense Gaussian log-density, independent of the low-rank identities.
struct DenseGaussian {
  std::size_t k = 0;
  std::vector<double> mean, precision;
  double norm = 0.0;

  explicit DenseGaussian(const LowRankGaussian& g) : k(g.dim()), mean(g.mean), precision(k * k, 0.0) {
    const Tensor cov = g.dense_covariance();
    std::vector<double> l(k * k, 0.0);
    double logdet = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        double s = cov(i, j);
        for (std::size_t p = 0; p < j; ++p) s -= l[i * k + p] * l[j * k + p];
        if (i == j) {
          l[i * k + i] = std::sqrt(s);
          logdet += 2.0 * std::log(l[i * k + i]);
        } else {
          l[i * k + j] = s / l[j * k + j];
        }
      }
    // columns of L^-T L^-1
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> e(k, 0.0), x(k, 0.0);
      e[c] = 1.0;
      for (std::size_t i = 0; i < k; ++i) {
        double s = e[i];
        for (std::size_t p = 0; p < i; ++p) s -= l[i * k + p] * x[p];
        x[i] = s / l[i * k + i];
      }
      for (std::size_t i = k; i-- > 0;) {
        double s = x[i];
        for (std::size_t p = i + 1; p < k; ++p) s -= l[p * k + i] * x[p];
        x[i] = s / l[i * k + i];
      }
      for (std::size_t i = 0; i < k; ++i) precision[i * k + c] = x[i];
    }
    norm = -0.5 * (static_cast<double>(k) * std::log(2.0 * std::numbers::pi) + logdet);
  }

  double log_density(const double* z) const {
    double q = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double ri = z[i] - mean[i];
      q += precision[i * k + i] * ri * ri;
      for (std::size_t j = 0; j < i; ++j) q += 2.0 * precision[i * k + j] * ri * (z[j] - mean[j]);
    }
    return norm - 0.5 * q;
  }
};

Axis axis_of(const ComponentDistribution& c, std::size_t j) {
  Axis ax;
  if (!c.knots.empty()) ax.knots = &c.knots[j];
  ax.mu = c.base.mean[j];
  double var = 1.0;
  for (std::size_t p = 0; p < c.base.rank(); ++p) var += c.base.scale * c.base.factor(j, p) * c.base.factor(j, p);
  ax.sd = std::sqrt(var);
  return ax;
}

}  // namespace

AuditResult consistency_audit(const PredictiveDistribution& full, std::size_t grid_points) {
  if (grid_points < 2) throw ContractError("audit grid needs at least two points");
  const std::size_t kfull = full.dim();
  const std::size_t nd = full.n_components();
  const auto weights = full.weights();
  AuditResult out;
  for (std::size_t k = 0; k < kfull; ++k) {
    VariableAudit va;
    va.variable = k;
    // the joint that gets integrated, with k in slot 0
    std::vector<std::size_t> vars{k};
    if (kfull <= 3) {
      for (std::size_t j = 0; j < kfull; ++j)
        if (j != k) vars.push_back(j);
    } else {
      vars.push_back((k + 1) % kfull);
    }
    va.integrated.assign(vars.begin() + 1, vars.end());
    const std::size_t kj = vars.size();
    const PredictiveDistribution joint = full.marginal(vars);
    const PredictiveDistribution direct = full.marginal({k});

    // The mixture is integrated component by component, each on nodes
    // placed for that component.
    std::vector<DenseGaussian> dense;
    std::vector<std::vector<Nodes>> nodes(nd);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t d = 0; d < nd; ++d) {
      const auto& comp = joint.component(d);
      dense.emplace_back(comp.base);
      for (std::size_t j = 1; j < kj; ++j) nodes[d].push_back(make_nodes(axis_of(comp, j), 8.0, 1e-8));
      const Axis a0 = axis_of(comp, 0);
      lo = std::min(lo, a0.from_base(a0.mu - 6.0 * a0.sd));
      hi = std::max(hi, a0.from_base(a0.mu + 6.0 * a0.sd));
    }

    // The dense evaluator must reproduce the model's own joint density.
    {
      std::mt19937_64 rng(17);
      std::normal_distribution<double> n01(0.0, 1.0);
      for (int rep = 0; rep < 5; ++rep) {
        std::vector<double> y(kj), z(kj);
        for (auto& v : y) v = 2.0 * n01(rng);
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> terms;
        for (std::size_t d = 0; d < nd; ++d) {
          double lj = 0.0;
          for (std::size_t j = 0; j < kj; ++j) {
            const auto s = axis_of(joint.component(d), j).to_base(y[j]);
            z[j] = s.value;
            lj += s.log_deriv;
          }
          terms.push_back(std::log(weights[d]) + dense[d].log_density(z.data()) + lj);
          mx = std::max(mx, terms.back());
        }
        double acc = 0.0;
        for (double t : terms) acc += std::exp(t - mx);
        const double ours = mx + std::log(acc), model = joint.log_density(y).log_joint;
        if (std::abs(ours - model) > 1e-8 * std::max(1.0, std::abs(model)))
          throw NumericalError("audit: dense evaluator disagrees with the joint density");
      }
    }

    double peak = 0.0;
    for (std::size_t g = 0; g < grid_points; ++g) {
      const double y = lo + (hi - lo) * static_cast<double>(g) / static_cast<double>(grid_points - 1);
      const double pd = std::exp(direct.log_density(std::span<const double>(&y, 1)).log_joint);
      double pq = kj == 1 ? pd : 0.0;
      for (std::size_t d = 0; d < nd && kj > 1; ++d) {
        const auto s0 = axis_of(joint.component(d), 0).to_base(y);
        double z[3] = {s0.value, 0.0, 0.0};
        const auto& na = nodes[d][0];
        double part = 0.0;
        for (std::size_t a = 0; a < na.y.size(); ++a) {
          z[1] = na.z[a];
          if (kj == 2) {
            part += na.w[a] * std::exp(dense[d].log_density(z) + s0.log_deriv + na.logj[a]);
            continue;
          }
          const auto& nb = nodes[d][1];
          double inner = 0.0;
          for (std::size_t b = 0; b < nb.y.size(); ++b) {
            z[2] = nb.z[b];
            inner += nb.w[b] * std::exp(dense[d].log_density(z) + s0.log_deriv + na.logj[a] + nb.logj[b]);
          }
          part += na.w[a] * inner;
        }
        pq += weights[d] * part;
      }
      va.grid.push_back(y);
      va.direct.push_back(pd);
      va.marginalized.push_back(pq);
      peak = std::max(peak, pd);
    }
    for (std::size_t g = 0; g < grid_points; ++g)
      va.max_rel_error = std::max(va.max_rel_error, std::abs(va.direct[g] - va.marginalized[g]) / peak);
    out.max_rel_error = std::max(out.max_rel_error, va.max_rel_error);
    out.variables.push_back(std::move(va));
  }
  return out;
}

}  // namespace marconflow
