#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "marconflow/moses_model.hpp"

namespace marconflow {

/// Empirical 2-Wasserstein distance between equal-size samples on the line.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// mean|s - y| - (1 / (2 n (n-1))) sum_{i != j} |s_i - s_j|
double crps_sample(std::span<const double> samples, double y);

/// Energy score with p = 1; samples is n x K.
double energy_score(const std::vector<std::vector<double>>& samples, std::span<const double> y);

/// Something that can draw joint vectors and directly predicted marginals.
class MarginalSampler {
 public:
  virtual ~MarginalSampler() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<double> sample_joint(std::mt19937_64& rng) const = 0;
  virtual double sample_marginal(std::size_t k, std::mt19937_64& rng) const = 0;
};

class DistributionSampler : public MarginalSampler {
 public:
  explicit DistributionSampler(const PredictiveDistribution& dist);
  std::size_t dim() const override { return joint_.dim(); }
  std::vector<double> sample_joint(std::mt19937_64& rng) const override { return joint_.sample(rng); }
  double sample_marginal(std::size_t k, std::mt19937_64& rng) const override;

 private:
  const PredictiveDistribution& joint_;
  std::vector<PredictiveDistribution> marginals_;
};

struct InconsistencyResult {
  double value = 0.0;        // mean over variables of WD(joint coordinate, direct marginal)
  double noise_floor = 0.0;  // same statistic between two independent joint sample sets
  std::vector<double> per_variable;
  std::size_t samples = 0;
};

InconsistencyResult marginal_inconsistency(const MarginalSampler& sampler, std::size_t n, std::mt19937_64& rng);

struct MetricReport {
  std::string metric;
  double value = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;    // instances or targets averaged
  std::size_t samples = 0;  // Monte-Carlo draws per instance, 0 if exact
  std::vector<double> per_instance;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  /// metric,dataset,model,value,stderr,n
  std::string csv_row(const std::string& dataset, const std::string& model) const;
};

// Instances may be spread over `threads` workers. Sample-based metrics draw
// instance i from its own stream seeded by (seed, i), so results do not
// depend on the thread count.
MetricReport njnll(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances,
                   std::size_t threads = 1);
MetricReport mnll(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances,
                  std::size_t threads = 1);
MetricReport mi(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                std::uint64_t seed, std::size_t threads = 1);
MetricReport crps(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                  std::uint64_t seed, std::size_t threads = 1);
MetricReport energy(const MosesModel& model, const std::vector<TimeSeriesInstance>& instances, std::size_t n,
                    std::uint64_t seed, std::size_t threads = 1);

std::mt19937_64 instance_rng(std::uint64_t seed, std::size_t instance);

/// Direct marginal density of one variable against the joint density
/// integrated numerically over the remaining variables.
struct VariableAudit {
  std::size_t variable = 0;
  std::vector<std::size_t> integrated;  // variables integrated out
  std::vector<double> grid, direct, marginalized;
  double max_rel_error = 0.0;           // max |direct - marginalized| / max direct
};

struct AuditResult {
  std::vector<VariableAudit> variables;
  double max_rel_error = 0.0;
};

/// K <= 3 integrates the full joint; larger K integrates the pair (k, k+1 mod K).
AuditResult consistency_audit(const PredictiveDistribution& dist, std::size_t grid_points = 41);

}  // namespace marconflow
