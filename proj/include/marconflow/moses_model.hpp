#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "marconflow/encoder.hpp"
#include "marconflow/lowrank_gauss.hpp"
#include "marconflow/lrs_flow.hpp"
#include "marconflow/parameters.hpp"
#include "marconflow/series_io.hpp"

namespace marconflow {

/// Ablation switches. single_component forces D = 1 when the model is built.
struct VariantFlags {
  bool disable_flows = false;
  bool identity_covariance = false;
  bool uniform_weights = false;
  bool single_component = false;

  friend bool operator==(const VariantFlags&, const VariantFlags&) = default;
};

struct ModelConfig {
  std::size_t components = 1;     // D
  std::size_t latent = 16;        // M
  std::size_t time_features = 16; // F
  std::size_t cov_rank = 4;       // M'
  std::size_t heads = 2;          // H
  std::size_t channels = 1;       // C
  SplineConfig spline;
  bool allow_empty_context = false;
  VariantFlags variant;

  void validate() const;
  EncoderConfig encoder() const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Unknown keys raise ValidationError.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct MosesModel {
  ModelConfig config;
  ParameterStore params;
};

MosesModel make_model(ModelConfig config, std::uint64_t seed);

struct JointDensityResult {
  double log_joint = 0.0;
  std::vector<double> component_log_density;
  std::vector<double> log_weights;
};

/// One mixture component over the selected query variables. Empty knots
/// means the identity flow.
struct ComponentDistribution {
  LowRankGaussian base;
  std::vector<SplineKnots> knots;
};

/// Mixture of separable flows over a fixed set of query variables.
class PredictiveDistribution {
 public:
  PredictiveDistribution(std::vector<double> log_weights, std::vector<ComponentDistribution> components);

  std::size_t dim() const { return components_.front().base.dim(); }
  std::size_t n_components() const { return components_.size(); }
  const std::vector<double>& log_weights() const { return log_weights_; }
  std::vector<double> weights() const;
  const ComponentDistribution& component(std::size_t d) const { return components_.at(d); }

  JointDensityResult log_density(std::span<const double> y) const;
  /// Variables listed in `indices` (0-based), in that order.
  PredictiveDistribution marginal(const std::vector<std::size_t>& indices) const;
  std::vector<double> sample(std::mt19937_64& rng, std::size_t* component = nullptr) const;

 private:
  std::vector<double> log_weights_;
  std::vector<ComponentDistribution> components_;
};

/// Encode the context and queries once; rows of masked query slots are dropped.
PredictiveDistribution condition(const MosesModel& model, const EncoderInput& input);
PredictiveDistribution condition(const MosesModel& model, const TimeSeriesInstance& inst);

JointDensityResult log_density(const MosesModel& model, const TimeSeriesInstance& inst);
/// indices are 0-based positions in the query list.
JointDensityResult marginal_log_density(const MosesModel& model, const TimeSeriesInstance& inst,
                                        const std::vector<std::size_t>& indices);
std::vector<double> sample(const MosesModel& model, const TimeSeriesInstance& inst, std::mt19937_64& rng);
/// One univariate distribution per query, each equal to marginal({k}).
std::vector<PredictiveDistribution> predict_univariate_marginals(const MosesModel& model,
                                                                 const TimeSeriesInstance& inst);

/// Differentiable log p(y | Q, X) on a tape; input.answer supplies y.
Var log_joint(Tape& tape, const MosesModel& model, const EncoderInput& input);

/// Checkpoint directory: manifest.json, params.bin and, when given, optimizer.bin.
struct CheckpointState {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const MosesModel& model, const CheckpointState& state,
                     const Adam* optimizer = nullptr);
MosesModel load_checkpoint(const std::filesystem::path& dir, CheckpointState* state = nullptr,
                           Adam* optimizer = nullptr);

}  // namespace marconflow
