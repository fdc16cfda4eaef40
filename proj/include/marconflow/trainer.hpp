#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include <json.hpp>

#include "marconflow/moses_model.hpp"

namespace marconflow {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  std::size_t max_steps = 0;   // 0: no step budget
  std::size_t patience = 10;   // epochs without validation improvement
  std::uint64_t seed = 0;
  double clip_norm = 0.0;      // global gradient norm clip, 0 disables
  std::ostream* progress = nullptr;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Unknown keys raise ValidationError.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;       // cumulative
  double train_njnll = 0.0;    // mean batch loss over the epoch
  double val_njnll = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 0: initial parameters were never beaten
  double best_val_njnll = 0.0;
  double initial_val_njnll = 0.0;
  std::size_t total_steps = 0;
  bool stopped_early = false;
  std::vector<double> step_losses;

  nlohmann::json to_json() const;
  static TrainReport from_json(const nlohmann::json& j);
};

/// (1/|B|) sum_b -(1/K_b) log p(y_b | Q_b, X_b) on a tape. A non-finite
/// value raises NumericalError carrying the instance id.
Var njnll_loss(Tape& tape, const MosesModel& model, const Batch& batch);
double njnll_loss(const MosesModel& model, const Batch& batch);

struct TrainResult {
  MosesModel model;  // parameters of the best validation epoch
  TrainReport report;
};

/// Everything needed to continue a run at an epoch boundary.
struct TrainState {
  MosesModel model;  // current parameters
  MosesModel best;
  Adam optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::size_t since_best = 0;
  TrainReport report;
};

using EpochCallback = std::function<void(const TrainState&)>;

TrainResult train(MosesModel model, const std::vector<TimeSeriesInstance>& train_set,
                  const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Continues from `state` exactly as the uninterrupted run would have.
TrainResult resume_training(TrainState state, const std::vector<TimeSeriesInstance>& train_set,
                            const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config,
                            const EpochCallback& on_epoch = {});

struct GridCandidate {
  ModelConfig config;
  double val_njnll = 0.0;
};

/// Lexicographic order over (D, H, M, F, M', C, bins, bound, variant).
bool config_less(const ModelConfig& a, const ModelConfig& b);

/// Index of the minimal validation njNLL; ties go to the config_less-smallest.
std::size_t select_best(const std::vector<GridCandidate>& candidates);

struct GridResult {
  std::vector<GridCandidate> candidates;
  std::size_t best = 0;
  TrainResult best_run;
};

/// Trains every configuration with the same budget; run i uses a seed
/// derived from config.seed and i.
GridResult grid_select(const std::vector<ModelConfig>& grid, const std::vector<TimeSeriesInstance>& train_set,
                       const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config);

}  // namespace marconflow
