#include "marconflow/trainer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <set>
#include <tuple>

#include "marconflow/errors.hpp"
#include "marconflow/metrics.hpp"

namespace marconflow {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("learning rate must be positive");
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (patience < 1) throw ContractError("patience must be at least 1");
  if (clip_norm < 0.0) throw ContractError("clip_norm must be non-negative");
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},           {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs},
              {"max_steps", c.max_steps}, {"patience", c.patience},     {"seed", c.seed},
              {"clip_norm", c.clip_norm}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known{"lr", "batch_size", "max_epochs", "max_steps", "patience", "seed",
                                           "clip_norm"};
  if (!j.is_object()) throw ValidationError("training config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError("unknown key '" + key + "' in training config");
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

json TrainReport::to_json() const {
  json ep = json::array();
  for (const auto& e : epochs)
    ep.push_back({{"epoch", e.epoch},
                  {"steps", e.steps},
                  {"train_njnll", e.train_njnll},
                  {"val_njnll", e.val_njnll},
                  {"seconds", e.seconds}});
  return json{{"epochs", ep},
              {"best_epoch", best_epoch},
              {"best_val_njnll", best_val_njnll},
              {"initial_val_njnll", initial_val_njnll},
              {"total_steps", total_steps},
              {"stopped_early", stopped_early},
              {"step_losses", step_losses}};
}

TrainReport TrainReport::from_json(const json& j) {
  TrainReport r;
  try {
    for (const auto& e : j.at("epochs"))
      r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("steps").get<std::size_t>(),
                          e.at("train_njnll").get<double>(), e.at("val_njnll").get<double>(),
                          e.at("seconds").get<double>()});
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.best_val_njnll = j.at("best_val_njnll").get<double>();
    r.initial_val_njnll = j.at("initial_val_njnll").get<double>();
    r.total_steps = j.at("total_steps").get<std::size_t>();
    r.stopped_early = j.at("stopped_early").get<bool>();
    r.step_losses = j.at("step_losses").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad training report: ") + e.what());
  }
  return r;
}

Var njnll_loss(Tape& t, const MosesModel& model, const Batch& batch) {
  if (batch.size() == 0) throw ContractError("njnll_loss needs a nonempty batch");
  Var total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EncoderInput in = encoder_input(batch, b);
    Var term;
    try {
      term = scale(log_joint(t, model, in), -1.0 / static_cast<double>(in.valid_queries()));
    } catch (const NumericalError& e) {
      throw NumericalError("instance " + std::to_string(batch.ids[b]) + ": " + e.what());
    }
    total = total.valid() ? total + term : term;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double njnll_loss(const MosesModel& model, const Batch& batch) {
  Tape t(&model.params, false);
  return njnll_loss(t, model, batch).value()[0];
}

namespace {

double mean_njnll(const MosesModel& model, const std::vector<TimeSeriesInstance>& set) {
  return njnll(model, set).value;
}

void clip(std::map<std::string, Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g.data()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;
  const double f = max_norm / norm;
  for (auto& [_, g] : grads)
    for (auto& x : g.data()) x *= f;
}

}  // namespace

TrainResult train(MosesModel model, const std::vector<TimeSeriesInstance>& train_set,
                  const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (config.max_epochs == 0) return {model, {}};
  if (train_set.empty() || val_set.empty()) throw ContractError("training needs nonempty train and validation sets");
  TrainState state{model, model, Adam(AdamConfig{config.lr}), 0, 0, {}};
  state.report.initial_val_njnll = mean_njnll(model, val_set);
  state.report.best_val_njnll = state.report.initial_val_njnll;
  return resume_training(std::move(state), train_set, val_set, config, on_epoch);
}

TrainResult resume_training(TrainState state, const std::vector<TimeSeriesInstance>& train_set,
                            const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config,
                            const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw ContractError("training needs nonempty train and validation sets");
  auto& rep = state.report;
  auto& model = state.model;
  bool budget_left = !rep.stopped_early;
  for (std::size_t epoch = state.epoch + 1; epoch <= config.max_epochs && budget_left; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    // a fresh shuffle per epoch, reproducible from the seed
    const auto batches = make_batches(train_set, config.batch_size, config.seed * 1000003ULL + epoch, true);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : batches) {
      if (config.max_steps && rep.total_steps >= config.max_steps) {
        budget_left = false;
        break;
      }
      Tape t(&model.params);
      Var loss = njnll_loss(t, model, batch);
      t.backward(loss);
      auto grads = t.parameter_gradients();
      if (config.clip_norm > 0.0) clip(grads, config.clip_norm);
      try {
        state.optimizer.step(model.params, grads);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(rep.total_steps + 1) + ": " + e.what());
      }
      ++rep.total_steps;
      const double l = loss.value()[0];
      rep.step_losses.push_back(l);
      loss_sum += l * static_cast<double>(batch.size());
      seen += batch.size();
    }
    if (seen == 0) break;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = rep.total_steps;
    rec.train_njnll = loss_sum / static_cast<double>(seen);
    rec.val_njnll = mean_njnll(model, val_set);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rep.epochs.push_back(rec);
    state.epoch = epoch;
    if (config.progress) {
      *config.progress << "epoch " << epoch << " train_njnll " << std::setprecision(6) << rec.train_njnll
                       << " val_njnll " << rec.val_njnll << '\n';
    }
    if (rec.val_njnll < rep.best_val_njnll) {
      rep.best_val_njnll = rec.val_njnll;
      rep.best_epoch = epoch;
      state.best = model;
      state.since_best = 0;
    } else if (++state.since_best >= config.patience) {
      rep.stopped_early = true;
      budget_left = false;
    }
    if (on_epoch) on_epoch(state);
  }
  return {std::move(state.best), std::move(rep)};
}

namespace {

auto config_key(const ModelConfig& c) {
  return std::make_tuple(c.components, c.heads, c.latent, c.time_features, c.cov_rank, c.channels, c.spline.bins,
                         c.spline.bound, c.variant.disable_flows, c.variant.identity_covariance,
                         c.variant.uniform_weights, c.variant.single_component);
}

}  // namespace

bool config_less(const ModelConfig& a, const ModelConfig& b) { return config_key(a) < config_key(b); }

std::size_t select_best(const std::vector<GridCandidate>& candidates) {
  if (candidates.empty()) throw ContractError("grid is empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    const auto& b = candidates[best];
    if (c.val_njnll < b.val_njnll || (c.val_njnll == b.val_njnll && config_less(c.config, b.config))) best = i;
  }
  return best;
}

GridResult grid_select(const std::vector<ModelConfig>& grid, const std::vector<TimeSeriesInstance>& train_set,
                       const std::vector<TimeSeriesInstance>& val_set, const TrainConfig& config) {
  if (grid.empty()) throw ContractError("grid is empty");
  GridResult out{{}, 0, {MosesModel{}, {}}};
  std::vector<TrainResult> runs;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    TrainConfig run_cfg = config;
    run_cfg.seed = config.seed * 7919ULL + i + 1;
    auto result = train(make_model(grid[i], run_cfg.seed), train_set, val_set, run_cfg);
    const double score = result.report.epochs.empty() ? mean_njnll(result.model, val_set) : result.report.best_val_njnll;
    out.candidates.push_back({result.model.config, score});
    runs.push_back(std::move(result));
  }
  out.best = select_best(out.candidates);
  out.best_run = std::move(runs[out.best]);
  return out;
}

}  // namespace marconflow
