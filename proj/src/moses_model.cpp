#include "marconflow/moses_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>
#include <limits>
#include <set>
#include <sstream>

#include "marconflow/errors.hpp"

namespace marconflow {

using nlohmann::json;

void ModelConfig::validate() const {
  if (components < 1) throw ContractError("components must be at least 1");
  if (cov_rank < 1) throw ContractError("cov_rank must be at least 1");
  if (variant.single_component && components != 1) throw ContractError("single_component requires components = 1");
  encoder().validate();
  spline.validate();
}

EncoderConfig ModelConfig::encoder() const {
  EncoderConfig e;
  e.latent = latent;
  e.time_features = time_features;
  e.heads = heads;
  e.components = components;
  e.channels = channels;
  e.null_token = allow_empty_context;
  e.mixer = !variant.uniform_weights;
  return e;
}

json to_json(const ModelConfig& c) {
  return json{{"components", c.components},
              {"latent", c.latent},
              {"time_features", c.time_features},
              {"cov_rank", c.cov_rank},
              {"heads", c.heads},
              {"channels", c.channels},
              {"spline_bins", c.spline.bins},
              {"spline_bound", c.spline.bound},
              {"min_derivative", c.spline.min_derivative},
              {"min_bin_fraction", c.spline.min_bin_fraction},
              {"allow_empty_context", c.allow_empty_context},
              {"variant",
               {{"disable_flows", c.variant.disable_flows},
                {"identity_covariance", c.variant.identity_covariance},
                {"uniform_weights", c.variant.uniform_weights},
                {"single_component", c.variant.single_component}}}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, unused] : j.items())
    if (!known.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
}

template <class T>
void read_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("bad value for '") + key + "'");
  }
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"components", "latent", "time_features", "cov_rank", "heads", "channels", "spline_bins",
                  "spline_bound", "min_derivative", "min_bin_fraction", "allow_empty_context", "variant"},
                 "model config");
  ModelConfig c;
  read_if(j, "components", c.components);
  read_if(j, "latent", c.latent);
  read_if(j, "time_features", c.time_features);
  read_if(j, "cov_rank", c.cov_rank);
  read_if(j, "heads", c.heads);
  read_if(j, "channels", c.channels);
  read_if(j, "spline_bins", c.spline.bins);
  read_if(j, "spline_bound", c.spline.bound);
  read_if(j, "min_derivative", c.spline.min_derivative);
  read_if(j, "min_bin_fraction", c.spline.min_bin_fraction);
  read_if(j, "allow_empty_context", c.allow_empty_context);
  if (j.contains("variant")) {
    const json& v = j.at("variant");
    reject_unknown(v, {"disable_flows", "identity_covariance", "uniform_weights", "single_component"}, "variant");
    read_if(v, "disable_flows", c.variant.disable_flows);
    read_if(v, "identity_covariance", c.variant.identity_covariance);
    read_if(v, "uniform_weights", c.variant.uniform_weights);
    read_if(v, "single_component", c.variant.single_component);
  }
  return c;
}

MosesModel make_model(ModelConfig config, std::uint64_t seed) {
  if (config.variant.single_component) config.components = 1;
  config.validate();
  MosesModel model;
  model.config = config;
  std::mt19937_64 rng(seed);
  init_encoder_params(model.params, config.encoder(), rng);
  std::normal_distribution<double> head(0.0, 0.1);
  Tensor mean(Shape{config.latent, 1});
  for (auto& v : mean.data()) v = head(rng);
  model.params.add("gauss.mean", mean);
  if (!config.variant.identity_covariance) {
    Tensor cov(Shape{config.latent, config.cov_rank});
    for (auto& v : cov.data()) v = head(rng);
    model.params.add("gauss.cov", cov);
  }
  if (!config.variant.disable_flows) {
    // zero head: every spline starts as the identity
    model.params.add("flow.w", Tensor(Shape{config.latent, config.spline.raw_size()}, 0.0));
    model.params.add("flow.b", Tensor(Shape{config.spline.raw_size()}, 0.0));
  }
  return model;
}

PredictiveDistribution::PredictiveDistribution(std::vector<double> log_weights,
                                               std::vector<ComponentDistribution> components)
    : log_weights_(std::move(log_weights)), components_(std::move(components)) {
  if (components_.empty() || components_.size() != log_weights_.size()) {
    throw ContractError("mixture needs one log-weight per component");
  }
}

std::vector<double> PredictiveDistribution::weights() const {
  std::vector<double> w(log_weights_.size());
  for (std::size_t d = 0; d < w.size(); ++d) w[d] = std::exp(log_weights_[d]);
  return w;
}

JointDensityResult PredictiveDistribution::log_density(std::span<const double> y) const {
  if (y.size() != dim()) {
    throw ContractError("log_density: " + std::to_string(y.size()) + " values for " + std::to_string(dim()) +
                        " variables");
  }
  JointDensityResult r;
  r.log_weights = log_weights_;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t d = 0; d < components_.size(); ++d) {
    const auto& c = components_[d];
    double lp;
    if (c.knots.empty()) {
      lp = marconflow::log_density(c.base, y);
    } else {
      std::vector<double> z(y.size());
      double ld = 0.0;
      for (std::size_t k = 0; k < y.size(); ++k) {
        const auto s = spline_inverse(c.knots[k], y[k]);
        if (!std::isfinite(s.value) || !std::isfinite(s.log_deriv)) {
          throw NumericalError("non-finite flow output in component " + std::to_string(d) + ", variable " +
                               std::to_string(k));
        }
        z[k] = s.value;
        ld += s.log_deriv;
      }
      lp = marconflow::log_density(c.base, z) + ld;
    }
    if (!std::isfinite(lp)) throw NumericalError("non-finite log-density in component " + std::to_string(d));
    r.component_log_density.push_back(lp);
    mx = std::max(mx, lp + log_weights_[d]);
  }
  double s = 0.0;
  for (std::size_t d = 0; d < components_.size(); ++d) s += std::exp(r.component_log_density[d] + log_weights_[d] - mx);
  r.log_joint = mx + std::log(s);
  return r;
}

PredictiveDistribution PredictiveDistribution::marginal(const std::vector<std::size_t>& indices) const {
  std::vector<ComponentDistribution> comps;
  comps.reserve(components_.size());
  for (const auto& c : components_) {
    ComponentDistribution m;
    m.base = marginalize(c.base, indices);
    if (!c.knots.empty())
      for (auto i : indices) m.knots.push_back(c.knots[i]);
    comps.push_back(std::move(m));
  }
  return PredictiveDistribution(log_weights_, std::move(comps));
}

std::vector<double> PredictiveDistribution::sample(std::mt19937_64& rng, std::size_t* component) const {
  // inverse CDF over the cumulative weights with one uniform draw
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  std::size_t d = 0;
  double cum = 0.0;
  for (; d + 1 < components_.size(); ++d) {
    cum += std::exp(log_weights_[d]);
    if (u < cum) break;
  }
  if (component) *component = d;
  const auto& c = components_[d];
  auto z = marconflow::sample(c.base, rng);
  if (!c.knots.empty())
    for (std::size_t k = 0; k < z.size(); ++k) z[k] = spline_forward(c.knots[k], z[k]).value;
  return z;
}

namespace {

struct ComponentVars {
  Var mean, factor, raw;
};

// Shared graph pieces for one component on a tape.
ComponentVars component_vars(Tape& t, const MosesModel& model, Var codes) {
  const auto& c = model.config;
  ComponentVars v;
  v.mean = matmul(codes, t.param("gauss.mean"));
  if (!c.variant.identity_covariance) v.factor = matmul(codes, t.param("gauss.cov"));
  if (!c.variant.disable_flows) v.raw = matmul(codes, t.param("flow.w")) + t.param("flow.b");
  return v;
}

Var selected_queries(const LatentVars& lv, const EncoderInput& in) {
  const auto rows = in.valid_query_rows();
  if (rows.size() == in.query_mask.size()) return lv.h_query;
  return gather(lv.h_query, 0, rows);
}

Var log_weights(Tape& t, const MosesModel& model, const LatentVars& lv) {
  const std::size_t nd = model.config.components;
  if (!lv.weight_logits.valid()) return t.constant(Tensor(Shape{nd}, -std::log(static_cast<double>(nd))));
  return lv.weight_logits - logsumexp(lv.weight_logits);
}

}  // namespace

namespace {

// Evaluation runs on a canonical ordering of the context (and, for joint
// densities, of the query/answer pairs) so the result is bitwise invariant
// to how the caller ordered the sets; otherwise reordered floating-point
// sums drift by a few ulps, amplified by steep splines.
TimeSeriesInstance canonical(TimeSeriesInstance inst, bool queries) {
  std::sort(inst.context.begin(), inst.context.end(), [](const Observation& a, const Observation& b) {
    return std::tie(a.t, a.channel, a.value) < std::tie(b.t, b.channel, b.value);
  });
  if (queries && inst.answer.size() == inst.query.size()) {
    std::vector<std::size_t> idx(inst.query.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
      const auto &a = inst.query[i], &b = inst.query[j];
      return std::tie(a.t, a.channel, inst.answer[i]) < std::tie(b.t, b.channel, inst.answer[j]);
    });
    auto q = inst.query;
    auto y = inst.answer;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      inst.query[k] = q[idx[k]];
      inst.answer[k] = y[idx[k]];
    }
  }
  return inst;
}

// Same for padded inputs: valid rows sorted, masked rows after them.
EncoderInput canonical(const EncoderInput& in, bool queries) {
  auto order = [](const Tensor& rows, const std::vector<std::uint8_t>& mask, std::size_t stride,
                  const std::vector<double>* extra) {
    std::vector<std::size_t> idx(mask.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
      if (mask[i] != mask[j]) return mask[i] > mask[j];
      if (!mask[i]) return false;
      for (std::size_t c = 0; c < stride; ++c)
        if (rows[i * stride + c] != rows[j * stride + c]) return rows[i * stride + c] < rows[j * stride + c];
      return extra && (*extra)[i] < (*extra)[j];
    });
    return idx;
  };
  EncoderInput out = in;
  const auto ci = order(in.context, in.context_mask, 3, nullptr);
  for (std::size_t r = 0; r < ci.size(); ++r) {
    for (std::size_t c = 0; c < 3; ++c) out.context[r * 3 + c] = in.context[ci[r] * 3 + c];
    out.context_mask[r] = in.context_mask[ci[r]];
  }
  if (!queries) return out;
  const bool answers = in.answer.size() == in.query_mask.size();
  const auto qi = order(in.query, in.query_mask, 2, answers ? &in.answer : nullptr);
  for (std::size_t r = 0; r < qi.size(); ++r) {
    for (std::size_t c = 0; c < 2; ++c) out.query[r * 2 + c] = in.query[qi[r] * 2 + c];
    out.query_mask[r] = in.query_mask[qi[r]];
    if (answers) out.answer[r] = in.answer[qi[r]];
  }
  return out;
}

}  // namespace

PredictiveDistribution condition(const MosesModel& model, const EncoderInput& raw_input) {
  const EncoderInput input = canonical(raw_input, false);
  const auto& c = model.config;
  Tape t(&model.params, false);
  const LatentVars lv = encode(t, c.encoder(), input);
  Var h = selected_queries(lv, input);
  const Tensor lw = log_weights(t, model, lv).value();
  const std::size_t k = h.value().rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.cov_rank));
  std::vector<ComponentDistribution> comps;
  for (std::size_t d = 0; d < c.components; ++d) {
    const ComponentVars v = component_vars(t, model, component_codes(h, d, c.latent));
    ComponentDistribution comp;
    comp.base.mean = v.mean.value().values();
    comp.base.factor = v.factor.valid() ? v.factor.value() : Tensor(Shape{k, c.cov_rank}, 0.0);
    comp.base.scale = scale;
    if (v.raw.valid()) {
      const Tensor& raw = v.raw.value();
      const std::size_t width = c.spline.raw_size();
      for (std::size_t i = 0; i < k; ++i) comp.knots.push_back(build_knots(raw.data().subspan(i * width, width), c.spline));
    }
    comps.push_back(std::move(comp));
  }
  return PredictiveDistribution(lw.values(), std::move(comps));
}

PredictiveDistribution condition(const MosesModel& model, const TimeSeriesInstance& inst) {
  return condition(model, encoder_input(inst));
}

JointDensityResult log_density(const MosesModel& model, const TimeSeriesInstance& inst) {
  if (inst.answer.size() != inst.query.size() || inst.query.empty()) {
    throw ContractError("log_density needs one answer per query and K >= 1");
  }
  const auto c = canonical(inst, true);
  return condition(model, c).log_density(c.answer);
}

JointDensityResult marginal_log_density(const MosesModel& model, const TimeSeriesInstance& inst,
                                        const std::vector<std::size_t>& indices) {
  if (inst.answer.size() != inst.query.size()) throw ContractError("marginal_log_density needs answers");
  std::vector<double> y;
  for (auto i : indices) y.push_back(inst.answer.at(i));
  return condition(model, inst).marginal(indices).log_density(y);
}

std::vector<double> sample(const MosesModel& model, const TimeSeriesInstance& inst, std::mt19937_64& rng) {
  return condition(model, inst).sample(rng);
}

std::vector<PredictiveDistribution> predict_univariate_marginals(const MosesModel& model,
                                                                 const TimeSeriesInstance& inst) {
  const auto dist = condition(model, inst);
  std::vector<PredictiveDistribution> out;
  for (std::size_t k = 0; k < dist.dim(); ++k) out.push_back(dist.marginal({k}));
  return out;
}

Var log_joint(Tape& t, const MosesModel& model, const EncoderInput& raw_input) {
  const EncoderInput input = canonical(raw_input, true);
  const auto& c = model.config;
  const LatentVars lv = encode(t, c.encoder(), input);
  Var h = selected_queries(lv, input);
  std::vector<double> y;
  const auto rows = input.valid_query_rows();
  if (input.answer.size() != input.query_mask.size()) throw ContractError("log_joint needs answers for every query slot");
  for (auto r : rows) y.push_back(input.answer[r]);
  const std::size_t k = y.size();
  Var yv = t.constant(Tensor::vector(y));
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.cov_rank));

  std::vector<Var> per_component;
  for (std::size_t d = 0; d < c.components; ++d) {
    const ComponentVars v = component_vars(t, model, component_codes(h, d, c.latent));
    Var z = yv;
    Var logdet;
    if (v.raw.valid()) {
      Var inv = spline_transform(v.raw, yv, c.spline, Direction::Inverse);
      z = reshape(gather(inv, 0, {0}), {k});
      logdet = sum(gather(inv, 0, {1}));
    }
    Var lp = gaussian_log_density(reshape(v.mean, {k}), v.factor, z, scale);
    per_component.push_back(reshape(logdet.valid() ? lp + logdet : lp, {1}));
  }
  Var lw = log_weights(t, model, lv);
  Var comps = c.components == 1 ? per_component[0] : concat(per_component, 0);
  return logsumexp(lw + comps);
}

namespace {

constexpr const char* kFormat = "marconflow-checkpoint";

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const MosesModel& model, const CheckpointState& state,
                     const Adam* optimizer) {
  std::filesystem::create_directories(dir);
  json manifest{{"format", kFormat},
                {"version", 1},
                {"model", to_json(model.config)},
                {"seed", state.seed},
                {"step", state.step},
                {"rng_state", state.rng_state},
                {"extra", state.extra},
                {"parameters", model.params.names()}};
  write_tensor_archive(dir / "params.bin", model.params.all());
  if (optimizer) {
    std::map<std::string, Tensor> moments;
    for (const auto& [name, t] : optimizer->first_moments()) moments.emplace("m/" + name, t);
    for (const auto& [name, t] : optimizer->second_moments()) moments.emplace("v/" + name, t);
    write_tensor_archive(dir / "optimizer.bin", moments);
    manifest["optimizer"] = {{"steps", optimizer->step_count()},
                             {"lr", optimizer->config().lr},
                             {"beta1", optimizer->config().beta1},
                             {"beta2", optimizer->config().beta2},
                             {"eps", optimizer->config().eps}};
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw ValidationError("cannot write checkpoint manifest in '" + dir.string() + "'");
  out << manifest.dump(2) << '\n';
}

MosesModel load_checkpoint(const std::filesystem::path& dir, CheckpointState* state, Adam* optimizer) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("no checkpoint manifest in '" + dir.string() + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kFormat) throw ValidationError("not a checkpoint manifest");
  MosesModel model = make_model(model_config_from_json(manifest.at("model")), 0);
  auto stored = read_tensor_archive(dir / "params.bin");
  for (auto& [name, tensor] : model.params.all()) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ValidationError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != tensor.shape()) throw ValidationError("shape mismatch for parameter '" + name + "'");
    tensor = it->second;
  }
  if (stored.size() != model.params.all().size()) throw ValidationError("checkpoint has unexpected parameters");
  if (state) {
    state->seed = manifest.value("seed", std::uint64_t{0});
    state->step = manifest.value("step", std::int64_t{0});
    state->rng_state = manifest.value("rng_state", std::string{});
    state->extra = manifest.value("extra", json::object());
  }
  if (optimizer && manifest.contains("optimizer")) {
    const auto& o = manifest.at("optimizer");
    AdamConfig ac{o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                  o.at("eps").get<double>()};
    std::map<std::string, Tensor> m, v;
    for (auto& [name, t] : read_tensor_archive(dir / "optimizer.bin")) {
      if (name.rfind("m/", 0) == 0) m.emplace(name.substr(2), t);
      if (name.rfind("v/", 0) == 0) v.emplace(name.substr(2), t);
    }
    *optimizer = Adam(ac);
    optimizer->restore(o.at("steps").get<std::int64_t>(), std::move(m), std::move(v));
  }
  return model;
}

}  // namespace marconflow
