#include "marconflow/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "marconflow/baselines.hpp"
#include "marconflow/errors.hpp"
#include "marconflow/metrics.hpp"

namespace marconflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class AuditFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LogLevel { quiet, info, debug };

LogLevel log_level() {
  const char* v = std::getenv("MARCONFLOW_LOG");
  if (!v || !*v) return LogLevel::info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::quiet;
  if (s == "debug" || s == "2") return LogLevel::debug;
  if (s == "info" || s == "1") return LogLevel::info;
  throw ValidationError("MARCONFLOW_LOG must be quiet, info or debug, got '" + s + "'");
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError("unknown key '" + key + "' in " + where);
}

template <class T>
void read_if(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad value for '") + key + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

std::size_t resolve_threads(std::size_t t) {
  if (t) return t;
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

json to_json(const RunConfig& c) {
  json data{{"split", c.data.split}, {"split_seed", c.data.split_seed}, {"normalize_time", c.data.normalize_time}};
  if (!c.data.path.empty()) data["path"] = c.data.path;
  if (!c.data.train.empty()) data["train"] = c.data.train;
  if (!c.data.validation.empty()) data["validation"] = c.data.validation;
  if (!c.data.test.empty()) data["test"] = c.data.test;
  json train = marconflow::to_json(c.train);
  train.erase("seed");
  return json{{"model", marconflow::to_json(c.model)},
              {"train", train},
              {"data", data},
              {"variant", c.variant},
              {"grid_components", c.grid_components},
              {"out", c.out},
              {"seed", c.seed},
              {"threads", c.threads}};
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, {"model", "train", "data", "variant", "grid_components", "out", "seed", "threads"}, "run config");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) {
    if (j.at("train").is_object() && j.at("train").contains("seed"))
      throw ValidationError("set 'seed' at the top level of the run config, not in 'train'");
    c.train = train_config_from_json(j.at("train"));
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, {"path", "train", "validation", "test", "split", "split_seed", "normalize_time"}, "data");
    read_if(d, "path", c.data.path);
    read_if(d, "train", c.data.train);
    read_if(d, "validation", c.data.validation);
    read_if(d, "test", c.data.test);
    read_if(d, "split", c.data.split);
    read_if(d, "split_seed", c.data.split_seed);
    read_if(d, "normalize_time", c.data.normalize_time);
  }
  read_if(j, "variant", c.variant);
  read_if(j, "grid_components", c.grid_components);
  read_if(j, "out", c.out);
  read_if(j, "seed", c.seed);
  read_if(j, "threads", c.threads);
  VariantSpec::parse(c.variant);
  for (auto d : c.grid_components)
    if (d < 1) throw ValidationError("grid_components entries must be positive");
  c.train.seed = c.seed;
  return c;
}

void write_svg(const fs::path& path, const std::string& title, const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 40;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
  if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  auto label = [&](double x, double y, double v, const char* anchor) {
    os << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"10\" text-anchor=\"" << anchor << "\">" << v
       << "</text>\n";
  };
  label(L, H - B + 14, x0, "start");
  label(W - R, H - B + 14, x1, "end");
  label(L - 4, H - B, y0, "end");
  label(L - 4, T + 8, y1, "end");
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* col = colors[k % std::size(colors)];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n";
    const double ly = T + 12 + 16 * static_cast<double>(k);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 34 << "\" y=\"" << ly << "\" font-size=\"11\">" << xml_escape(s.label)
       << "</text>\n";
  }
  os << "</svg>\n";
  write_text(path, os.str());
}

namespace {

struct Splits {
  std::vector<TimeSeriesInstance> train, validation, test;
};

Splits load_splits(const DataConfig& d) {
  Splits s;
  const ValidationOptions opts{0, true};
  if (!d.path.empty()) {
    if (!d.train.empty() || !d.validation.empty() || !d.test.empty())
      throw ValidationError("data: give either 'path' or explicit 'train'/'validation'/'test' files");
    const auto all = load_jsonl(d.path, opts);
    const auto idx = split(all.size(), d.split, d.split_seed);
    s.train = select(all, idx.train);
    s.validation = select(all, idx.validation);
    s.test = select(all, idx.test);
  } else {
    if (d.train.empty() || d.validation.empty()) throw ValidationError("data: 'train' and 'validation' are required");
    s.train = load_jsonl(d.train, opts);
    s.validation = load_jsonl(d.validation, opts);
    if (!d.test.empty()) s.test = load_jsonl(d.test, opts);
  }
  if (s.train.empty() || s.validation.empty()) throw ValidationError("data: train and validation splits must be nonempty");
  return s;
}

json normalizer_json(const TimeNormalizer& n) { return json{{"lo", n.lo}, {"hi", n.hi}}; }

TimeNormalizer normalizer_from(const CheckpointState& st) {
  TimeNormalizer n;
  if (st.extra.contains("time_normalizer")) {
    n.lo = st.extra["time_normalizer"].at("lo").get<double>();
    n.hi = st.extra["time_normalizer"].at("hi").get<double>();
  }
  return n;
}

struct Loaded {
  MosesModel model;
  CheckpointState state;
  std::vector<TimeSeriesInstance> raw, data;  // data: times normalized as in training
};

Loaded load_for_inference(const std::string& checkpoint, const std::string& data) {
  Loaded l;
  l.model = load_checkpoint(checkpoint, &l.state);
  l.raw = load_jsonl(data, ValidationOptions{l.model.config.channels, l.model.config.allow_empty_context});
  l.data = l.raw;
  normalizer_from(l.state).apply(l.data);
  return l;
}

std::string dataset_label(const std::string& path) { return fs::path(path).stem().string(); }

std::string model_label(const Loaded& l) { return l.state.extra.value("variant", VariantSpec{l.model.config.variant}.name()); }

// ---------------------------------------------------------------- gen-toy

struct GenToyOptions {
  std::string name;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out = ".";
};

int cmd_gen_toy(const GenToyOptions& o, std::ostream& out) {
  std::vector<TimeSeriesInstance> data;
  if (o.name == "blast") data = generate_blast(o.n, o.seed);
  else if (o.name == "circle") data = generate_circle(o.n, o.seed);
  else throw ValidationError("unknown toy dataset '" + o.name + "' (blast or circle)");
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_jsonl(dir / (o.name + ".jsonl"), data);
  write_json(dir / "config.json", {{"command", "gen-toy"}, {"name", o.name}, {"n", o.n}, {"seed", o.seed}});
  if (log_level() != LogLevel::quiet) out << "wrote " << data.size() << " instances to " << (dir / (o.name + ".jsonl")).string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, variant;
  std::optional<std::size_t> threads;
  bool resume = false;
};

CheckpointState run_state(const RunConfig& rc, const TimeNormalizer& norm, std::int64_t step) {
  CheckpointState st;
  st.seed = rc.seed;
  st.step = step;
  st.extra = {{"time_normalizer", normalizer_json(norm)}, {"variant", rc.variant}};
  return st;
}

int cmd_train(const TrainOptions& o, std::ostream& out) {
  json raw = read_json(o.config);
  RunConfig rc = run_config_from_json(raw);
  if (o.seed) rc.seed = rc.train.seed = *o.seed;
  if (o.out) rc.out = *o.out;
  if (o.variant) rc.variant = *o.variant;
  if (o.threads) rc.threads = *o.threads;
  const VariantSpec spec = VariantSpec::parse(rc.variant);
  const auto level = log_level();

  Splits s = load_splits(rc.data);
  TimeNormalizer norm;
  if (rc.data.normalize_time) {
    std::vector<std::size_t> all(s.train.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    norm = TimeNormalizer::fit(s.train, all);
    norm.apply(s.train);
    norm.apply(s.validation);
    norm.apply(s.test);
  }
  // the data decides the channel count and whether empty contexts occur
  const bool has_model_channels = raw.contains("model") && raw["model"].contains("channels");
  std::size_t channels = std::max({max_channel(s.train), max_channel(s.validation), max_channel(s.test)});
  if (has_model_channels) {
    if (rc.model.channels < channels) throw ValidationError("data uses more channels than model.channels");
  } else {
    rc.model.channels = channels;
  }
  auto empty = [](const std::vector<TimeSeriesInstance>& v) {
    return std::any_of(v.begin(), v.end(), [](const auto& i) { return i.context.empty(); });
  };
  if (empty(s.train) || empty(s.validation) || empty(s.test)) rc.model.allow_empty_context = true;
  rc.model = variant_config(rc.model, spec);

  const fs::path dir(rc.out);
  fs::create_directories(dir);
  write_json(dir / "config.json", to_json(rc));
  TrainConfig tc = rc.train;
  if (level != LogLevel::quiet) tc.progress = &out;

  TrainResult result{MosesModel{}, {}};
  if (!rc.grid_components.empty()) {
    if (o.resume) throw ValidationError("--resume is not supported with a grid search");
    std::vector<ModelConfig> grid;
    for (auto d : rc.grid_components) {
      ModelConfig c = rc.model;
      c.components = d;
      grid.push_back(variant_config(c, spec));
    }
    tc.progress = level == LogLevel::debug ? &out : nullptr;
    auto g = grid_select(grid, s.train, s.validation, tc);
    std::ostringstream csv;
    csv << std::setprecision(10) << "components,val_njnll\n";
    for (const auto& c : g.candidates) csv << c.config.components << ',' << c.val_njnll << '\n';
    write_text(dir / "grid.csv", csv.str());
    if (level != LogLevel::quiet)
      out << "grid: selected D=" << g.candidates[g.best].config.components << " val_njnll "
          << g.candidates[g.best].val_njnll << '\n';
    result = std::move(g.best_run);
  } else {
    auto save_epoch = [&](const TrainState& st) {
      CheckpointState cs = run_state(rc, norm, static_cast<std::int64_t>(st.report.total_steps));
      cs.extra["epoch"] = st.epoch;
      cs.extra["since_best"] = st.since_best;
      cs.extra["report"] = st.report.to_json();
      save_checkpoint(dir / "last", st.model, cs, &st.optimizer);
      save_checkpoint(dir / "best", st.best, run_state(rc, norm, static_cast<std::int64_t>(st.report.total_steps)));
    };
    if (o.resume) {
      CheckpointState cs;
      Adam opt;
      MosesModel current = load_checkpoint(dir / "last", &cs, &opt);
      if (marconflow::to_json(current.config) != marconflow::to_json(rc.model)) throw ValidationError("--resume: checkpoint model differs from the config");
      TrainState st{current, load_checkpoint(dir / "best"), opt, cs.extra.at("epoch").get<std::size_t>(),
                    cs.extra.at("since_best").get<std::size_t>(), TrainReport::from_json(cs.extra.at("report"))};
      result = resume_training(std::move(st), s.train, s.validation, tc, save_epoch);
    } else {
      result = train(build_variant(rc.model, spec, rc.seed), s.train, s.validation, tc, save_epoch);
    }
  }
  save_checkpoint(dir / "best", result.model, run_state(rc, norm, static_cast<std::int64_t>(result.report.total_steps)));
  json rep = result.report.to_json();
  if (!s.test.empty()) rep["test_njnll"] = njnll(result.model, s.test, resolve_threads(rc.threads)).value;
  write_json(dir / "train_report.json", rep);
  if (level != LogLevel::quiet) {
    out << "best epoch " << result.report.best_epoch << " val_njnll " << result.report.best_val_njnll;
    if (rep.contains("test_njnll")) out << " test_njnll " << rep["test_njnll"].get<double>();
    out << "\ncheckpoint " << (dir / "best").string() << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  std::string checkpoint, data, out = "eval";
  std::vector<std::string> metrics{"njnll", "mnll"};
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto l = load_for_inference(o.checkpoint, o.data);
  const std::size_t threads = resolve_threads(o.threads);
  const std::string ds = dataset_label(o.data), ml = model_label(l);
  std::ostringstream csv;
  csv << "metric,dataset,model,value,stderr,count\n";
  json reports = json::array();
  for (const auto& m : o.metrics) {
    MetricReport r;
    if (m == "njnll") r = njnll(l.model, l.data, threads);
    else if (m == "mnll") r = mnll(l.model, l.data, threads);
    else if (m == "mi") r = mi(l.model, l.data, o.samples, o.seed, threads);
    else if (m == "crps") r = crps(l.model, l.data, o.samples, o.seed, threads);
    else if (m == "energy") r = energy(l.model, l.data, o.samples, o.seed, threads);
    else throw ValidationError("unknown metric '" + m + "' (njnll, mnll, mi, crps, energy)");
    csv << r.csv_row(ds, ml) << '\n';
    json j = r.to_json();
    j["dataset"] = ds;
    j["model"] = ml;
    reports.push_back(j);
    if (log_level() != LogLevel::quiet) {
      out << m << ' ' << std::setprecision(6) << r.value << " +- " << r.stderr_;
      if (r.extra.contains("noise_floor")) out << " (noise floor " << r.extra["noise_floor"].get<double>() << ')';
      out << '\n';
    }
  }
  const fs::path dir(o.out);
  write_text(dir / "metrics.csv", csv.str());
  write_json(dir / "metrics.json", reports);
  write_json(dir / "config.json", {{"command", "eval"},
                                   {"checkpoint", o.checkpoint},
                                   {"data", o.data},
                                   {"metrics", o.metrics},
                                   {"samples", o.samples},
                                   {"seed", o.seed},
                                   {"threads", o.threads}});
  return kOk;
}

// ---------------------------------------------------------------- sample

struct SampleOptions {
  std::string checkpoint, data, out = "samples";
  std::size_t n = 100;
  std::uint64_t seed = 0;
};

int cmd_sample(const SampleOptions& o, std::ostream& out) {
  if (o.n < 1) throw ValidationError("--n must be positive");
  const auto l = load_for_inference(o.checkpoint, o.data);
  std::ostringstream csv;
  csv << std::setprecision(10) << "instance,draw,component,query,t,channel,value\n";
  for (std::size_t i = 0; i < l.data.size(); ++i) {
    auto rng = instance_rng(o.seed, i);
    const auto dist = condition(l.model, l.data[i]);
    for (std::size_t s = 0; s < o.n; ++s) {
      std::size_t comp = 0;
      const auto y = dist.sample(rng, &comp);
      for (std::size_t k = 0; k < y.size(); ++k) {
        const auto& q = l.raw[i].query[k];
        csv << i << ',' << s << ',' << comp << ',' << k << ',' << q.t << ',' << q.channel << ',' << y[k] << '\n';
      }
    }
  }
  const fs::path dir(o.out);
  write_text(dir / "samples.csv", csv.str());
  write_json(dir / "config.json", {{"command", "sample"},
                                   {"checkpoint", o.checkpoint},
                                   {"data", o.data},
                                   {"n", o.n},
                                   {"seed", o.seed}});
  if (log_level() != LogLevel::quiet) out << "wrote " << l.data.size() * o.n << " draws to " << (dir / "samples.csv").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- audit

struct AuditOptions {
  std::string checkpoint, data, out = "audit";
  std::size_t grid = 41;
  double tol = 1e-3;
  std::size_t max_instances = 5;
  std::size_t samples = 5000;
  std::uint64_t seed = 0;
};

int cmd_audit(const AuditOptions& o, std::ostream& out) {
  if (o.grid < 2) throw ValidationError("--grid must be at least 2");
  const auto l = load_for_inference(o.checkpoint, o.data);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  json report = json::array();
  bool all_pass = true;
  double worst = 0.0;
  const std::size_t count = std::min(o.max_instances, l.data.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto dist = condition(l.model, l.data[i]);
    const auto res = consistency_audit(dist, o.grid);
    // histogram of joint-sample coordinates on the audit grid
    auto rng = instance_rng(o.seed, i);
    std::vector<std::vector<double>> draws(dist.dim());
    for (std::size_t s = 0; s < o.samples; ++s) {
      const auto y = dist.sample(rng);
      for (std::size_t k = 0; k < y.size(); ++k) draws[k].push_back(y[k]);
    }
    for (const auto& va : res.variables) {
      const auto& g = va.grid;
      const double step = g[1] - g[0];
      std::vector<double> hist(g.size(), 0.0);
      for (double y : draws[va.variable]) {
        const double pos = (y - g.front()) / step + 0.5;
        if (pos < 0.0 || pos >= static_cast<double>(g.size())) continue;
        hist[static_cast<std::size_t>(pos)] += 1.0 / (static_cast<double>(o.samples) * step);
      }
      const bool pass = va.max_rel_error <= o.tol;
      all_pass = all_pass && pass;
      worst = std::max(worst, va.max_rel_error);
      const std::string stem = "audit_i" + std::to_string(i) + "_k" + std::to_string(va.variable);
      std::ostringstream csv;
      csv << std::setprecision(12) << "y,direct,marginalized,histogram\n";
      for (std::size_t p = 0; p < g.size(); ++p)
        csv << g[p] << ',' << va.direct[p] << ',' << va.marginalized[p] << ',' << hist[p] << '\n';
      write_text(dir / (stem + ".csv"), csv.str());
      write_svg(dir / (stem + ".svg"), "instance " + std::to_string(i) + ", query " + std::to_string(va.variable),
                {{"direct marginal", g, va.direct},
                 {"marginalized joint", g, va.marginalized},
                 {"joint samples", g, hist}});
      report.push_back({{"instance", i},
                        {"variable", va.variable},
                        {"integrated", va.integrated},
                        {"max_rel_error", va.max_rel_error},
                        {"pass", pass}});
    }
  }
  write_json(dir / "audit.json", {{"tolerance", o.tol}, {"max_rel_error", worst}, {"pass", all_pass}, {"variables", report}});
  write_json(dir / "config.json", {{"command", "audit"},
                                   {"checkpoint", o.checkpoint},
                                   {"data", o.data},
                                   {"grid", o.grid},
                                   {"tol", o.tol},
                                   {"max_instances", o.max_instances},
                                   {"samples", o.samples},
                                   {"seed", o.seed}});
  if (log_level() != LogLevel::quiet)
    out << "audit " << (all_pass ? "PASS" : "FAIL") << " max_rel_error " << std::setprecision(3) << worst << " over "
        << count << " instances\n";
  if (!all_pass) throw AuditFailure("consistency audit exceeded tolerance " + std::to_string(o.tol));
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"marginalization-consistent mixtures of separable flows"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "marconflow 0.1");

  GenToyOptions gen;
  auto* g = app.add_subcommand("gen-toy", "write a synthetic dataset as JSONL");
  g->add_option("name", gen.name, "blast or circle")->required();
  g->add_option("--n", gen.n, "number of instances");
  g->add_option("--seed", gen.seed);
  g->add_option("--out", gen.out, "output directory");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "train a model from a JSON run config");
  t->add_option("--config", tr.config)->required();
  t->add_option("--seed", tr.seed);
  t->add_option("--out", tr.out, "output directory");
  t->add_option("--variant", tr.variant, "moses, gmm, moses-sigma, moses-w, moses1 (joinable with +)");
  t->add_option("--threads", tr.threads);
  t->add_flag("--resume", tr.resume, "continue from <out>/last");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--metrics", ev.metrics, "njnll, mnll, mi, crps, energy")->delimiter(',');
  e->add_option("--samples", ev.samples, "draws per instance for sample-based metrics");
  e->add_option("--seed", ev.seed);
  e->add_option("--threads", ev.threads);
  e->add_option("--out", ev.out);

  SampleOptions sa;
  auto* s = app.add_subcommand("sample", "draw joint samples per instance");
  s->add_option("--checkpoint", sa.checkpoint)->required();
  s->add_option("--data", sa.data)->required();
  s->add_option("--n", sa.n);
  s->add_option("--seed", sa.seed);
  s->add_option("--out", sa.out);

  AuditOptions au;
  auto* a = app.add_subcommand("audit", "compare direct marginals with numerically marginalized joints");
  a->add_option("--checkpoint", au.checkpoint)->required();
  a->add_option("--data", au.data)->required();
  a->add_option("--grid", au.grid);
  a->add_option("--tol", au.tol);
  a->add_option("--max-instances", au.max_instances);
  a->add_option("--samples", au.samples);
  a->add_option("--seed", au.seed);
  a->add_option("--out", au.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kValidation;
  }
  try {
    if (*g) return cmd_gen_toy(gen, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*s) return cmd_sample(sa, out);
    if (*a) return cmd_audit(au, out);
  } catch (const AuditFailure& ex) {
    err << "audit failed: " << ex.what() << '\n';
    return kAuditFailed;
  } catch (const ValidationError& ex) {
    err << "invalid input: " << ex.what() << '\n';
    return kValidation;
  } catch (const ContractError& ex) {
    err << "invalid input: " << ex.what() << '\n';
    return kValidation;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const DomainError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace marconflow::cli
