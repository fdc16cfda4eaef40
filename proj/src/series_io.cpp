#include "marconflow/series_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "marconflow/errors.hpp"

namespace marconflow {

using nlohmann::json;

void validate(const TimeSeriesInstance& inst, const ValidationOptions& opts) {
  if (inst.query.empty()) throw ValidationError("instance has no query points");
  if (inst.answer.size() != inst.query.size()) {
    throw ValidationError("answer has " + std::to_string(inst.answer.size()) + " values for " +
                          std::to_string(inst.query.size()) + " queries");
  }
  if (inst.context.empty() && !opts.allow_empty_context) throw ValidationError("instance has an empty context");
  auto check_channel = [&](std::size_t c) {
    if (c < 1 || (opts.channels > 0 && c > opts.channels)) {
      throw ValidationError("channel id " + std::to_string(c) + " out of range");
    }
  };
  double last_ctx = -std::numeric_limits<double>::infinity();
  for (const auto& o : inst.context) {
    if (!std::isfinite(o.t) || !std::isfinite(o.value)) throw ValidationError("non-finite context entry");
    check_channel(o.channel);
    last_ctx = std::max(last_ctx, o.t);
  }
  for (std::size_t k = 0; k < inst.query.size(); ++k) {
    const auto& q = inst.query[k];
    if (!std::isfinite(q.t) || !std::isfinite(inst.answer[k])) throw ValidationError("non-finite query entry");
    check_channel(q.channel);
    if (!(q.t > last_ctx)) throw ValidationError("query time " + std::to_string(q.t) + " does not follow the context");
  }
}

namespace {

double number(const json& j, const char* what) {
  if (!j.is_number()) throw ValidationError(std::string(what) + " is not a number");
  return j.get<double>();
}

std::size_t channel_id(const json& j) {
  const double c = number(j, "channel");
  if (c < 1 || c != std::floor(c) || c > 1e9) throw ValidationError("channel must be a positive integer");
  return static_cast<std::size_t>(c);
}

TimeSeriesInstance parse_instance(const json& j) {
  if (!j.is_object()) throw ValidationError("line is not a JSON object");
  for (const auto& [key, unused] : j.items()) {
    if (key != "context" && key != "query" && key != "answer") throw ValidationError("unknown field '" + key + "'");
  }
  for (const char* key : {"context", "query", "answer"}) {
    if (!j.contains(key) || !j.at(key).is_array()) throw ValidationError(std::string("missing array '") + key + "'");
  }
  TimeSeriesInstance inst;
  for (const auto& row : j.at("context")) {
    if (!row.is_array() || row.size() != 3) throw ValidationError("context entries must be [t, c, v]");
    inst.context.push_back({number(row[0], "time"), channel_id(row[1]), number(row[2], "value")});
  }
  for (const auto& row : j.at("query")) {
    if (!row.is_array() || row.size() != 2) throw ValidationError("query entries must be [t, c]");
    inst.query.push_back({number(row[0], "time"), channel_id(row[1])});
  }
  for (const auto& y : j.at("answer")) inst.answer.push_back(number(y, "answer"));
  return inst;
}

json to_json(const TimeSeriesInstance& inst) {
  json ctx = json::array(), qry = json::array();
  for (const auto& o : inst.context) ctx.push_back({o.t, o.channel, o.value});
  for (const auto& q : inst.query) qry.push_back({q.t, q.channel});
  return json{{"context", ctx}, {"query", qry}, {"answer", inst.answer}};
}

}  // namespace

std::vector<TimeSeriesInstance> parse_jsonl(std::istream& in, const ValidationOptions& opts) {
  std::vector<TimeSeriesInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto inst = parse_instance(json::parse(line));
      validate(inst, opts);
      out.push_back(std::move(inst));
    } catch (const json::exception& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<TimeSeriesInstance> load_jsonl(const std::filesystem::path& path, const ValidationOptions& opts) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  return parse_jsonl(in, opts);
}

void write_jsonl(std::ostream& out, const std::vector<TimeSeriesInstance>& instances) {
  for (const auto& inst : instances) out << to_json(inst).dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const std::vector<TimeSeriesInstance>& instances) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  write_jsonl(out, instances);
}

void write_csv(const std::filesystem::path& path, const std::vector<TimeSeriesInstance>& instances) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'");
  out << std::setprecision(17) << "instance_id,role,t,c,v\n";
  for (std::size_t i = 0; i < instances.size(); ++i) {
    for (const auto& o : instances[i].context) out << i << ",ctx," << o.t << ',' << o.channel << ',' << o.value << '\n';
    for (std::size_t k = 0; k < instances[i].query.size(); ++k) {
      const auto& q = instances[i].query[k];
      out << i << ",qry," << q.t << ',' << q.channel << ',' << instances[i].answer[k] << '\n';
    }
  }
}

std::size_t max_channel(const std::vector<TimeSeriesInstance>& instances) {
  std::size_t c = 0;
  for (const auto& inst : instances) {
    for (const auto& o : inst.context) c = std::max(c, o.channel);
    for (const auto& q : inst.query) c = std::max(c, q.channel);
  }
  return c;
}

TimeNormalizer TimeNormalizer::fit(const std::vector<TimeSeriesInstance>& instances,
                                   const std::vector<std::size_t>& subset) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (auto i : subset) {
    for (const auto& o : instances.at(i).context) lo = std::min(lo, o.t), hi = std::max(hi, o.t);
    for (const auto& q : instances.at(i).query) lo = std::min(lo, q.t), hi = std::max(hi, q.t);
  }
  if (!std::isfinite(lo)) return {};
  return {lo, hi};
}

double TimeNormalizer::operator()(double t) const {
  // a degenerate range only shifts
  return hi > lo ? (t - lo) / (hi - lo) : t - lo;
}

void TimeNormalizer::apply(std::vector<TimeSeriesInstance>& instances) const {
  for (auto& inst : instances) {
    for (auto& o : inst.context) o.t = (*this)(o.t);
    for (auto& q : inst.query) q.t = (*this)(q.t);
  }
}

std::array<double, 2> blast_transform(double z0, double z1) {
  return {z0 * std::abs(z0), z1 * std::abs(z1)};
}

std::array<double, 2> circle_transform(double z0, double z1, double noise0, double noise1) {
  const double r = std::hypot(z0, z1);
  return {z0 / r + 0.05 * noise0, z1 / r + 0.05 * noise1};
}

namespace {

TimeSeriesInstance toy_instance(double y0, double y1) {
  TimeSeriesInstance inst;
  inst.query = {{1.0, 1}, {1.0, 2}};
  inst.answer = {y0, y1};
  return inst;
}

}  // namespace

std::vector<TimeSeriesInstance> generate_blast(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ContractError("generate_blast needs n >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<TimeSeriesInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Cholesky of [[1,1],[1,2]] is [[1,0],[1,1]]
    const double e0 = normal(rng), e1 = normal(rng);
    const auto y = blast_transform(e0, e0 + e1);
    out.push_back(toy_instance(y[0], y[1]));
  }
  return out;
}

std::vector<TimeSeriesInstance> generate_circle(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ContractError("generate_circle needs n >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<TimeSeriesInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z0, z1;
    do {
      z0 = normal(rng);
      z1 = normal(rng);
    } while (std::hypot(z0, z1) < 1e-12);
    const double n0 = normal(rng), n1 = normal(rng);
    const auto y = circle_transform(z0, z1, n0, n1);
    out.push_back(toy_instance(y[0], y[1]));
  }
  return out;
}

DatasetSplit split(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  for (double r : ratios)
    if (!(r >= 0.0)) throw ContractError("split ratios must be non-negative");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ContractError("split ratios must sum to 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto count = [&](double r) {
    return std::min(n, static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)));
  };
  const std::size_t ntr = count(ratios[0]);
  const std::size_t nva = std::min(n - ntr, count(ratios[1]));
  DatasetSplit s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(ntr));
  s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr),
                      idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva), idx.end());
  return s;
}

TimeSeriesInstance Batch::instance(std::size_t b) const {
  TimeSeriesInstance inst;
  for (std::size_t i = 0; i < n_max; ++i) {
    if (!context_mask[b * n_max + i]) continue;
    const double* row = &context.data()[(b * n_max + i) * 3];
    inst.context.push_back({row[0], static_cast<std::size_t>(row[1]), row[2]});
  }
  for (std::size_t k = 0; k < k_max; ++k) {
    if (!query_mask[b * k_max + k]) continue;
    const double* row = &query.data()[(b * k_max + k) * 2];
    inst.query.push_back({row[0], static_cast<std::size_t>(row[1])});
    inst.answer.push_back(answer[b * k_max + k]);
  }
  return inst;
}

std::vector<Batch> make_batches(const std::vector<TimeSeriesInstance>& instances, std::size_t batch_size,
                                std::uint64_t seed, bool shuffle) {
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  std::vector<std::size_t> order(instances.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    b.ids.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
    for (auto i : b.ids) {
      b.n_max = std::max(b.n_max, instances[i].n_context());
      b.k_max = std::max(b.k_max, instances[i].n_query());
    }
    const std::size_t bs = b.ids.size();
    b.context = Tensor(Shape{bs, b.n_max, 3}, 0.0);
    b.query = Tensor(Shape{bs, b.k_max, 2}, 0.0);
    b.answer = Tensor(Shape{bs, b.k_max}, 0.0);
    b.context_mask.assign(bs * b.n_max, 0);
    b.query_mask.assign(bs * b.k_max, 0);
    for (std::size_t r = 0; r < bs; ++r) {
      const auto& inst = instances[b.ids[r]];
      for (std::size_t i = 0; i < inst.n_context(); ++i) {
        double* row = &b.context.data()[(r * b.n_max + i) * 3];
        row[0] = inst.context[i].t;
        row[1] = static_cast<double>(inst.context[i].channel);
        row[2] = inst.context[i].value;
        b.context_mask[r * b.n_max + i] = 1;
      }
      for (std::size_t k = 0; k < inst.n_query(); ++k) {
        double* row = &b.query.data()[(r * b.k_max + k) * 2];
        row[0] = inst.query[k].t;
        row[1] = static_cast<double>(inst.query[k].channel);
        b.answer[r * b.k_max + k] = inst.answer[k];
        b.query_mask[r * b.k_max + k] = 1;
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace marconflow
