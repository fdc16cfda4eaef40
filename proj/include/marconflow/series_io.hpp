#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "marconflow/tensor.hpp"

namespace marconflow {

struct Observation {
  double t = 0.0;
  std::size_t channel = 1;  // 1-based
  double value = 0.0;
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct QueryPoint {
  double t = 0.0;
  std::size_t channel = 1;
  friend bool operator==(const QueryPoint&, const QueryPoint&) = default;
};

struct TimeSeriesInstance {
  std::vector<Observation> context;
  std::vector<QueryPoint> query;
  std::vector<double> answer;

  std::size_t n_context() const { return context.size(); }
  std::size_t n_query() const { return query.size(); }
  friend bool operator==(const TimeSeriesInstance&, const TimeSeriesInstance&) = default;
};

struct ValidationOptions {
  std::size_t channels = 0;  // 0: no upper bound on channel ids
  bool allow_empty_context = false;
};

/// Throws ValidationError describing the first broken invariant.
void validate(const TimeSeriesInstance& inst, const ValidationOptions& opts = {});

/// One JSON object per line: {"context":[[t,c,v],...],"query":[[t,c],...],"answer":[y,...]}.
/// Errors carry the 1-based line number.
std::vector<TimeSeriesInstance> load_jsonl(const std::filesystem::path& path, const ValidationOptions& opts = {});
std::vector<TimeSeriesInstance> parse_jsonl(std::istream& in, const ValidationOptions& opts = {});
void write_jsonl(const std::filesystem::path& path, const std::vector<TimeSeriesInstance>& instances);
void write_jsonl(std::ostream& out, const std::vector<TimeSeriesInstance>& instances);

/// Rows: instance_id, role (ctx|qry), t, c, v. Query rows carry the answer.
void write_csv(const std::filesystem::path& path, const std::vector<TimeSeriesInstance>& instances);

std::size_t max_channel(const std::vector<TimeSeriesInstance>& instances);

/// Affine map of times onto [0, 1] fitted on a subset (the train split).
struct TimeNormalizer {
  double lo = 0.0;
  double hi = 1.0;

  static TimeNormalizer fit(const std::vector<TimeSeriesInstance>& instances, const std::vector<std::size_t>& subset);
  double operator()(double t) const;
  void apply(std::vector<TimeSeriesInstance>& instances) const;
};

std::array<double, 2> blast_transform(double z0, double z1);
std::array<double, 2> circle_transform(double z0, double z1, double noise0, double noise1);

/// Unconditional 2-D draws packaged as empty-context instances with two
/// queries at (t=1, c=1) and (t=1, c=2).
std::vector<TimeSeriesInstance> generate_blast(std::size_t n, std::uint64_t seed);
std::vector<TimeSeriesInstance> generate_circle(std::size_t n, std::uint64_t seed);

struct DatasetSplit {
  std::vector<std::size_t> train, validation, test;
};

/// Shuffled split; sizes are floor(n * ratio) for train and validation, the rest is test.
DatasetSplit split(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed);

template <class T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items.at(i));
  return out;
}

/// Raw triplets padded to the batch maxima; padded slots hold zeros.
struct Batch {
  std::vector<std::size_t> ids;          // positions in the input sequence
  std::size_t n_max = 0, k_max = 0;
  Tensor context;                        // B x N_max x 3 (t, c, v)
  Tensor query;                          // B x K_max x 2 (t, c)
  Tensor answer;                         // B x K_max
  std::vector<std::uint8_t> context_mask;  // B x N_max
  std::vector<std::uint8_t> query_mask;    // B x K_max

  std::size_t size() const { return ids.size(); }
  TimeSeriesInstance instance(std::size_t b) const;
};

std::vector<Batch> make_batches(const std::vector<TimeSeriesInstance>& instances, std::size_t batch_size,
                                std::uint64_t seed, bool shuffle);

}  // namespace marconflow
