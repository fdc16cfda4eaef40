#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marconflow/moses_model.hpp"
#include "marconflow/trainer.hpp"

namespace marconflow::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kValidation = 2, kNumerical = 3, kAuditFailed = 4 };

/// Either one file split by `split` ratios or three explicit files.
struct DataConfig {
  std::string path;
  std::string train, validation, test;
  std::array<double, 3> split{0.7, 0.1, 0.2};
  std::uint64_t split_seed = 0;
  bool normalize_time = true;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string variant = "moses";
  std::vector<std::size_t> grid_components;  // empty: no search
  std::string out = "run";
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency
};

nlohmann::json to_json(const RunConfig& c);
/// Unknown keys at any level raise ValidationError.
RunConfig run_config_from_json(const nlohmann::json& j);

struct Series {
  std::string label;
  std::vector<double> x, y;
};

/// Minimal line plot: one polyline per series, axes box and a legend.
void write_svg(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series);

/// Entry point for the marconflow executable; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace marconflow::cli
