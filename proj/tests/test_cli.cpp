#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "marconflow/cli.hpp"
#include "marconflow/errors.hpp"

using namespace marconflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "marconflow");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t count_lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    setenv("MARCONFLOW_LOG", "quiet", 1);
    dir = fs::temp_directory_path() / ("marconflow_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& rel) const { return (dir / rel).string(); }

  // a small blast run; returns the config path
  std::string write_config(std::size_t epochs, const std::string& out, json extra = json::object()) {
    json cfg{{"data", {{"path", p("data/blast.jsonl")}}},
             {"model", {{"latent", 8}, {"time_features", 4}, {"cov_rank", 2}}},
             {"train", {{"max_epochs", epochs}, {"batch_size", 32}}},
             {"out", p(out)},
             {"seed", 3}};
    cfg.merge_patch(extra);
    const auto path = p(out + ".json");
    std::ofstream(path) << cfg.dump(2);
    return path;
  }

  void gen() { ASSERT_EQ(invoke({"gen-toy", "blast", "--n", "300", "--seed", "1", "--out", p("data")}).code, 0); }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, GenToyBlast) {
  ASSERT_EQ(invoke({"gen-toy", "blast", "--n", "1000", "--seed", "4", "--out", p("a")}).code, 0);
  ASSERT_EQ(invoke({"gen-toy", "blast", "--n", "1000", "--seed", "4", "--out", p("b")}).code, 0);
  EXPECT_EQ(count_lines(p("a/blast.jsonl")), 1000u);
  std::ifstream in(p("a/blast.jsonl"));
  std::string line;
  while (std::getline(in, line)) ASSERT_EQ(json::parse(line)["answer"].size(), 2u);
  EXPECT_EQ(slurp(p("a/blast.jsonl")), slurp(p("b/blast.jsonl")));
  EXPECT_EQ(read_json(p("a/config.json"))["seed"], 4);
  EXPECT_EQ(invoke({"gen-toy", "spiral", "--out", p("c")}).code, cli::kValidation);
}

TEST_F(Cli, GenToyCircleNoiseScale) {
  ASSERT_EQ(invoke({"gen-toy", "circle", "--n", "4000", "--seed", "2", "--out", p("c")}).code, 0);
  std::ifstream in(p("c/circle.jsonl"));
  std::string line;
  double s = 0.0, ss = 0.0;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto y = json::parse(line)["answer"];
    // radial residual is approximately the noise projected on the radius
    const double r = std::hypot(y[0].get<double>(), y[1].get<double>()) - 1.0;
    s += r;
    ss += r * r;
    ++n;
  }
  const double mean = s / n, sd = std::sqrt(ss / n - mean * mean);
  EXPECT_NEAR(sd, 0.05, 0.005);
}

TEST_F(Cli, TrainWritesCheckpointAndResolvedConfig) {
  gen();
  const auto r = invoke({"train", "--config", write_config(2, "run")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(p("run/best/manifest.json")));
  EXPECT_TRUE(fs::exists(p("run/last/optimizer.bin")));
  const auto cfg = read_json(p("run/config.json"));
  EXPECT_EQ(cfg["model"]["channels"], 2);
  EXPECT_EQ(cfg["model"]["allow_empty_context"], true);
  const auto rep = read_json(p("run/train_report.json"));
  EXPECT_EQ(rep["epochs"].size(), 2u);
  EXPECT_TRUE(rep.contains("test_njnll"));
}

TEST_F(Cli, VariantFlagTrainsGmm) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "gmm"), "--variant", "gmm"}).code, 0);
  const auto m = read_json(p("gmm/best/manifest.json"));
  EXPECT_EQ(m["model"]["variant"]["disable_flows"], true);
  EXPECT_EQ(m["extra"]["variant"], "gmm");
  EXPECT_EQ(read_json(p("gmm/config.json"))["variant"], "gmm");
  EXPECT_EQ(invoke({"train", "--config", write_config(1, "x"), "--variant", "gpr"}).code, cli::kValidation);
}

TEST_F(Cli, ResumeReproducesUninterruptedRun) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(3, "full")}).code, 0);
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "part")}).code, 0);
  ASSERT_EQ(invoke({"train", "--config", write_config(3, "part"), "--resume"}).code, 0);
  const auto a = read_json(p("full/train_report.json")), b = read_json(p("part/train_report.json"));
  EXPECT_EQ(a["step_losses"], b["step_losses"]);
  EXPECT_EQ(a["best_val_njnll"], b["best_val_njnll"]);
  EXPECT_EQ(slurp(p("full/best/params.bin")), slurp(p("part/best/params.bin")));
}

TEST_F(Cli, RerunIsBitEqual) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(2, "a")}).code, 0);
  auto ja = read_json(p("a/train_report.json"));
  const auto params = slurp(p("a/best/params.bin"));
  ASSERT_EQ(invoke({"train", "--config", write_config(2, "a")}).code, 0);
  auto jb = read_json(p("a/train_report.json"));
  for (auto* j : {&ja, &jb})
    for (auto& e : (*j)["epochs"]) e.erase("seconds");
  EXPECT_EQ(ja, jb);
  EXPECT_EQ(params, slurp(p("a/best/params.bin")));
}

TEST_F(Cli, EvalEmitsRowsAndIsReadOnly) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "run")}).code, 0);
  const auto before = slurp(p("run/best/params.bin")) + slurp(p("run/best/manifest.json"));
  const std::vector<std::string> args{"eval", "--checkpoint", p("run/best"), "--data", p("data/blast.jsonl"),
                                      "--metrics", "njnll,mnll,mi", "--samples", "100", "--out", p("ev")};
  ASSERT_EQ(invoke(args).code, 0);
  EXPECT_EQ(count_lines(p("ev/metrics.csv")), 4u);  // header + three rows
  const auto rep = read_json(p("ev/metrics.json"));
  ASSERT_EQ(rep.size(), 3u);
  EXPECT_TRUE(rep[2]["extra"].contains("noise_floor"));
  EXPECT_EQ(rep[0]["dataset"], "blast");
  EXPECT_EQ(before, slurp(p("run/best/params.bin")) + slurp(p("run/best/manifest.json")));
  const auto first = slurp(p("ev/metrics.json"));
  ASSERT_EQ(invoke(args).code, 0);
  EXPECT_EQ(first, slurp(p("ev/metrics.json")));
  auto bad = args;
  bad[6] = "njnll,brier";
  EXPECT_EQ(invoke(bad).code, cli::kValidation);
}

TEST_F(Cli, SampleRowsAndReproducibility) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "run")}).code, 0);
  const std::vector<std::string> args{"sample", "--checkpoint", p("run/best"), "--data", p("data/blast.jsonl"),
                                      "--n", "5", "--seed", "9", "--out", p("s1")};
  ASSERT_EQ(invoke(args).code, 0);
  EXPECT_EQ(count_lines(p("s1/samples.csv")), 1u + 300u * 5u * 2u);
  EXPECT_EQ(slurp(p("s1/samples.csv")).substr(0, 43), "instance,draw,component,query,t,channel,val");
  auto again = args;
  again.back() = p("s2");
  ASSERT_EQ(invoke(again).code, 0);
  EXPECT_EQ(slurp(p("s1/samples.csv")), slurp(p("s2/samples.csv")));
}

TEST_F(Cli, AuditCurvesAndExitCodes) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "run", {{"model", {{"components", 3}}}})}).code, 0);
  const std::vector<std::string> args{"audit", "--checkpoint", p("run/best"), "--data", p("data/blast.jsonl"),
                                      "--max-instances", "2", "--out", p("au")};
  ASSERT_EQ(invoke(args).code, 0);
  const auto rep = read_json(p("au/audit.json"));
  EXPECT_EQ(rep["pass"], true);
  EXPECT_EQ(rep["variables"].size(), 4u);
  EXPECT_EQ(slurp(p("au/audit_i0_k1.csv")).substr(0, 32), "y,direct,marginalized,histogram\n");
  EXPECT_EQ(count_lines(p("au/audit_i0_k1.csv")), 42u);
  EXPECT_NE(slurp(p("au/audit_i1_k0.svg")).find("<polyline"), std::string::npos);
  auto strict = args;
  strict.insert(strict.end(), {"--tol", "1e-300"});
  EXPECT_EQ(invoke(strict).code, cli::kAuditFailed);
}

TEST_F(Cli, ConfigErrorsAreValidationFailures) {
  gen();
  EXPECT_EQ(invoke({"train", "--config", write_config(1, "a", {{"lerning_rate", 1}})}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--config", write_config(1, "b", {{"model", {{"depth", 2}}}})}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--config", write_config(1, "c", {{"train", {{"seed", 2}}}})}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train", "--config", p("missing.json")}).code, cli::kValidation);
  EXPECT_EQ(invoke({"train"}).code, cli::kValidation);
  EXPECT_EQ(invoke({}).code, cli::kValidation);
  EXPECT_EQ(invoke({"--help"}).code, cli::kOk);
}

TEST_F(Cli, NumericalFailureExitCode) {
  gen();
  ASSERT_EQ(invoke({"train", "--config", write_config(1, "run")}).code, 0);
  // poison the stored mean head
  auto model = load_checkpoint(p("run/best"));
  CheckpointState st;
  (void)load_checkpoint(p("run/best"), &st);
  for (auto& x : model.params.at("gauss.mean").data()) x = std::numeric_limits<double>::quiet_NaN();
  save_checkpoint(p("run/best"), model, st);
  const auto r = invoke({"eval", "--checkpoint", p("run/best"), "--data", p("data/blast.jsonl"), "--out", p("ev")});
  EXPECT_EQ(r.code, cli::kNumerical) << r.err;
}

TEST_F(Cli, GridSearchWritesTable) {
  gen();
  const auto r = invoke({"train", "--config", write_config(1, "grid", {{"grid_components", {1, 2}}})});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(p("grid/grid.csv")), 3u);
  EXPECT_TRUE(fs::exists(p("grid/best/manifest.json")));
}

TEST_F(Cli, LogLevelFromEnvironment) {
  setenv("MARCONFLOW_LOG", "info", 1);
  auto r = invoke({"gen-toy", "blast", "--n", "5", "--out", p("d")});
  EXPECT_NE(r.out.find("wrote 5"), std::string::npos);
  setenv("MARCONFLOW_LOG", "quiet", 1);
  r = invoke({"gen-toy", "blast", "--n", "5", "--out", p("d")});
  EXPECT_TRUE(r.out.empty());
  setenv("MARCONFLOW_LOG", "loud", 1);
  EXPECT_EQ(invoke({"gen-toy", "blast", "--n", "5", "--out", p("d")}).code, cli::kValidation);
}

TEST(Svg, PolylinePerSeries) {
  const auto path = fs::temp_directory_path() / "marconflow_svg_test.svg";
  cli::write_svg(path, "a < b", {{"one", {0, 1, 2}, {0, 1, 4}}, {"two", {0, 2}, {1, 1}}});
  const auto s = slurp(path);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n') > 0, true);
  std::size_t n = 0;
  for (std::size_t pos = 0; (pos = s.find("<polyline", pos)) != std::string::npos; ++pos) ++n;
  EXPECT_EQ(n, 2u);
  EXPECT_NE(s.find("a &lt; b"), std::string::npos);
  fs::remove(path);
}
