#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "marconflow/errors.hpp"
#include "marconflow/metrics.hpp"
#include "marconflow/moses_model.hpp"
#include "marconflow/quadrature.hpp"
#include "support/random_models.hpp"

using namespace marconflow;
using marconflow::testing::random_instance;
using marconflow::testing::random_model;
using marconflow::testing::random_permutation;
using marconflow::testing::integrate_pieces;
using marconflow::testing::kink_points;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

MosesModel standard_normal_model(std::size_t channels = 1) {
  ModelConfig cfg;
  cfg.latent = 8;
  cfg.time_features = 4;
  cfg.channels = channels;
  cfg.cov_rank = 2;
  auto m = make_model(cfg, 3);
  for (auto& x : m.params.at("gauss.mean").data()) x = 0.0;
  for (auto& x : m.params.at("gauss.cov").data()) x = 0.0;
  return m;
}

double tape_log_joint(const MosesModel& m, const EncoderInput& in) {
  Tape t(&m.params, false);
  return log_joint(t, m, in).value()[0];
}

}  // namespace

TEST(MosesModel, IdentityModelIsStandardNormal) {
  const auto m = standard_normal_model();
  std::mt19937_64 rng(1);
  for (std::size_t k = 1; k <= 5; ++k) {
    auto inst = random_instance(rng, 1, 3, k);
    double ref = -0.5 * static_cast<double>(k) * kLog2Pi;
    for (double y : inst.answer) ref -= 0.5 * y * y;
    EXPECT_NEAR(log_density(m, inst).log_joint, ref, 1e-12);
  }
}

TEST(MosesModel, LogJointIsLogsumexpOfComponents) {
  const auto m = random_model(4, 4);
  std::mt19937_64 rng(2);
  const auto r = log_density(m, random_instance(rng, 2, 4, 3));
  double mx = -INFINITY, s = 0.0;
  for (std::size_t d = 0; d < 4; ++d) mx = std::max(mx, r.log_weights[d] + r.component_log_density[d]);
  for (std::size_t d = 0; d < 4; ++d) s += std::exp(r.log_weights[d] + r.component_log_density[d] - mx);
  EXPECT_NEAR(r.log_joint, mx + std::log(s), 1e-12);
}

TEST(MosesModel, PermutationInvariance) {
  const auto m = random_model(5, 4);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = random_instance(rng, 2, 6, 4);
    const double base = log_density(m, inst).log_joint;
    auto perm = inst;
    const auto pc = random_permutation(rng, inst.n_context());
    const auto pq = random_permutation(rng, inst.n_query());
    for (std::size_t i = 0; i < pc.size(); ++i) perm.context[i] = inst.context[pc[i]];
    for (std::size_t k = 0; k < pq.size(); ++k) {
      perm.query[k] = inst.query[pq[k]];
      perm.answer[k] = inst.answer[pq[k]];
    }
    EXPECT_NEAR(log_density(m, perm).log_joint, base, 1e-12);
    EXPECT_NEAR(tape_log_joint(m, encoder_input(perm)), base, 1e-12);
  }
}

TEST(MosesModel, JointIntegratesToOne) {
  // milder splines keep the nested adaptive rule affordable
  const auto m = random_model(6, 2, 2, false, 0.2);
  std::mt19937_64 rng(4);
  const auto dist = condition(m, random_instance(rng, 2, 4, 2));
  const double lim = m.config.spline.bound + 10.0;
  const auto c0 = kink_points(dist, 0, -lim, lim), c1 = kink_points(dist, 1, -lim, lim);
  const double total = integrate_pieces(
      [&](double a) {
        return integrate_pieces(
            [&](double b) {
              const double y[2] = {a, b};
              return std::exp(dist.log_density(y).log_joint);
            },
            c1, 1e-7);
      },
      c0, 1e-6);
  EXPECT_NEAR(total, 1.0, 1e-3);
}

TEST(MosesModel, UnivariateIntegratesToOne) {
  const auto m = random_model(7, 4);
  std::mt19937_64 rng(5);
  const auto inst = random_instance(rng, 2, 4, 3);
  const double lim = m.config.spline.bound + 10.0;
  for (const auto& marg : predict_univariate_marginals(m, inst)) {
    const double total = integrate_pieces([&](double a) { return std::exp(marg.log_density({&a, 1}).log_joint); },
                                          kink_points(marg, 0, -lim, lim), 1e-8);
    EXPECT_NEAR(total, 1.0, 1e-4);
  }
}

TEST(MosesModel, FullSubsetEqualsJoint) {
  const auto m = random_model(8, 3);
  std::mt19937_64 rng(6);
  const auto inst = random_instance(rng, 2, 3, 3);
  EXPECT_EQ(marginal_log_density(m, inst, {0, 1, 2}).log_joint, log_density(m, inst).log_joint);
}

TEST(MosesModel, MarginalMatchesQuadrature) {
  const auto m = random_model(9, 4);
  std::mt19937_64 rng(7);
  auto inst = random_instance(rng, 2, 4, 2);
  const auto dist = condition(m, inst);
  const double lim = m.config.spline.bound + 10.0;
  for (double y0 : {-2.0, -0.3, 0.4, 1.7}) {
    inst.answer[0] = y0;
    const double direct = std::exp(marginal_log_density(m, inst, {0}).log_joint);
    const double quad = integrate_pieces(
        [&](double b) {
          const double y[2] = {y0, b};
          return std::exp(dist.log_density(y).log_joint);
        },
        kink_points(dist, 1, -lim, lim), 1e-8);
    EXPECT_NEAR(quad, direct, 1e-3 * std::max(direct, 1e-3));
  }
}

TEST(MosesModel, MarginalOfMixtureIsMixtureOfMarginals) {
  const auto m = random_model(10, 4);
  std::mt19937_64 rng(8);
  const auto dist = condition(m, random_instance(rng, 2, 4, 4));
  const auto marg = dist.marginal({2, 0});
  const double y[2] = {0.3, -1.1};
  const auto r = marg.log_density(y);
  for (std::size_t d = 0; d < 4; ++d) {
    const PredictiveDistribution single({0.0}, {dist.component(d)});
    EXPECT_DOUBLE_EQ(r.component_log_density[d], single.marginal({2, 0}).log_density(y).log_joint);
    EXPECT_EQ(r.log_weights[d], dist.log_weights()[d]);
  }
}

TEST(MosesModel, UnivariateEqualsSingletonMarginal) {
  const auto m = random_model(11, 4);
  std::mt19937_64 rng(9);
  const auto inst = random_instance(rng, 2, 4, 3);
  const auto uni = predict_univariate_marginals(m, inst);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(uni[k].log_density({&inst.answer[k], 1}).log_joint, marginal_log_density(m, inst, {k}).log_joint);
  }
}

TEST(MosesModel, SamplerNormality) {
  const auto m = standard_normal_model();
  std::mt19937_64 rng(10);
  const auto dist = condition(m, random_instance(rng, 1, 3, 1));
  double s = 0.0, ss = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double y = dist.sample(rng)[0];
    s += y;
    ss += y * y;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_LT(std::abs(mean), 0.05);
  EXPECT_GT(var, 0.9);
  EXPECT_LT(var, 1.1);
}

TEST(MosesModel, ComponentFrequenciesMatchWeights) {
  const auto m = random_model(12, 3);
  std::mt19937_64 rng(11);
  const auto dist = condition(m, random_instance(rng, 2, 4, 2));
  const auto w = dist.weights();
  std::vector<double> counts(3, 0.0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    std::size_t d = 0;
    dist.sample(rng, &d);
    counts[d] += 1.0;
  }
  for (std::size_t d = 0; d < 3; ++d) EXPECT_LT(std::abs(counts[d] / n - w[d]), 0.02);
}

TEST(MosesModel, SamplingReproducible) {
  const auto m = random_model(13, 2);
  std::mt19937_64 rng(12);
  const auto inst = random_instance(rng, 2, 4, 3);
  std::mt19937_64 a(99), b(99);
  EXPECT_EQ(sample(m, inst, a), sample(m, inst, b));
}

TEST(MosesModel, ConsistencyAuditRandomModels) {
  for (std::size_t k : {2u, 3u}) {
    for (std::size_t d : {1u, 4u}) {
      const auto m = random_model(100 + k * 10 + d, d);
      std::mt19937_64 rng(k * 7 + d);
      const auto dist = condition(m, random_instance(rng, 2, 4, k));
      const auto start = std::chrono::steady_clock::now();
      const auto audit = consistency_audit(dist, 41);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      EXPECT_LT(audit.max_rel_error, 1e-3) << "K=" << k << " D=" << d;
      ASSERT_EQ(audit.variables.size(), k);
      EXPECT_EQ(audit.variables[0].grid.size(), 41u);
      std::cout << "audit K=" << k << " D=" << d << " max_rel=" << audit.max_rel_error << " in " << secs << "s\n";
    }
  }
}

TEST(MosesModel, TapeMatchesValuePath) {
  std::mt19937_64 rng(13);
  for (std::size_t d : {1u, 3u}) {
    const auto m = random_model(20 + d, d);
    for (int trial = 0; trial < 5; ++trial) {
      const auto inst = random_instance(rng, 2, 5, 1 + trial);
      EXPECT_NEAR(tape_log_joint(m, encoder_input(inst)), log_density(m, inst).log_joint, 1e-12);
    }
  }
}

TEST(MosesModel, PaddingInvariance) {
  const auto m = random_model(14, 3);
  std::mt19937_64 rng(14);
  std::vector<TimeSeriesInstance> insts;
  for (std::size_t i = 0; i < 5; ++i) insts.push_back(random_instance(rng, 2, 1 + 2 * i, 1 + (i * 2) % 5));
  const auto batch = make_batches(insts, 5, 0, false).front();
  for (std::size_t b = 0; b < insts.size(); ++b) {
    const double solo = tape_log_joint(m, encoder_input(insts[b]));
    EXPECT_NEAR(tape_log_joint(m, encoder_input(batch, b)), solo, 1e-12);
    EXPECT_NEAR(condition(m, encoder_input(batch, b)).log_density(insts[b].answer).log_joint, solo, 1e-12);
  }
}

TEST(MosesModel, WeightsIndependentOfQueries) {
  const auto m = random_model(15, 4);
  std::mt19937_64 rng(15);
  auto a = random_instance(rng, 2, 4, 2);
  auto b = a;
  const auto other = random_instance(rng, 2, 4, 5);
  b.query = other.query;
  b.answer = other.answer;
  EXPECT_EQ(condition(m, a).log_weights(), condition(m, b).log_weights());
}

TEST(MosesModel, GradientMatchesFiniteDifferences) {
  auto m = random_model(16, 3);
  std::mt19937_64 rng(16);
  const auto in = encoder_input(random_instance(rng, 2, 4, 3));
  Tape t(&m.params);
  Var lj = log_joint(t, m, in);
  t.backward(lj);
  const auto grads = t.parameter_gradients();
  for (const auto& name : m.params.names()) {
    auto& p = m.params.at(name);
    for (int rep = 0; rep < 3; ++rep) {
      const std::size_t i = rng() % p.size();
      const double orig = p[i], h = 1e-6;
      p[i] = orig + h;
      const double up = tape_log_joint(m, in);
      p[i] = orig - h;
      const double dn = tape_log_joint(m, in);
      p[i] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double g = grads.at(name)[i];
      EXPECT_LT(std::abs(fd - g) / std::max(std::abs(g), 1e-3), 1e-4) << name << "[" << i << "] " << g << " vs " << fd;
    }
  }
}

TEST(MosesModel, EmptyContextUsesNullToken) {
  const auto m = random_model(17, 2, 2, true);
  EXPECT_TRUE(m.params.contains("null_token"));
  const TimeSeriesInstance inst{{}, {{1.0, 1}, {1.0, 2}}, {0.5, -0.5}};
  EXPECT_TRUE(std::isfinite(log_density(m, inst).log_joint));
}

TEST(MosesModel, NonFiniteDensityNamesComponent) {
  const auto m = standard_normal_model();
  std::mt19937_64 rng(18);
  auto inst = random_instance(rng, 1, 3, 2);
  inst.answer[1] = 1e200;
  try {
    log_density(m, inst);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("component 0"), std::string::npos) << e.what();
  }
}

TEST(MosesModel, ConfigJsonRoundTrip) {
  ModelConfig c;
  c.components = 4;
  c.spline.bins = 6;
  c.variant.identity_covariance = true;
  const auto back = model_config_from_json(to_json(c));
  EXPECT_EQ(back.components, 4u);
  EXPECT_EQ(back.spline.bins, 6u);
  EXPECT_EQ(back.variant, c.variant);
  auto j = to_json(c);
  j["bogus"] = 1;
  EXPECT_THROW(model_config_from_json(j), ValidationError);
}

TEST(MosesModel, CheckpointRoundTrip) {
  const auto m = random_model(18, 2);
  std::mt19937_64 rng(19);
  const auto in = encoder_input(random_instance(rng, 2, 3, 2));
  Tape t(&m.params);
  t.backward(log_joint(t, m, in));
  Adam opt;
  auto trained = m;
  opt.step(trained.params, t.parameter_gradients());

  const auto dir = std::filesystem::temp_directory_path() / "marconflow_ckpt_test";
  std::filesystem::remove_all(dir);
  CheckpointState st{42, 7, "state", {{"best_epoch", 3}}};
  save_checkpoint(dir, trained, st, &opt);
  CheckpointState back;
  Adam opt2;
  const auto loaded = load_checkpoint(dir, &back, &opt2);
  EXPECT_EQ(loaded.params, trained.params);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.step, 7);
  EXPECT_EQ(back.rng_state, "state");
  EXPECT_EQ(back.extra["best_epoch"], 3);
  EXPECT_EQ(opt2.step_count(), 1);
  EXPECT_EQ(opt2.first_moments(), opt.first_moments());
  EXPECT_EQ(opt2.second_moments(), opt.second_moments());
  std::filesystem::remove_all(dir);
}
