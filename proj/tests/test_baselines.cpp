#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>

#include "marconflow/baselines.hpp"
#include "marconflow/errors.hpp"
#include "marconflow/metrics.hpp"
#include "support/random_models.hpp"

using namespace marconflow;
using marconflow::testing::random_instance;
using marconflow::testing::randomize;

namespace {

ModelConfig base_config(std::size_t components) {
  ModelConfig cfg;
  cfg.components = components;
  cfg.latent = 8;
  cfg.time_features = 4;
  cfg.cov_rank = 3;
  cfg.channels = 2;
  return cfg;
}

MosesModel random_variant(const std::string& name, std::size_t components, std::uint64_t seed) {
  auto m = build_variant(base_config(components), VariantSpec::parse(name), seed);
  randomize(m, seed + 77);
  return m;
}

// log of a Gaussian mixture with covariances I + s F F^T, evaluated densely.
double dense_mixture(const PredictiveDistribution& dist, const std::vector<double>& y) {
  const std::size_t k = y.size();
  Eigen::VectorXd yy = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(k));
  double total = 0.0;
  const auto w = dist.weights();
  for (std::size_t d = 0; d < dist.n_components(); ++d) {
    const auto& g = dist.component(d).base;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Identity(k, k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t p = 0; p < g.rank(); ++p) cov(i, j) += g.scale * g.factor(i, p) * g.factor(j, p);
    Eigen::VectorXd r = yy - Eigen::Map<const Eigen::VectorXd>(g.mean.data(), static_cast<Eigen::Index>(k));
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::MatrixXd l = llt.matrixL();
    const double logdet = 2.0 * l.diagonal().array().log().sum();
    const double q = r.dot(llt.solve(r));
    total += w[d] * std::exp(-0.5 * (static_cast<double>(k) * std::log(2.0 * std::numbers::pi) + logdet + q));
  }
  return std::log(total);
}

}  // namespace

TEST(Baselines, ParseAndName) {
  EXPECT_EQ(VariantSpec::parse("gmm").name(), "gmm");
  EXPECT_TRUE(VariantSpec::parse("gmm").flags.disable_flows);
  EXPECT_TRUE(VariantSpec::parse("moses-sigma").flags.identity_covariance);
  EXPECT_TRUE(VariantSpec::parse("moses-w").flags.uniform_weights);
  EXPECT_TRUE(VariantSpec::parse("moses1").flags.single_component);
  EXPECT_EQ(VariantSpec::parse("moses").flags, VariantFlags{});
  const auto both = VariantSpec::parse("moses1+gmm");
  EXPECT_TRUE(both.flags.disable_flows && both.flags.single_component);
  EXPECT_EQ(both.name(), "gmm+moses1");
  for (const auto& n : VariantSpec::known_names()) EXPECT_EQ(VariantSpec::parse(n).name(), n);
  EXPECT_THROW(VariantSpec::parse("profiti"), ValidationError);
  EXPECT_THROW(VariantSpec::parse(""), ValidationError);
}

TEST(Baselines, SingleComponentForcesOneComponent) {
  const auto m = build_variant(base_config(4), VariantSpec::parse("moses1"), 1);
  EXPECT_EQ(m.config.components, 1u);
}

TEST(Baselines, DiagonalGaussianRegression) {
  auto m = random_variant("gmm+moses-sigma+moses1", 1, 3);
  EXPECT_FALSE(m.params.contains("gauss.cov"));
  EXPECT_FALSE(m.params.contains("flow.w"));
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 5; ++rep) {
    const auto inst = random_instance(rng, 2, 4, 3);
    const auto dist = condition(m, inst);
    const auto& mu = dist.component(0).base.mean;
    double closed = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double r = inst.answer[k] - mu[k];
      closed += -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * r * r;
    }
    EXPECT_NEAR(log_density(m, inst).log_joint, closed, 1e-12);
  }
}

TEST(Baselines, GmmMatchesDenseMixtureOracle) {
  std::mt19937_64 rng(5);
  for (std::size_t comps : {1u, 2u, 4u}) {
    const auto m = random_variant("gmm", comps, 10 + comps);
    for (std::size_t kq = 1; kq <= 3; ++kq) {
      for (int rep = 0; rep < 4; ++rep) {
        const auto inst = random_instance(rng, 2, 3, kq);
        const auto dist = condition(m, inst);
        EXPECT_TRUE(dist.component(0).knots.empty());
        EXPECT_NEAR(log_density(m, inst).log_joint, dense_mixture(dist, inst.answer), 1e-9);
      }
    }
  }
}

TEST(Baselines, UniformWeightsIgnoreContext) {
  const auto m = random_variant("moses-w", 4, 6);
  EXPECT_FALSE(m.params.contains("beta"));
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    const auto dist = condition(m, random_instance(rng, 2, 1 + rep, 2));
    for (double w : dist.weights()) EXPECT_NEAR(w, 0.25, 1e-15);
  }
}

TEST(Baselines, IdentityCovarianceHasNoFactor) {
  const auto m = random_variant("moses-sigma", 2, 8);
  std::mt19937_64 rng(9);
  const auto dist = condition(m, random_instance(rng, 2, 3, 3));
  const Tensor cov = dist.component(1).base.dense_covariance();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(cov(i, j), i == j ? 1.0 : 0.0);
}

TEST(Baselines, EveryVariantPassesTheAudit) {
  std::mt19937_64 rng(10);
  for (const auto& name : VariantSpec::known_names()) {
    const auto m = random_variant(name, 3, 20);
    for (std::size_t kq : {2u, 3u}) {
      const auto res = consistency_audit(condition(m, random_instance(rng, 2, 3, kq)));
      EXPECT_LT(res.max_rel_error, 1e-6) << name << " K=" << kq;
    }
  }
}
