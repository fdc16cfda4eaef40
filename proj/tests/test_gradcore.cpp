#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "marconflow/errors.hpp"
#include "marconflow/parameters.hpp"
#include "marconflow/tape.hpp"

using namespace marconflow;

namespace {

// Central differences of f with respect to every entry of x.
std::vector<double> numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double step = 1e-5) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double hi = f(x);
    x[i] = keep - step;
    const double lo = f(x);
    x[i] = keep;
    out[i] = (hi - lo) / (2 * step);
  }
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Checks the reverse gradient of a unary scalar-valued graph builder.
void check_grad(const std::function<Var(Var)>& build, const Tensor& x0) {
  auto value = [&](const Tensor& x) {
    Tape t;
    return build(t.constant(x)).value().item();
  };
  Tape t;
  Var x = t.variable(x0);
  t.backward(build(x));
  const Tensor g = t.grad(x);
  const auto fd = numeric_grad(value, x0);
  for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_LT(rel_err(g[i], fd[i]), 1e-4) << "entry " << i;
}

}  // namespace

TEST(Forward, MatmulIdentity) {
  Tape t;
  Var a = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var i = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_EQ(matmul(a, i).value(), Tensor::matrix({{1, 2}, {3, 4}}));
}

TEST(Forward, SoftmaxMaskedUniform) {
  Tape t;
  Var x = t.constant(Tensor::vector({0, 0, 0}));
  const Tensor y = softmax_masked(x, {1, 1, 0}).value();
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Forward, SoftmaxMaskedRows) {
  std::mt19937_64 rng(3);
  Tape t;
  Var x = t.constant(random_tensor({4, 5}, rng, -3, 3));
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
  const Tensor y = softmax_masked(x, mask).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      if (!mask[c]) {
        EXPECT_EQ(y(r, c), 0.0);
      }
      s += y(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Forward, SoftmaxFullyMaskedRowRejected) {
  Tape t;
  Var x = t.constant(Tensor::vector({1, 2}));
  EXPECT_THROW(softmax_masked(x, {0, 0}), ContractError);
}

TEST(Forward, LogsumexpSingleElement) {
  Tape t;
  for (double a : {-700.0, -1.5, 0.0, 3.25, 700.0}) EXPECT_DOUBLE_EQ(logsumexp(t.constant(Tensor::vector({a}))).value().item(), a);
}

TEST(Forward, ShapeMismatch) {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{2, 2}));
  EXPECT_THROW(matmul(b, a.tape->constant(Tensor(Shape{3, 2}))), ContractError);
  EXPECT_THROW(add(a, b), ContractError);
}

TEST(Forward, DomainErrors) {
  Tape t;
  EXPECT_THROW(log(t.constant(Tensor::vector({-1.0}))), DomainError);
  EXPECT_THROW(sqrt(t.constant(Tensor::vector({-1.0}))), DomainError);
}

TEST(Forward, NonFiniteNamesOp) {
  Tape t;
  try {
    exp(t.constant(Tensor::vector({1000.0})));
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("exp"), std::string::npos);
  }
}

TEST(Backward, SumOfSquares) {
  Tape t;
  Var x = t.variable(Tensor::vector({1, 2, 3}));
  t.backward(sum(x * x));
  EXPECT_EQ(t.grad(x), Tensor::vector({2, 4, 6}));
}

TEST(Backward, LogsumexpEqualLogits) {
  Tape t;
  Var x = t.variable(Tensor::vector({0, 0}));
  t.backward(logsumexp(x));
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 0.5);
  EXPECT_DOUBLE_EQ(t.grad(x)[1], 0.5);
}

TEST(Backward, LogsumexpTranslationInvariant) {
  std::mt19937_64 rng(5);
  const Tensor x0 = random_tensor({6}, rng);
  Tensor x1 = x0;
  for (auto& v : x1.data()) v += 17.0;
  Tape a, b;
  Var xa = a.variable(x0), xb = b.variable(x1);
  a.backward(logsumexp(xa));
  b.backward(logsumexp(xb));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.grad(xa)[i], b.grad(xb)[i], 1e-15);
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  Var x = t.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(t.backward(x * x), ContractError);
}

TEST(Backward, UnreachedParameterGetsZero) {
  ParameterStore ps;
  ps.add("a", Tensor::vector({1, 2}));
  ps.add("b", Tensor::matrix({{1, 2}, {3, 4}}));
  Tape t(&ps);
  t.backward(sum(t.param("a")));
  const auto g = t.parameter_gradients();
  EXPECT_EQ(g.at("a"), Tensor::vector({1, 1}));
  EXPECT_EQ(g.at("b"), Tensor(Shape{2, 2}, 0.0));
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  ParameterStore ps;
  ps.add("w", Tensor::scalar(3.0));
  Tape t(&ps);
  Var w = t.param("w");
  t.backward(w * w + w);
  EXPECT_DOUBLE_EQ(t.parameter_gradients().at("w").item(), 7.0);
}

TEST(Backward, EveryOpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor v = random_tensor({5}, rng, 0.2, 1.5);
  const Tensor m = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({4, 2}, rng);
  const Tensor row = random_tensor({4}, rng, 0.5, 1.5);

  check_grad([](Var x) { return sum(exp(x)); }, v);
  check_grad([](Var x) { return sum(log(x)); }, v);
  check_grad([](Var x) { return sum(sqrt(x)); }, v);
  check_grad([](Var x) { return sum(sin(x * x)); }, v);
  check_grad([](Var x) { return sum(sigmoid(x) * x); }, v);
  check_grad([](Var x) { return sum(softplus(x) * x); }, v);
  check_grad([](Var x) { return sum(tanh(x) * x); }, v);
  check_grad([](Var x) { return mean(x * x); }, v);
  check_grad([](Var x) { return logsumexp(x * x); }, v);
  check_grad([](Var x) { return sum(scale(x, -2.5) / (x + x * x)); }, v);
  check_grad([](Var x) { return sum(x - x * x); }, v);
  check_grad([&](Var x) { return sum(matmul(x, x.tape->constant(w)) * matmul(x, x.tape->constant(w))); }, m);
  check_grad([&](Var x) { return sum(matmul(transpose(x), x)); }, m);
  check_grad([&](Var x) { return sum(x * x.tape->constant(row)); }, m);
  check_grad([&](Var x) { return sum(x.tape->constant(m) / (x + x)); }, row);
  check_grad(
      [](Var x) {
        Var s = softmax_masked(x, {1, 1, 0, 1});
        return sum(s * s * x);
      },
      m);
  check_grad([](Var x) { return sum(gather(x, 1, {3, 0, 3}) * gather(x, 1, {1, 2, 2})); }, m);
  check_grad([](Var x) { return sum(gather(x, 0, {2, 0}) * gather(x, 0, {1, 1})); }, m);
  check_grad([](Var x) { return sum(gather(x, 0, {4, 0, 4}) * x.tape->constant(Tensor::vector({1, 2, 3}))); }, v);
  check_grad(
      [](Var x) {
        Var c = concat({x, x * x}, 1);
        return sum(c * c * c);
      },
      m);
  check_grad(
      [](Var x) {
        Var c = concat({x, exp(x)}, 0);
        return sum(reshape(c, {2, 12}) * reshape(c, {2, 12}) * reshape(c, {2, 12}));
      },
      m);
  check_grad([](Var x) { return sum(concat({x, sin(x)}, 0) * concat({x, x}, 0)); }, v);
}

TEST(Backward, RandomCompositeGraph) {
  std::mt19937_64 rng(23);
  const Tensor p0 = random_tensor({5}, rng);
  auto build = [](Var p) {
    Tape& t = *p.tape;
    Var a = gather(p, 0, {0, 1});
    Var b = gather(p, 0, {2, 3, 4});
    Var m = reshape(concat({a, b, a, b}, 0), {2, 5});
    Var h = tanh(matmul(m, transpose(m)));
    Var z = softplus(sum(h * h)) + logsumexp(concat({sin(b), exp(a)}, 0));
    return z / (t.constant(Tensor::scalar(1.0)) + sigmoid(mean(p)));
  };
  check_grad(build, p0);
}

TEST(Determinism, BitIdenticalRuns) {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tape t;
    Var x = t.variable(random_tensor({3, 3}, rng));
    Var y = softmax_masked(matmul(x, transpose(x)), {1, 1, 1});
    t.backward(logsumexp(y * x));
    return std::pair{y.value(), t.grad(x)};
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterStore ps;
  ps.add("x", Tensor::vector({1.5, -2}));
  Adam opt;
  opt.step(ps, {{"x", Tensor::vector({0, 0})}});
  EXPECT_EQ(ps.at("x"), Tensor::vector({1.5, -2}));
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, Defaults) {
  AdamConfig c;
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.eps, 1e-8);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParameterStore ps;
  ps.add("x", Tensor::scalar(0.0));
  Adam opt(AdamConfig{.lr = 0.01});
  for (int i = 0; i < 5000; ++i) {
    Tape t(&ps);
    Var d = t.param("x") - t.constant(Tensor::scalar(3.0));
    t.backward(d * d);
    opt.step(ps, t.parameter_gradients());
  }
  EXPECT_LT(std::abs(ps.at("x").item() - 3.0), 1e-3);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterStore ps;
  ps.add("alpha", Tensor::scalar(0.0));
  Adam opt;
  try {
    opt.step(ps, {{"alpha", Tensor::scalar(std::nan(""))}});
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("alpha"), std::string::npos);
  }
}

TEST(Archive, RoundTrip) {
  std::map<std::string, Tensor> m{{"a", Tensor::matrix({{1, 2}, {3, 4.5}})}, {"b", Tensor::scalar(-0.125)}};
  const auto path = std::filesystem::temp_directory_path() / "marconflow_archive_test.bin";
  write_tensor_archive(path, m);
  EXPECT_EQ(read_tensor_archive(path), m);
  std::filesystem::remove(path);
}
