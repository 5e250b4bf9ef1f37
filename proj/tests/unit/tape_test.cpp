#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mdml/errors.hpp"
#include "mdml/gradcheck.hpp"
#include "mdml/tape.hpp"
#include "support/fixtures.hpp"

namespace mdml {
namespace {

using test::central_difference;
using test::random_matrix;
using test::rel_error;

TEST(ValueMatrix, IdentityAndGather) {
  const ValueMatrix m = random_matrix(3, 4, 1);
  Tape tape;
  Var out = tape.matmul(tape.constant(ValueMatrix::identity(3)), tape.constant(m));
  EXPECT_EQ(tape.value(out), m);

  const std::vector<std::size_t> idx{2, 0};
  const ValueMatrix g = m.gather_rows(idx);
  ASSERT_EQ(g.rows(), 2u);
  EXPECT_EQ(g(0, 3), m(2, 3));
  EXPECT_EQ(g(1, 1), m(0, 1));
  EXPECT_THROW(m.gather_rows(std::vector<std::size_t>{3}), DimensionError);
  EXPECT_THROW(ValueMatrix(2, 2, std::vector<double>{1.0}), DimensionError);
}

TEST(ValueMatrix, RequireFinite) {
  ValueMatrix m(2, 2, 1.0);
  EXPECT_NO_THROW(require_finite(m, "m"));
  m(1, 0) = std::nan("");
  EXPECT_THROW(require_finite(m, "m"), DivergenceError);
}

TEST(Matmul, SmallProduct) {
  Tape tape;
  Var a = tape.constant(ValueMatrix::from_rows({{1, 2}, {3, 4}}));
  Var b = tape.constant(ValueMatrix::from_rows({{1}, {1}}));
  EXPECT_EQ(tape.value(tape.matmul(a, b)), ValueMatrix::from_rows({{3}, {7}}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  const ValueMatrix a = random_matrix(4, 5, 2);
  const ValueMatrix b = random_matrix(5, 2, 3);
  Tape tape;
  Var av = tape.input(a, true);
  Var out = tape.sum(tape.matmul(av, tape.constant(b)));
  tape.backward(out);
  const ValueMatrix& g = tape.grad(av);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 5; ++k) {
      const double expected = b(k, 0) + b(k, 1);
      EXPECT_LT(rel_error(g(i, k), expected), 1e-12);
    }
  }
  ValueMatrix probe = a;
  auto f = [&] {
    Tape t;
    return t.scalar(t.sum(t.matmul(t.constant(probe), t.constant(b))));
  };
  for (std::size_t i = 0; i < probe.size(); ++i) {
    EXPECT_LT(rel_error(g.data()[i], central_difference(probe.data()[i], f)), 1e-6);
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(tape.matmul(tape.constant(ValueMatrix(2, 3)), tape.constant(ValueMatrix(2, 3))), DimensionError);
  EXPECT_THROW(tape.add(tape.constant(ValueMatrix(2, 3)), tape.constant(ValueMatrix(3, 2))), DimensionError);
}

TEST(Gelu, ReferenceValues) {
  EXPECT_EQ(gelu_value(0.0), 0.0);
  EXPECT_NEAR(gelu_value(10.0), 10.0, 1e-6);
  // x * Phi(x) with Phi written through erfc to avoid sharing the forward path.
  const double phi1 = 0.5 * std::erfc(-1.0 / std::numbers::sqrt2);
  EXPECT_NEAR(gelu_value(1.0), phi1, 1e-12);
  EXPECT_NEAR(gelu_value(1.0), 0.841345, 1e-5);
  EXPECT_NEAR(gelu_value(-3.0), -3.0 * 0.5 * std::erfc(3.0 / std::numbers::sqrt2), 1e-12);
}

TEST(Gelu, DerivativeMatchesDifferences) {
  for (double x : {-4.0, -1.3, -0.2, 0.0, 0.7, 2.5}) {
    const double numeric = (gelu_value(x + 1e-6) - gelu_value(x - 1e-6)) / 2e-6;
    EXPECT_LT(rel_error(gelu_derivative(x), numeric), 1e-6) << x;
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tape tape;
  Var x = tape.constant(ValueMatrix::from_rows({{2.5, 2.5, 2.5}}));
  Var y = tape.layer_norm(x, tape.constant(ValueMatrix(1, 3, 1.0)), tape.constant(ValueMatrix(1, 3, 0.0)));
  for (double v : tape.value(y).data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitRowIsAlmostUnchanged) {
  Tape tape;
  Var x = tape.constant(ValueMatrix::from_rows({{1.0, -1.0}}));
  Var y = tape.layer_norm(x, tape.constant(ValueMatrix(1, 2, 1.0)), tape.constant(ValueMatrix(1, 2, 0.0)), 1e-12);
  EXPECT_NEAR(tape.value(y)(0, 0), 1.0, 1e-10);
  EXPECT_NEAR(tape.value(y)(0, 1), -1.0, 1e-10);
}

TEST(LayerNorm, GradientMatchesDifferences) {
  ValueMatrix x = random_matrix(2, 6, 4);
  const ValueMatrix gain = random_matrix(1, 6, 5);
  const ValueMatrix bias = random_matrix(1, 6, 6);
  auto build = [&](Tape& t, Var xv) {
    Var y = t.layer_norm(xv, t.constant(gain), t.constant(bias));
    return t.sum(t.matmul(t.exp(t.scale(y, 0.3)), t.constant(ValueMatrix(6, 1, 1.0))));
  };
  Tape tape;
  Var xv = tape.input(x, true);
  tape.backward(build(tape, xv));
  const ValueMatrix g = tape.grad(xv);
  auto f = [&] {
    Tape t;
    return t.scalar(build(t, t.constant(x)));
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(rel_error(g.data()[i], central_difference(x.data()[i], f)), 1e-5) << i;
  }
}

TEST(SoftmaxTemp, ReferenceValues) {
  auto probs = [](double a, double b, double t) {
    Tape tape;
    Var s = tape.softmax_temp(tape.constant(ValueMatrix::from_rows({{a, b}})), tape.constant(t));
    return std::pair{tape.value(s)(0, 0), tape.value(s)(0, 1)};
  };
  auto [p0, p1] = probs(0.0, 0.0, 1.0);
  EXPECT_EQ(p0, 0.5);
  EXPECT_EQ(p1, 0.5);
  std::tie(p0, p1) = probs(std::log(2.0), 0.0, 1.0);
  EXPECT_NEAR(p0, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p1, 1.0 / 3.0, 1e-15);
  std::tie(p0, p1) = probs(2.0, 0.0, 1000.0);
  EXPECT_NEAR(p0, 0.5, 1e-3);
  EXPECT_NEAR(p1, 0.5, 1e-3);
  // Large logits stay finite.
  std::tie(p0, p1) = probs(800.0, -800.0, 1.0);
  EXPECT_EQ(p0, 1.0);
  EXPECT_EQ(p1, 0.0);
}

TEST(SoftmaxTemp, RejectsNonPositiveTemperature) {
  Tape tape;
  Var l = tape.constant(ValueMatrix::from_rows({{1.0, 0.0}}));
  EXPECT_THROW(tape.softmax_temp(l, tape.constant(0.0)), ParameterError);
  EXPECT_THROW(tape.softmax_temp(l, tape.constant(-1.0)), ParameterError);
}

TEST(Bce, ReferenceValues) {
  EXPECT_LE(bce(1.0, 1), 1e-6);
  EXPECT_NEAR(bce(0.5, 0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce(0.5, 1), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce(0.9, 0), std::log(10.0), 1e-12);
  EXPECT_TRUE(std::isfinite(bce(0.0, 1)));
  EXPECT_THROW(bce(0.5, 2), ParameterError);
}

TEST(Backward, SumOfParametersGivesUnitGradients) {
  Parameter a("a", random_matrix(2, 3, 8));
  Parameter b("b", random_matrix(1, 1, 9));
  Parameter unused("unused", random_matrix(2, 2, 10));
  Tape tape;
  Var loss = tape.add(tape.sum(tape.parameter(a)), tape.sum(tape.parameter(b)));
  tape.parameter(unused);
  tape.backward(loss);
  for (double g : a.grad.data()) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(b.grad(0, 0), 1.0);
  for (double g : unused.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, FanOutAccumulates) {
  Parameter a("a", ValueMatrix::from_rows({{1.5}}));
  Tape tape;
  Var x = tape.parameter(a);
  tape.backward(tape.sum(tape.add(x, tape.scale(x, 3.0))));
  EXPECT_EQ(a.grad(0, 0), 4.0);
}

TEST(Backward, ContractViolations) {
  Tape tape;
  Var m = tape.input(ValueMatrix(2, 2, 1.0), true);
  EXPECT_THROW(tape.backward(m), UsageError);
  Var s = tape.sum(m);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), UsageError);
  EXPECT_THROW(tape.constant(1.0), UsageError);
  EXPECT_THROW(tape.value(Var{}), UsageError);
}

TEST(Backward, FrozenLeafReceivesNothing) {
  Parameter p("p", random_matrix(3, 2, 11));
  const Parameter& cp = p;
  Tape tape;
  Var x = tape.input(random_matrix(4, 3, 12), true);
  tape.backward(tape.sum(tape.matmul(x, tape.parameter(cp))));
  for (double g : p.grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Gradcheck, SuitePassesAndCoversEnoughCoordinates) {
  const GradcheckReport report = run_gradcheck();
  EXPECT_TRUE(report.passed()) << format_gradcheck_report(report);
  ASSERT_FALSE(report.entries.empty());
  for (const auto& e : report.entries) {
    EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
  }
}

TEST(Gradcheck, DetectsFlippedGeluBackward) {
  testing::set_gelu_backward_sign_flip(true);
  const GradcheckReport report = run_gradcheck();
  testing::set_gelu_backward_sign_flip(false);
  EXPECT_FALSE(report.passed());
  EXPECT_TRUE(run_gradcheck().passed());
}

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_EQ(gradcheck_relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(gradcheck_relative_error(1e-9, 0.0), 1e-9 / 1e-7, 1e-15);
  EXPECT_NEAR(gradcheck_relative_error(2.0, 1.0), 0.5, 1e-15);
}

}  // namespace
}  // namespace mdml
