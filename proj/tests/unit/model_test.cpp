#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "mdml/checkpoint.hpp"
#include "mdml/errors.hpp"
#include "mdml/model.hpp"
#include "mdml/optimizer.hpp"
#include "support/fixtures.hpp"

namespace mdml {
namespace {

using test::central_difference;
using test::random_matrix;
using test::rel_error;

ModelState tiny_model(std::uint64_t seed = 3) { return ModelState::initialize(test::small_model(5), seed); }

void zero_linear(Linear& l) {
  l.weight.value.fill(0.0);
  l.bias.value.fill(0.0);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = test::small_model(5);
  EXPECT_NO_THROW(c.validate());
  c.input_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::small_model(5);
  c.latent_dim = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelState, GroupsPartitionParameters) {
  ModelState s = tiny_model();
  std::set<const Parameter*> seen;
  std::size_t total = 0;
  for (auto g : {ParamGroup::kThetaEncoder, ParamGroup::kThetaDecoder, ParamGroup::kPhi, ParamGroup::kTemperature}) {
    for (Parameter* p : s.parameters(g)) {
      EXPECT_TRUE(seen.insert(p).second) << p->name;
      total += p->value.size();
    }
  }
  EXPECT_EQ(seen.size(), s.all_parameters().size());
  EXPECT_EQ(total, s.parameter_count());
  EXPECT_EQ(s.temperature(), 1.0);
  EXPECT_NE(s.find("head.logits.weight"), nullptr);
  EXPECT_EQ(s.find("nope"), nullptr);
}

TEST(ModelState, InitializationIsSeeded) {
  ModelState a = tiny_model(7);
  ModelState b = tiny_model(7);
  ModelState c = tiny_model(8);
  EXPECT_EQ(a.theta_digest(), b.theta_digest());
  EXPECT_NE(a.theta_digest(), c.theta_digest());
}

TEST(Encoder, ZeroTailGivesZeroLatent) {
  ModelState s = tiny_model();
  zero_linear(s.encoder.bottleneck);
  const ValueMatrix z = encode(random_matrix(8, 5, 1), s);
  ASSERT_EQ(z.rows(), 8u);
  ASSERT_EQ(z.cols(), 16u);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, InputGradientMatchesDifferences) {
  ModelState s = tiny_model();
  ValueMatrix x = random_matrix(3, 5, 2);
  Tape tape;
  Var xv = tape.input(x, true);
  tape.backward(tape.sum(encode(tape, xv, s)));
  const ValueMatrix g = tape.grad(xv);
  auto f = [&] {
    double total = 0.0;
    const ValueMatrix z = encode(x, s);
    for (double v : z.data()) total += v;
    return total;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_LT(rel_error(g.data()[i], central_difference(x.data()[i], f)), 1e-4) << i;
  }
}

TEST(Decoder, ShapesAndZeroOutput) {
  ModelState s = tiny_model();
  const ValueMatrix x = random_matrix(6, 5, 3);
  const ValueMatrix x_hat = decode(encode(x, s), s);
  EXPECT_TRUE(x_hat.same_shape(x));
  zero_linear(s.decoder.output);
  const ValueMatrix zeros = decode(ValueMatrix(4, 16), s);
  for (double v : zeros.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(decode(ValueMatrix(4, 3), s), DimensionError);
}

TEST(Head, ZeroLogitsGiveHalf) {
  ModelState s = tiny_model();
  zero_linear(s.head.logits);
  const ValueMatrix x = random_matrix(9, 5, 4);
  const ValueMatrix l = logits(x, s);
  ASSERT_EQ(l.rows(), 9u);
  ASSERT_EQ(l.cols(), 2u);
  for (double v : l.data()) EXPECT_EQ(v, 0.0);
  for (double c : normal_confidence(x, s)) EXPECT_EQ(c, 0.5);
  for (double a : anomaly_score(x, s)) EXPECT_EQ(a, 0.5);
}

TEST(Head, PhiGradientMatchesDifferences) {
  ModelState s = tiny_model();
  const ValueMatrix z = random_matrix(4, 16, 5);
  const ValueMatrix w = random_matrix(2, 1, 6);
  auto loss = [&](Tape& t) { return t.sum(t.matmul(classify(t, t.constant(z), s), t.constant(w))); };
  s.zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  for (Parameter* p : s.phi()) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      auto f = [&] {
        Tape t;
        return t.scalar(loss(t));
      };
      EXPECT_LT(rel_error(p->grad.data()[i], central_difference(p->value.data()[i], f)), 1e-4) << p->name;
    }
  }
}

TEST(Scoring, ReferenceValues) {
  EXPECT_EQ(normal_confidence_from_logits(0.0, 0.0, 1.0), 0.5);
  EXPECT_EQ(normal_confidence_from_logits(0.0, 0.0, 37.0), 0.5);
  EXPECT_NEAR(normal_confidence_from_logits(std::log(3.0), 0.0, 1.0), 0.75, 1e-15);
  EXPECT_NEAR(normal_confidence_from_logits(1.0, 0.0, 2.0), 1.0 / (1.0 + std::exp(-0.5)), 1e-15);
  EXPECT_NEAR(normal_confidence_from_logits(1.0, 0.0, 2.0), 0.622459, 1e-6);
  EXPECT_NEAR(1.0 - normal_confidence_from_logits(std::log(3.0), 0.0, 1.0), 0.25, 1e-15);
  EXPECT_THROW(normal_confidence_from_logits(1.0, 0.0, 0.0), ParameterError);
  double prev = 1.0;
  for (double l0 = -5.0; l0 <= 5.0; l0 += 0.5) {
    const double s = 1.0 - normal_confidence_from_logits(l0, 0.3, 1.0);
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(Scoring, PredictedLabel) {
  const std::vector<double> a{2.0, 1.0};
  const std::vector<double> b{1.0, 2.0};
  EXPECT_EQ(argmax_label(a), kNormalIndex);
  EXPECT_EQ(argmax_label(b), kAnomalyIndex);
  ModelState s = tiny_model();
  const ValueMatrix x = random_matrix(50, 5, 9, 3.0);
  const auto base = predicted_label(x, s);
  for (double t : {0.01, 0.5, 4.0, 500.0}) {
    s.set_temperature(t);
    EXPECT_EQ(predicted_label(x, s), base);
  }
  EXPECT_THROW(s.set_temperature(0.0), ParameterError);
}

TEST(Scoring, ThreadCountDoesNotChangeResults) {
  ModelState s = tiny_model();
  const ValueMatrix x = random_matrix(700, 5, 10);
  ScoringOptions one{1, 64};
  ScoringOptions four{4, 64};
  EXPECT_EQ(anomaly_score(x, s, one), anomaly_score(x, s, four));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ModelState s = tiny_model(12);
  s.set_temperature(1.7320508075688772);
  s.head.logits.bias.value(0, 1) = 1.0 / 3.0;
  std::stringstream buf;
  write_checkpoint(buf, s, {"abc123"});
  CheckpointInfo info;
  ModelState r = read_checkpoint(buf, &info);
  EXPECT_EQ(info.config_digest, "abc123");
  EXPECT_EQ(r.config(), s.config());
  EXPECT_EQ(r.seed(), s.seed());
  auto ps = s.all_parameters();
  auto pr = r.all_parameters();
  ASSERT_EQ(ps.size(), pr.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(ps[i]->name, pr[i]->name);
    EXPECT_EQ(ps[i]->value, pr[i]->value) << ps[i]->name;
  }
}

TEST(Checkpoint, RejectsDamagedInput) {
  std::stringstream empty("garbage\n");
  EXPECT_THROW(read_checkpoint(empty), DataError);
  std::stringstream buf;
  write_checkpoint(buf, tiny_model());
  const std::string text = buf.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(read_checkpoint(truncated), DataError);
}

TEST(Optimizer, SgdStep) {
  Parameter p("p", ValueMatrix::from_rows({{1.0, -2.0}}));
  p.grad = ValueMatrix::from_rows({{0.5, -1.0}});
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::kSgd;
  std::vector<Parameter*> ps{&p};
  apply_update(ps, 0.1, cfg);
  EXPECT_DOUBLE_EQ(p.value(0, 0), 0.95);
  EXPECT_DOUBLE_EQ(p.value(0, 1), -1.9);
  EXPECT_THROW(apply_update(ps, 0.0, cfg), ParameterError);
}

TEST(Optimizer, AdamFirstStepHasLearningRateMagnitude) {
  // With bias correction, the first step is lr * g / (|g| + eps').
  Parameter p("p", ValueMatrix::from_rows({{0.0, 0.0, 0.0}}));
  p.grad = ValueMatrix::from_rows({{3.0, -0.25, 0.0}});
  std::vector<Parameter*> ps{&p};
  apply_update(ps, 0.01, OptimizerConfig{});
  EXPECT_NEAR(p.value(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.value(0, 1), 0.01, 1e-9);
  EXPECT_EQ(p.value(0, 2), 0.0);
  EXPECT_EQ(p.steps, 1u);
  reset_optimizer_state(ps);
  EXPECT_EQ(p.steps, 0u);
  for (double v : p.moment1.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.moment2.data()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(p.value(0, 0), -0.01, 1e-9);
}

}  // namespace
}  // namespace mdml
