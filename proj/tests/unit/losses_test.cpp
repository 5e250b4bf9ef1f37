#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mdml/errors.hpp"
#include "mdml/losses.hpp"
#include "support/fixtures.hpp"

namespace mdml {
namespace {

using test::central_difference;
using test::random_matrix;
using test::rel_error;

constexpr double kLn2 = std::numbers::ln2;

ModelState model(std::uint64_t seed = 5) { return ModelState::initialize(test::small_model(4), seed); }

void force_head(ModelState& s, double normal_logit, double anomaly_logit) {
  s.head.logits.weight.value.fill(0.0);
  s.head.logits.bias.value(0, 0) = normal_logit;
  s.head.logits.bias.value(0, 1) = anomaly_logit;
}

double direct_reconstruction(const ValueMatrix& x, const ValueMatrix& xh, const std::vector<double>& var) {
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double d = xh(r, c) - x(r, c);
      total += d * d / var[c];
    }
  }
  return total / static_cast<double>(x.size());
}

TEST(Reconstruction, ReferenceValues) {
  const ValueMatrix x = random_matrix(5, 3, 1);
  const std::vector<double> ones(3, 1.0);
  EXPECT_EQ(reconstruction_loss(x, x, ones), 0.0);
  ValueMatrix shifted = x;
  for (double& v : shifted.data()) v += 1.0;
  EXPECT_NEAR(reconstruction_loss(x, shifted, ones), 1.0, 1e-12);
  const ValueMatrix xh = random_matrix(5, 3, 2);
  const std::vector<double> var{0.5, 2.0, 3.25};
  EXPECT_NEAR(reconstruction_loss(x, xh, var), direct_reconstruction(x, xh, var), 1e-12);
  EXPECT_THROW(reconstruction_loss(x, xh, std::vector<double>{1.0, 1.0}), DimensionError);
}

TEST(Reconstruction, VarianceFloor) {
  const auto v = floor_variance(std::vector<double>{0.0, 1e-12, 2.0});
  EXPECT_EQ(v[0], kVarianceFloor);
  EXPECT_EQ(v[1], kVarianceFloor);
  EXPECT_EQ(v[2], 2.0);
  EXPECT_THROW(floor_variance(std::vector<double>{-1.0}), ParameterError);
}

TEST(InnerLoss, SaturatedHeadIsNearZero) {
  ModelState s = model();
  force_head(s, 30.0, -30.0);
  InnerLossConfig cfg;
  cfg.lambda_rec = 0.0;
  Tape tape;
  auto terms = inner_loss(tape, random_matrix(10, 4, 3), s, cfg, std::vector<double>(4, 1.0));
  EXPECT_LE(tape.scalar(terms.total), 1e-6);
}

TEST(InnerLoss, SymmetricHeadGivesLn2) {
  ModelState s = model();
  force_head(s, 0.0, 0.0);
  InnerLossConfig cfg;
  cfg.lambda_rec = 0.0;
  Tape tape;
  auto terms = inner_loss(tape, random_matrix(10, 4, 4), s, cfg, std::vector<double>(4, 1.0));
  EXPECT_NEAR(tape.scalar(terms.total), kLn2, 1e-15);
}

TEST(InnerLoss, IgnoresLiveTemperatureByDefault) {
  ModelState s = model();
  const ValueMatrix x = random_matrix(10, 4, 5);
  const std::vector<double> var(4, 1.0);
  InnerLossConfig cfg;
  Tape a;
  const double before = a.scalar(inner_loss(a, x, s, cfg, var).total);
  s.set_temperature(7.0);
  Tape b;
  EXPECT_EQ(b.scalar(inner_loss(b, x, s, cfg, var).total), before);
  cfg.learn_temperature = true;
  Tape c;
  EXPECT_NE(c.scalar(inner_loss(c, x, s, cfg, var).total), before);
}

TEST(InnerLoss, ComposesBceAndReconstruction) {
  ModelState s = model();
  const ValueMatrix x = random_matrix(7, 4, 6);
  const std::vector<double> var{1.0, 0.5, 2.0, 1.5};
  InnerLossConfig cfg;
  cfg.lambda_rec = 0.25;
  Tape tape;
  auto terms = inner_loss(tape, x, s, cfg, var);
  const double rec = direct_reconstruction(x, decode(encode(x, s), s), var);
  EXPECT_NEAR(tape.scalar(terms.reconstruction), rec, 1e-12);
  double bce_sum = 0.0;
  for (double p : normal_confidence(x, s)) bce_sum += -std::log(std::clamp(p, kBceClamp, 1.0 - kBceClamp));
  EXPECT_NEAR(tape.scalar(terms.bce), bce_sum / 7.0, 1e-12);
  EXPECT_NEAR(tape.scalar(terms.total), bce_sum / 7.0 + 0.25 * rec, 1e-12);
}

TEST(InnerLoss, GradientMatchesDifferences) {
  ModelState s = model();
  const ValueMatrix x = random_matrix(6, 4, 7);
  const std::vector<double> var{1.0, 0.5, 2.0, 1.5};
  InnerLossConfig cfg;
  cfg.lambda_rec = 0.5;
  s.zero_grad();
  {
    Tape tape;
    tape.backward(inner_loss(tape, x, s, cfg, var).total);
  }
  auto f = [&] {
    Tape t;
    return t.scalar(inner_loss(t, x, s, cfg, var).total);
  };
  std::size_t checked = 0;
  for (Parameter* p : s.all_parameters()) {
    if (p == &s.log_temperature) continue;
    // Every third entry keeps the run short while touching every buffer.
    for (std::size_t i = 0; i < p->value.size(); i += 3) {
      EXPECT_LT(rel_error(p->grad.data()[i], central_difference(p->value.data()[i], f)), 1e-4) << p->name;
      ++checked;
    }
  }
  EXPECT_GE(checked, 50u);
}

TEST(MarginGap, ReferenceValues) {
  const std::vector<double> ones{1.0, 1.0};
  const std::vector<double> zeros{0.0, 0.0};
  EXPECT_EQ(margin_gap(ones, zeros), 1.0);
  const std::vector<double> same{0.3, 0.9, 0.4};
  EXPECT_EQ(margin_gap(same, same), 0.0);
  EXPECT_NEAR(margin_gap(std::vector<double>{0.8, 0.6}, std::vector<double>{0.3, 0.1}), 0.5, 1e-15);
  EXPECT_THROW(margin_gap(std::vector<double>{}, ones), UsageError);
}

TEST(MarginHinge, ReferenceValues) {
  EXPECT_EQ(margin_hinge(0.6, 0.5), 0.0);
  EXPECT_NEAR(margin_hinge(0.2, 0.5), 0.3, 1e-15);
  EXPECT_NEAR(margin_hinge(-0.1, 0.05), 0.15, 1e-15);
  EXPECT_EQ(margin_hinge(0.5, 0.5), 0.0);
  EXPECT_THROW(margin_hinge(0.1, 0.0), ParameterError);
}

TEST(OuterLossConfig, Presets) {
  EXPECT_EQ(OuterLossConfig::ablation_preset().margin_m, 0.5);
  EXPECT_EQ(OuterLossConfig::ablation_preset().alpha, 0.1);
  EXPECT_EQ(OuterLossConfig::training_strategy_preset().margin_m, 0.05);
  OuterLossConfig bad;
  bad.alpha = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(OuterLoss, RequiresFrozenTheta) {
  ModelState s = model();
  Tape tape;
  EXPECT_THROW(outer_loss(tape, random_matrix(2, 4, 1), random_matrix(2, 4, 2), s, {}), InvariantError);
}

TEST(OuterLoss, PerfectCalibrationIsNearZero) {
  ModelState s = model();
  s.set_theta_frozen(true);
  // The head's layer norm makes latents O(1); a large weight on one latent
  // coordinate drives the two query halves apart.
  const ValueMatrix id = random_matrix(5, 16, 8);
  ValueMatrix ood = random_matrix(5, 16, 9);
  ValueMatrix id_shift = id;
  for (std::size_t r = 0; r < 5; ++r) {
    id_shift(r, 0) = 50.0;
    ood(r, 0) = -50.0;
  }
  s.head.logits.weight.value.fill(0.0);
  s.head.logits.bias.value.fill(0.0);
  s.head.logits.weight.value(0, 0) = 100.0;
  s.head.logits.weight.value(0, 1) = -100.0;
  Tape tape;
  auto terms = outer_loss_from_latent(tape, id_shift, ood, s, {});
  EXPECT_NEAR(tape.scalar(terms.gap), 1.0, 1e-9);
  EXPECT_LE(tape.scalar(terms.total), 1e-5);
}

TEST(OuterLoss, SymmetricHeadValue) {
  ModelState s = model();
  force_head(s, 0.0, 0.0);
  s.set_theta_frozen(true);
  OuterLossConfig cfg;
  Tape tape;
  auto terms = outer_loss(tape, random_matrix(4, 4, 10), random_matrix(6, 4, 11), s, cfg);
  EXPECT_EQ(tape.scalar(terms.id_bce), kLn2);
  EXPECT_EQ(tape.scalar(terms.ood_bce), kLn2);
  EXPECT_EQ(tape.scalar(terms.gap), 0.0);
  EXPECT_NEAR(tape.scalar(terms.total), 2.0 * kLn2 + cfg.alpha * cfg.margin_m, 1e-15);
}

TEST(MetaGradient, MatchesDifferencesAndLeavesThetaUntouched) {
  ModelState s = model();
  s.set_temperature(1.3);
  s.set_theta_frozen(true);
  const ValueMatrix id = random_matrix(5, 4, 12);
  const ValueMatrix ood = random_matrix(5, 4, 13, 2.0);
  OuterLossConfig cfg;
  cfg.alpha = 0.7;
  s.zero_grad();
  {
    Tape tape;
    meta_gradient(tape, outer_loss(tape, id, ood, s, cfg), s);
  }
  for (Parameter* p : s.theta()) {
    for (double g : p->grad.data()) ASSERT_EQ(g, 0.0) << p->name;
  }
  auto f = [&] {
    Tape t;
    return t.scalar(outer_loss(t, id, ood, s, cfg).total);
  };
  std::vector<Parameter*> meta = s.phi();
  meta.push_back(&s.log_temperature);
  for (Parameter* p : meta) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      EXPECT_LT(rel_error(p->grad.data()[i], central_difference(p->value.data()[i], f)), 1e-4) << p->name;
    }
  }
}

TEST(MetaGradient, SingleSampleClosedForm) {
  ModelState s = model();
  s.set_temperature(1.6);
  s.set_theta_frozen(true);
  const ValueMatrix id = random_matrix(1, 4, 14);
  const ValueMatrix ood = random_matrix(1, 4, 15);
  OuterLossConfig cfg;
  cfg.alpha = 0.0;
  cfg.learn_temperature = false;
  s.zero_grad();
  {
    Tape tape;
    meta_gradient(tape, outer_loss(tape, id, ood, s, cfg), s);
  }
  const double t = s.temperature();
  const double p_id = normal_confidence(id, s)[0];
  const double p_ood = normal_confidence(ood, s)[0];
  // dBCE/dlogit0 = (p - y) / T; the bias adds straight onto the logits.
  const double d0 = ((p_id - 1.0) + (p_ood - 0.0)) / t;
  EXPECT_NEAR(s.head.logits.bias.grad(0, 0), d0, 1e-12);
  EXPECT_NEAR(s.head.logits.bias.grad(0, 1), -d0, 1e-12);
  EXPECT_EQ(s.log_temperature.grad(0, 0), 0.0);
}

TEST(MetaGradient, HingeContributionIsLinearInAlpha) {
  auto bias_grad = [](double alpha) {
    ModelState s = model(21);
    s.set_theta_frozen(true);
    OuterLossConfig cfg;
    cfg.alpha = alpha;
    s.zero_grad();
    Tape tape;
    auto terms = outer_loss(tape, random_matrix(5, 4, 16), random_matrix(5, 4, 17), s, cfg);
    EXPECT_GT(tape.scalar(terms.hinge), 0.0);
    meta_gradient(tape, terms, s);
    return s.head.logits.bias.grad(0, 0);
  };
  const double g0 = bias_grad(0.0);
  const double g1 = bias_grad(0.3);
  const double g2 = bias_grad(0.6);
  EXPECT_NEAR(g2 - g0, 2.0 * (g1 - g0), 1e-12);
  EXPECT_NE(g1, g0);
}

}  // namespace
}  // namespace mdml
