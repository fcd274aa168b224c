#include <gtest/gtest.h>

#include <cmath>

#include "conjflow/conjugation.hpp"
#include "support.hpp"

using namespace conjflow;
using testing_support::random_tensor;

namespace {

const double kEps = std::sqrt(1e-3);

ConjugationCoefficients coeffs(std::vector<LevelCoefficients> levels, double s = 0, double r = 0, double m = 1) {
  ConjugationCoefficients c;
  c.levels = std::move(levels);
  c.smoothness = s;
  c.magnitude = r;
  c.low_multiplier = m;
  return c;
}

template <typename T>
struct LevelData {
  Tensor<T> flow, base, prev, cur, lprev, lcur;

  ConjugationInputs<T> inputs(int level) const {
    return {level, &flow, level == 1 ? &flow : &base, &prev, &cur, &lprev, &lcur};
  }
};

template <typename T>
LevelData<T> random_level(Rng& rng, int c, int lc, int H = 5, int W = 5) {
  return {random_tensor<T>(2, H, W, rng, -1.5, 1.5), random_tensor<T>(2, H, W, rng, -1.5, 1.5),
          random_tensor<T>(c, H, W, rng), random_tensor<T>(c, H, W, rng),
          random_tensor<T>(lc, H, W, rng), random_tensor<T>(lc, H, W, rng)};
}

// Unfused re-evaluation: sum of the separately computed terms.
double unfused(const LevelData<double>& d, int level, const ConjugationCoefficients& c) {
  const auto& k = c.at(level);
  const Tensor<double>& base = level == 1 ? d.flow : d.base;
  return k.cur * consistency_loss(d.flow, d.prev, d.cur) + k.skip * consistency_loss(base, d.prev, d.cur) +
         k.low * c.low_multiplier * consistency_loss(d.flow, d.lprev, d.lcur) +
         flow_regularizer(d.flow, c.smoothness, c.magnitude);
}

}  // namespace

TEST(Regularizer, ZeroFlowIsZero) { EXPECT_EQ(flow_regularizer(Tensor<double>(2, 4, 4), 1.0, 1.0), 0.0); }

TEST(Regularizer, ConstantFlowHasOnlyMagnitude) {
  Tensor<double> f(2, 3, 4);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x) {
      f(0, y, x) = 3;
      f(1, y, x) = 4;
    }
  EXPECT_DOUBLE_EQ(flow_regularizer(f, 1.0, 1.0), 25.0);
}

TEST(Regularizer, ForwardDifferenceStencil) {
  // u = (0, 2) on a 1x2 grid: one horizontal difference of 2, the edge pixel contributes 0; mean over 2 pixels.
  Tensor<double> f(2, 1, 2);
  f(0, 0, 1) = 2;
  EXPECT_DOUBLE_EQ(flow_regularizer(f, 1.0, 0.0), 4.0 / 2);
}

TEST(Regularizer, GradientMatchesFiniteDifferences) {
  using LD = long double;
  Rng rng(1);
  auto f = random_tensor<LD>(2, 5, 6, rng, -2, 2);
  const auto r = flow_regularizer_grad(f, 0.3, 0.7);
  auto fn = [&] { return flow_regularizer(f, 0.3, 0.7); };
  EXPECT_LT(testing_support::check_gradient<LD>(f.values(), r.d_flow.values(), fn, rng, f.size()).max_rel, 1e-4);
}

TEST(Conjugation, ConstantFeaturesZeroFlowGiveEpsilonTimesCoefficients) {
  LevelData<double> d{Tensor<double>(2, 4, 4), {}, Tensor<double>(3, 4, 4, 0.7), Tensor<double>(3, 4, 4, 0.7),
                      Tensor<double>(3, 4, 4, 0.2), Tensor<double>(3, 4, 4, 0.2)};
  const auto c = coeffs({{0.5, 0.25, 2.0}}, 1.0, 1.0);
  EXPECT_NEAR(conjugation_loss(d.inputs(1), c), (0.5 + 0.25 + 2.0) * kEps, 1e-15);
}

TEST(Conjugation, TrueShiftBeatsZeroFlow) {
  // Frame t is frame t-1 moved right by 2 px; the backward flow (2, 0) reconstructs it.
  Rng rng(2);
  const int H = 8, W = 12;
  Tensor<double> prev(3, H, W), cur(3, H, W), truth(2, H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < 3; ++c) prev(c, y, x) = std::sin(0.7 * x + 1.3 * c) + 0.3 * std::cos(0.9 * y);
      truth(0, y, x) = 2;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) cur(c, y, x) = prev(c, y, std::max(x - 2, 0));
  const auto c = coeffs({{0, 0, 1}});
  auto loss = [&](const Tensor<double>& flow) {
    return conjugation_loss<double>({1, &flow, &flow, &prev, &cur, &prev, &cur}, c);
  };
  EXPECT_LT(loss(truth), loss(Tensor<double>(2, H, W)));
}

TEST(Conjugation, MatchesUnfusedSum) {
  Rng rng(3);
  for (int level : {1, 2, 3}) {
    const auto d = random_level<double>(rng, 4, 3);
    std::vector<LevelCoefficients> lv(3, {0.3, 0.2, 0.9});
    const auto c = coeffs(lv, 0.05, 0.01, 0.5);
    const double got = conjugation_loss(d.inputs(level), c);
    EXPECT_LE(testing_support::rel_error(got, unfused(d, level, c), 1e-300), 1e-10);
  }
}

TEST(Conjugation, GradientsMatchFiniteDifferences) {
  using LD = long double;
  Rng rng(4);
  for (int level : {1, 2}) {
    auto d = random_level<LD>(rng, 3, 2);
    const auto c = coeffs({{0.4, 0.3, 0.8}, {0.4, 0.3, 0.8}}, 0.1, 0.05, 0.7);
    const auto r = conjugation_loss_grad(d.inputs(level), c);
    // Only the routed paths are differentiated: the level-1 flow is a constant in (i) and (ii).
    auto f_all = [&] { return conjugation_loss(d.inputs(level), c); };
    auto f_flow = [&] {
      if (level > 1) return f_all();
      ConjugationTerms t;
      t.same_level = false;
      return conjugation_loss(d.inputs(level), c, t);
    };
    EXPECT_LT(testing_support::check_gradient<LD>(d.flow.values(), r.d_flow.values(), f_flow, rng, d.flow.size()).max_rel, 1e-4);
    for (auto [x, g] : {std::pair{&d.prev, &r.d_feat_prev}, std::pair{&d.cur, &r.d_feat_cur},
                        std::pair{&d.lprev, &r.d_lower_prev}, std::pair{&d.lcur, &r.d_lower_cur}})
      EXPECT_LT(testing_support::check_gradient<LD>(x->values(), g->values(), f_all, rng, x->size()).max_rel, 1e-4);
  }
}

TEST(Conjugation, SameLevelTermsSendNoGradientToLevelOneFlow) {
  Rng rng(5);
  const auto d = random_level<double>(rng, 3, 3);
  ConjugationTerms t;
  t.lower_level = false;
  const auto r = conjugation_loss_grad(d.inputs(1), coeffs({{1, 1, 1}}), t);
  for (double v : r.d_flow.values()) EXPECT_EQ(v, 0.0);
  // Above level 1 the skip term never touches delta^l: only (i) moves it.
  ConjugationTerms t2 = t;
  auto d2 = d;
  const auto only_skip = conjugation_loss_grad(d2.inputs(2), coeffs({{0, 1, 1}, {0, 1, 1}}), t2);
  for (double v : only_skip.d_flow.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conjugation, DisabledTermsDropOut) {
  Rng rng(6);
  const auto d = random_level<double>(rng, 3, 3);
  const auto c = coeffs({{0.3, 0.2, 0.9}}, 0.1, 0.1);
  ConjugationTerms none{false, false};
  EXPECT_EQ(conjugation_loss(d.inputs(1), c, none), 0.0);
  ConjugationTerms low{false, true};
  EXPECT_NEAR(conjugation_loss(d.inputs(1), c, low),
              0.9 * consistency_loss(d.flow, d.lprev, d.lcur) + flow_regularizer(d.flow, 0.1, 0.1), 1e-14);
}

TEST(TotalConjugation, SingleLevelAndZeroedUpperLevel) {
  Rng rng(7);
  const auto d1 = random_level<double>(rng, 3, 3);
  const auto d2 = random_level<double>(rng, 3, 3);
  const auto c1 = coeffs({{0.3, 0.2, 0.9}}, 0.1, 0.1);
  EXPECT_EQ(total_conjugation<double>({d1.inputs(1)}, c1, {}, false).value, conjugation_loss(d1.inputs(1), c1));
  const auto c2 = coeffs({{0.3, 0.2, 0.9}, {0, 0, 0}}, 0.0, 0.0);
  EXPECT_EQ(total_conjugation<double>({d1.inputs(1), d2.inputs(2)}, c2, {}, false).value,
            conjugation_loss(d1.inputs(1), c2));
}

TEST(TotalConjugation, MatchesUnfusedOracle) {
  Rng rng(8);
  const auto d1 = random_level<double>(rng, 3, 3);
  const auto d2 = random_level<double>(rng, 4, 3);
  const auto c = coeffs({{0.3, 0.2, 0.9}, {0.6, 0.1, 0.4}}, 0.05, 0.02, 0.8);
  const double got = total_conjugation<double>({d1.inputs(1), d2.inputs(2)}, c).value;
  EXPECT_LE(testing_support::rel_error(got, unfused(d1, 1, c) + unfused(d2, 2, c), 1e-300), 1e-10);
}

TEST(TotalConjugation, RejectsLevelMismatch) {
  Rng rng(9);
  const auto d = random_level<double>(rng, 3, 3);
  EXPECT_THROW(total_conjugation<double>({d.inputs(1)}, coeffs({{1, 1, 1}, {1, 1, 1}})), std::invalid_argument);
  EXPECT_THROW(coeffs({{1, 1, 0}}).validate(), std::invalid_argument);
}
