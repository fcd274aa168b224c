#include <gtest/gtest.h>

#include "conjflow/hierarchy.hpp"
#include "support.hpp"

using namespace conjflow;
using testing_support::random_tensor;

namespace {

nn::UNetSpec small_spec(bool skip) {
  nn::UNetSpec s;
  s.in_channels = 2;
  s.out_channels = 3;
  s.base_width = 3;
  s.depth = 2;
  s.block_convs = 2;
  s.input_skip = skip;
  return s;
}

// Weighted sum of outputs: a scalar whose gradient with respect to the output is `w`.
template <typename T>
T probe(const Tensor<T>& out, const Tensor<T>& w) {
  T s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.storage()[i] * w.storage()[i];
  return s;
}

}  // namespace

TEST(UNet, OutputShapeFollowsInputGrid) {
  for (int depth : {0, 1, 2, 3}) {
    auto spec = small_spec(true);
    spec.depth = depth;
    nn::UNet<double> net(spec);
    std::vector<double> w(net.num_params());
    Rng rng(1);
    net.init(w, rng);
    for (auto [h, wd] : {std::pair{8, 8}, std::pair{7, 9}, std::pair{5, 3}}) {
      const auto out = net.forward(w, random_tensor<double>(2, h, wd, rng));
      EXPECT_EQ(out.channels(), 3);
      EXPECT_EQ(out.height(), h);
      EXPECT_EQ(out.width(), wd);
      EXPECT_TRUE(out.all_finite());
    }
  }
}

TEST(UNet, RejectsWrongInputChannels) {
  nn::UNet<double> net(small_spec(false));
  std::vector<double> w(net.num_params());
  EXPECT_THROW(net.forward(w, Tensor<double>(3, 4, 4)), ShapeError);
  EXPECT_THROW(net.forward(std::vector<double>(1), Tensor<double>(2, 4, 4)), ShapeError);
}

TEST(UNet, ParameterAndInputGradientsMatchFiniteDifferences) {
  using LD = long double;
  for (bool skip : {false, true}) {
    nn::UNet<LD> net(small_spec(skip));
    std::vector<LD> w(net.num_params());
    Rng rng(2);
    net.init(w, rng);
    auto x = random_tensor<LD>(2, 7, 6, rng);
    const auto probe_w = random_tensor<LD>(3, 7, 6, rng);
    nn::Tape<LD> tape;
    net.forward(w, x, &tape);
    std::vector<LD> dw(w.size(), 0);
    const auto dx = net.backward(w, tape, probe_w, dw, true);
    auto f = [&] { return probe(net.forward(w, x), probe_w); };
    const auto gw = testing_support::check_gradient<LD>(std::span<LD>(w), std::span<const LD>(dw), f, rng, 300, 1e-6L);
    EXPECT_LT(gw.max_rel, 1e-4) << "input_skip=" << skip;
    const auto gx = testing_support::check_gradient<LD>(x.values(), dx.values(), f, rng, x.size(), 1e-6L);
    EXPECT_LT(gx.max_rel, 1e-4) << "input_skip=" << skip;
  }
}

TEST(UNet, TranslationCovarianceAwayFromBorders) {
  // A textured patch on a uniform image, placed at two offsets. The border only ever sees the uniform
  // background, so instance-norm statistics agree and interior outputs are shifted copies.
  for (int depth : {0, 2}) {
    nn::UNetSpec s = small_spec(true);
    s.depth = depth;
    nn::UNet<double> net(s);
    std::vector<double> w(net.num_params());
    Rng rng(3);
    net.init(w, rng);
    const auto patch = random_tensor<double>(2, 4, 4, rng);
    const int shift = 4;  // multiple of the coarsest stride
    auto place = [&](int oy, int ox) {
      Tensor<double> img(2, 128, 128, 0.3);
      for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x) img(c, oy + y, ox + x) = patch(c, y, x);
      return img;
    };
    const auto a = net.forward(w, place(60, 60)), b = net.forward(w, place(60 + shift, 60 + shift));
    double worst = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 50; y < 74; ++y)
        for (int x = 50; x < 74; ++x) worst = std::max(worst, std::abs(b(c, y + shift, x + shift) - a(c, y, x)));
    EXPECT_LT(worst, 1e-12) << "depth " << depth;
  }
}

TEST(Hierarchy, ChainChannels) {
  LevelSpec shape;
  shape.feature_channels = 32;
  const auto specs = make_level_chain(2, 3, shape);
  ASSERT_EQ(specs.size(), 2u);
  EXPECT_EQ(specs[0].input_channels, 3);
  EXPECT_EQ(specs[1].input_channels, 32);
  EXPECT_EQ(specs[1].flow_net().in_channels, 64);
  auto bad = specs;
  bad[1].input_channels = 16;
  EXPECT_THROW(validate_level_chain(bad, 3), std::invalid_argument);
  EXPECT_THROW(validate_level_chain({}, 3), std::invalid_argument);
}

TEST(Hierarchy, SameSeedSameWeights) {
  LevelSpec shape;
  shape.feature_channels = 4;
  shape.feature_width = 4;
  shape.flow_width = 4;
  const auto specs = make_level_chain(2, 3, shape);
  const auto a = build_model<float>(specs, 3, 42), b = build_model<float>(specs, 3, 42), c = build_model<float>(specs, 3, 43);
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(a.weights[l].flow, b.weights[l].flow);
    EXPECT_EQ(a.weights[l].gra, b.weights[l].gra);
    EXPECT_EQ(a.weights[l].ema, a.weights[l].gra);
  }
  EXPECT_NE(a.weights[0].flow, c.weights[0].flow);
}

TEST(Hierarchy, ForwardShapes) {
  LevelSpec shape;
  shape.feature_channels = 5;
  shape.feature_width = 4;
  shape.flow_width = 4;
  const auto m = build_model<float>(make_level_chain(2, 3, shape), 3, 1);
  Rng rng(4);
  const auto prev = random_tensor<float>(3, 16, 16, rng, 0, 1), cur = random_tensor<float>(3, 16, 16, rng, 0, 1);
  const auto a = forward_pair(m, prev, cur, true);
  ASSERT_EQ(a.flows.size(), 2u);
  ASSERT_EQ(a.feat_prev.size(), 3u);
  for (int l = 1; l <= 2; ++l) {
    EXPECT_EQ(a.flows[l - 1].channels(), 2);
    EXPECT_EQ(a.flows[l - 1].level(), l);
    EXPECT_EQ(a.feat_prev[l].channels(), 5);
    EXPECT_EQ(a.feat_cur[l].height(), 16);
    EXPECT_TRUE(a.flows[l - 1].all_finite());
  }
  // Slow-learner features of the later frame equal the stand-alone extraction.
  const auto f = extract_features(m, cur);
  EXPECT_EQ(f[2], a.feat_cur[2]);
}

TEST(Hierarchy, NonFiniteInputRaisesDivergence) {
  LevelSpec shape;
  shape.feature_channels = 3;
  shape.feature_width = 2;
  shape.flow_width = 2;
  const auto m = build_model<float>(make_level_chain(1, 3, shape), 3, 1);
  Tensor<float> bad(3, 8, 8, 0.5f);
  bad(0, 2, 2) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(forward_pair(m, bad, bad, false), DivergenceError);
}
