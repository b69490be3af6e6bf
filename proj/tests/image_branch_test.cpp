#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "taffseg/errors.hpp"
#include "taffseg/image_branch.hpp"
#include "taffseg/objectives.hpp"

using namespace taff;
using taff::testing::random_tensor;

namespace {

struct Net {
  nn::ParameterList params;
  image::UNet unet;
  Net(const image::UNetConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    unet = image::UNet(cfg, params, rng);
  }
};

image::UNetConfig small_config() {
  image::UNetConfig c;
  c.base_width = 4;
  c.depth = 3;
  c.tap_depth = 1;
  return c;
}

}  // namespace

TEST(ImageBranch, TapShapeFollowsChannelSchedule) {
  image::UNetConfig cfg;  // base 16, depth 4, tap 2
  Net net(cfg, 1);
  Rng rng(2);
  const auto mid = net.unet.encode_to_mid(ad::constant(random_tensor({2, 18, 64, 64}, rng)));
  EXPECT_EQ(mid.f.shape(), (Shape{2, 64, 16, 16}));
  ASSERT_EQ(mid.skips.size(), 2u);
  EXPECT_EQ(mid.skips[0].shape(), (Shape{2, 16, 64, 64}));
  EXPECT_EQ(mid.skips[1].shape(), (Shape{2, 32, 32, 32}));
}

TEST(ImageBranch, ZeroInputGivesZeroFeatures) {
  Net net(small_config(), 3);
  const auto mid = net.unet.encode_to_mid(ad::constant(Tensor({1, 18, 16, 16}, 0.0)));
  for (double v : mid.f.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(ImageBranch, ChannelAndSizeErrors) {
  Net net(small_config(), 4);
  EXPECT_THROW(net.unet.encode_to_mid(ad::constant(Tensor({1, 17, 16, 16}, 0.0))), ShapeError);
  EXPECT_THROW(net.unet.encode_to_mid(ad::constant(Tensor({1, 19, 16, 16}, 0.0))), ShapeError);
  EXPECT_THROW(net.unet.forward(ad::constant(Tensor({1, 18, 20, 16}, 0.0))), ShapeError);
  const auto mid = net.unet.encode_to_mid(ad::constant(Tensor({1, 18, 16, 16}, 0.0)));
  EXPECT_THROW(net.unet.decode_segment(mid.f, {}), ShapeError);
}

TEST(ImageBranch, OutputMatchesInputSizeAndSoftmaxNormalizes) {
  Net net(small_config(), 5);
  Rng rng(6);
  for (int n : {32, 64, 128}) {
    const auto x = ad::constant(random_tensor({1, 18, n, n}, rng));
    const auto mid = net.unet.encode_to_mid(x);
    const auto logits = net.unet.decode_segment(mid.f, mid.skips);
    ASSERT_EQ(logits.shape(), (Shape{1, 4, n, n}));
    const Tensor p = ad::softmax(logits, 1).value();
    const std::size_t plane = static_cast<std::size_t>(n) * n;
    double worst = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += p[c * plane + i];
      worst = std::max(worst, std::abs(s - 1.0));
    }
    EXPECT_LT(worst, 1e-6) << "size " << n;
  }
}

TEST(ImageBranch, SplitPathEqualsSinglePass) {
  for (int tap : {0, 1, 2, 3}) {
    auto cfg = small_config();
    cfg.tap_depth = tap;
    Net net(cfg, 7);
    Rng rng(8);
    const auto x = ad::constant(random_tensor({2, 18, 32, 32}, rng));
    const auto mid = net.unet.encode_to_mid(x);
    const Tensor a = net.unet.decode_segment(mid.f, mid.skips).value();
    const Tensor b = net.unet.forward(x).value();
    ASSERT_EQ(a.shape(), b.shape());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    EXPECT_LT(worst, 1e-6) << "tap " << tap;
  }
}

TEST(ImageBranch, ZeroPriorChannelsStayFinite) {
  Net net(small_config(), 9);
  Rng rng(10);
  Tensor x({2, 18, 32, 32}, 0.0);
  for (std::size_t i = 0; i < 32 * 32; ++i) {
    x[i] = rng.normal();
    x[18 * 32 * 32 + i] = rng.normal();
  }
  EXPECT_TRUE(net.unet.forward(ad::constant(x)).value().all_finite());
}

TEST(ImageBranch, BatchConcatenationIsRowwiseIdentical) {
  Net net(small_config(), 11);
  Rng rng(12);
  const Tensor x = random_tensor({1, 18, 16, 16}, rng);
  Tensor xx({2, 18, 16, 16});
  std::copy_n(x.data(), x.size(), xx.data());
  std::copy_n(x.data(), x.size(), xx.data() + x.size());
  const Tensor y1 = net.unet.forward(ad::constant(x)).value();
  const Tensor y2 = net.unet.forward(ad::constant(xx)).value();
  for (std::size_t i = 0; i < y1.size(); ++i) {
    EXPECT_EQ(y2[i], y1[i]);
    EXPECT_EQ(y2[y1.size() + i], y1[i]);
  }
}

TEST(ImageBranch, ConfigValidationAndJson) {
  auto cfg = small_config();
  cfg.tap_depth = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const nlohmann::json j = small_config();
  EXPECT_EQ(nlohmann::json(j.get<image::UNetConfig>()), j);
}

TEST(ImageBranch, GradientCheckOfSegmentationLoss) {
  image::UNetConfig cfg;
  cfg.base_width = 2;
  cfg.depth = 2;
  cfg.tap_depth = 1;
  Net net(cfg, 13);
  Rng rng(14);
  const auto x = ad::constant(random_tensor({2, 18, 16, 16}, rng));
  std::vector<std::uint8_t> labels(2 * 16 * 16);
  for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(4));
  std::vector<ad::Var> params;
  for (const auto& p : net.params.items()) params.push_back(p.var);
  const auto r = taff::testing::gradcheck(
      [&] {
        const auto mid = net.unet.encode_to_mid(x);
        return loss::seg_loss(net.unet.decode_segment(mid.f, mid.skips), labels).total;
      },
      params, 4, 15);
  EXPECT_GE(r.coordinates, 100);
  EXPECT_LT(r.max_rel_error, 1e-4);
}
