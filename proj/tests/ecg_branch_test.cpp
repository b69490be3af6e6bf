#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "taffseg/ecg_branch.hpp"
#include "taffseg/errors.hpp"
#include "taffseg/objectives.hpp"
#include "taffseg/optim.hpp"
#include "taffseg/synth_data.hpp"

using namespace taff;
using taff::testing::random_tensor;

namespace {

ecg::EcgConfig tiny_config() {
  ecg::EcgConfig c;
  c.samples = 64;
  c.conv_stages = 2;
  c.channels = 4;
  c.kernel = 5;
  c.latent = 8;
  c.decoder_hidden = 16;
  return c;
}

struct Net {
  nn::ParameterList params;
  ecg::EcgAutoencoder ae;
  Net(const ecg::EcgConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ae = ecg::EcgAutoencoder(cfg, params, rng);
  }
};

void expect_stochastic(const ecg::EcgLatent& lat) {
  const auto& a = lat.cross_lead_attention;
  for (int b = 0; b < a.dim(0); ++b)
    for (int i = 0; i < kNumLeads; ++i) {
      double s = 0.0;
      for (int j = 0; j < kNumLeads; ++j) {
        const double v = a[(static_cast<std::size_t>(b) * kNumLeads + i) * kNumLeads + j];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  const auto& t = lat.temporal_attention;
  const int Tp = t.dim(2);
  for (int b = 0; b < t.dim(0); ++b)
    for (int l = 0; l < kNumLeads; ++l) {
      double s = 0.0;
      for (int k = 0; k < Tp; ++k) {
        const double v = t[(static_cast<std::size_t>(b) * kNumLeads + l) * Tp + k];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  EXPECT_TRUE(lat.z.value().all_finite());
}

}  // namespace

TEST(EcgBranch, LatentWidthAndMapShapes) {
  Net net(ecg::EcgConfig{}, 1);
  Rng rng(2);
  const auto lat = net.ae.encode(ad::constant(random_tensor({2, 12, 600}, rng)));
  EXPECT_EQ(lat.z.shape(), (Shape{2, 64}));
  EXPECT_EQ(lat.cross_lead_attention.shape(), (Shape{2, 12, 12}));
  EXPECT_EQ(lat.temporal_attention.shape(), (Shape{2, 12, ecg::EcgConfig{}.pooled_length()}));
  EXPECT_EQ(ecg::EcgConfig{}.pooled_length(), 75);
  const auto rec = net.ae.decode(lat.z);
  EXPECT_EQ(rec.shape(), (Shape{2, 12, 600}));
  EXPECT_TRUE(rec.value().all_finite());
}

TEST(EcgBranch, UniformAttentionInit) {
  auto cfg = tiny_config();
  cfg.uniform_attention_init = true;
  Net net(cfg, 3);
  Rng rng(4);
  const auto lat = net.ae.encode(ad::constant(random_tensor({3, 12, 64}, rng)));
  for (double v : lat.cross_lead_attention.storage()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-12);
}

TEST(EcgBranch, AttentionStochasticAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Net net(tiny_config(), seed);
    Rng rng(seed + 1000);
    expect_stochastic(net.ae.encode(ad::constant(random_tensor({2, 12, 64}, rng, 2.0))));
  }
}

TEST(EcgBranch, BatchIndependence) {
  Net net(tiny_config(), 5);
  Rng rng(6);
  const Tensor x = random_tensor({3, 12, 64}, rng);
  const Tensor z = net.ae.encode(ad::constant(x)).z.value();
  // Batch [2, 0, 2, 1]: duplicated and permuted rows.
  const int order[] = {2, 0, 2, 1};
  Tensor xp({4, 12, 64});
  const std::size_t per = 12 * 64;
  for (int k = 0; k < 4; ++k)
    std::copy_n(x.data() + order[k] * per, per, xp.data() + k * per);
  const Tensor zp = net.ae.encode(ad::constant(xp)).z.value();
  // GEMM blocking depends on batch size, so rows agree to round-off rather than bitwise.
  const int L = z.dim(1);
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < L; ++j) EXPECT_NEAR(zp[k * L + j], z[order[k] * L + j], 1e-12);
  // Exact duplicates within one batch are bitwise equal.
  for (int j = 0; j < L; ++j) EXPECT_EQ(zp[j], zp[2 * L + j]);
}

TEST(EcgBranch, ZeroDecoderOutputGivesZeroWaveform) {
  auto cfg = tiny_config();
  cfg.zero_init_decoder_output = true;
  Net net(cfg, 7);
  const auto rec = net.ae.decode(ad::constant(Tensor({2, cfg.latent}, 0.0)));
  EXPECT_EQ(rec.shape(), (Shape{2, 12, 64}));
  for (double v : rec.value().storage()) EXPECT_EQ(v, 0.0);
}

TEST(EcgBranch, RoundTripShape) {
  Net net(tiny_config(), 8);
  Rng rng(9);
  const auto x = ad::constant(random_tensor({2, 12, 64}, rng));
  EXPECT_EQ(net.ae.decode(net.ae.encode(x).z).shape(), x.shape());
}

TEST(EcgBranch, InputErrors) {
  Net net(tiny_config(), 10);
  Rng rng(11);
  EXPECT_THROW(net.ae.encode(ad::constant(random_tensor({2, 11, 64}, rng))), ShapeError);
  EXPECT_THROW(net.ae.encode(ad::constant(random_tensor({2, 12, 60}, rng))), ShapeError);
  Tensor bad = random_tensor({1, 12, 64}, rng);
  bad[5] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(net.ae.encode(ad::constant(bad)), DataError);
  EXPECT_THROW(net.ae.decode(ad::constant(Tensor({2, 7}, 0.0))), ShapeError);
  auto cfg = tiny_config();
  cfg.samples = 32;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(EcgBranch, ConfigJsonRoundTrip) {
  auto cfg = tiny_config();
  cfg.uniform_attention_init = true;
  const nlohmann::json j = cfg;
  const auto back = j.get<ecg::EcgConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(EcgBranch, GradientCheckOfReconstruction) {
  Net net(tiny_config(), 12);
  Rng rng(13);
  const auto x = ad::constant(random_tensor({2, 12, 64}, rng));
  std::vector<ad::Var> params;
  for (const auto& p : net.params.items()) params.push_back(p.var);
  const auto r = taff::testing::gradcheck([&] { return loss::recon_loss(x, net.ae.decode(net.ae.encode(x).z)); }, params,
                                    6, 14);
  EXPECT_GE(r.coordinates, 60);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(EcgBranch, AutoencoderTrainingReducesError) {
  synth::DatasetRanges ranges;
  ranges.base.ecg_samples = 128;
  const auto corpus = synth::generate_ecg_corpus(50, 21, ranges);
  std::vector<const EcgRecord*> ptrs;
  for (const auto& r : corpus) ptrs.push_back(&r);
  const auto x = ad::constant(ecg::stack_waveforms(ptrs));

  auto cfg = tiny_config();
  cfg.samples = 128;
  cfg.channels = 8;
  cfg.latent = 64;
  cfg.decoder_hidden = 64;
  Net net(cfg, 22);
  optim::AdamW opt(net.params.items(), 0.0);
  auto mse = [&] { return loss::recon_loss(x, net.ae.decode(net.ae.encode(x).z)); };
  double initial;
  {
    ad::NoGradGuard ng;
    initial = mse().item();
  }
  for (int step = 0; step < 200; ++step) {
    net.params.zero_grad();
    auto l = mse();
    ad::backward(l);
    opt.step(1e-3);
  }
  double final_mse;
  {
    ad::NoGradGuard ng;
    final_mse = mse().item();
  }
  EXPECT_LE(final_mse, 0.5 * initial) << "initial " << initial << " final " << final_mse;
}

TEST(EcgBranch, StackWaveformsRejectsMixedLengths) {
  EcgRecord a, b;
  a.waveform = Tensor({12, 64}, 0.0);
  b.waveform = Tensor({12, 65}, 0.0);
  EXPECT_THROW(ecg::stack_waveforms({&a, &b}), ShapeError);
  EXPECT_THROW(ecg::stack_waveforms({}), InputError);
}
