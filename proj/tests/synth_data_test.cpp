#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <iterator>
#include <map>
#include <numbers>
#include <set>

#include "taffseg/errors.hpp"
#include "taffseg/synth_data.hpp"

namespace fs = std::filesystem;
using namespace taff;
using namespace taff::synth;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int dominant_segment(const PairedSample& s, int scar_voxel_class = scar) {
  std::map<int, int> overlap;
  for (std::size_t i = 0; i < s.labels.labels.size(); ++i)
    if (s.labels.labels.data[i] == scar_voxel_class) ++overlap[s.prior.segment_map.data[i]];
  int best = 0, best_n = -1;
  for (auto [seg, n] : overlap)
    if (n > best_n) best = seg, best_n = n;
  return best;
}

}  // namespace

TEST(SynthPhantom, Deterministic) {
  PhantomSpec spec;
  spec.artifacts = 2;
  const auto a = synth_phantom_pair(spec, {}, 17, 5);
  const auto b = synth_phantom_pair(spec, {}, 17, 5);
  EXPECT_EQ(a.sample.mri, b.sample.mri);
  EXPECT_EQ(a.sample.labels.labels, b.sample.labels.labels);
  EXPECT_EQ(a.sample.ecg.waveform.storage(), b.sample.ecg.waveform.storage());
  EXPECT_EQ(a.sample.mri_acquired_at, b.sample.mri_acquired_at);
  const auto c = synth_phantom_pair(spec, {}, 17, 6);
  EXPECT_NE(a.sample.mri, c.sample.mri);
}

TEST(SynthPhantom, SampleInvariants) {
  PhantomSpec spec;
  spec.scar_segments = {3, 14};
  const auto g = synth_phantom_pair(spec, {}, 45, 1);
  const auto& s = g.sample;
  EXPECT_NO_THROW(s.validate());
  EXPECT_DOUBLE_EQ(s.t_norm, 0.5);
  EXPECT_EQ((s.mri_acquired_at - s.ecg.acquired_at).count(), 45);
  EXPECT_EQ(s.ecg.samples(), 600);
  // Scar lies inside the annulus; the prior covers myocardium and scar exactly.
  for (std::size_t i = 0; i < s.labels.labels.size(); ++i) {
    const bool myo = s.labels.labels.data[i] >= myocardium;
    EXPECT_EQ(s.prior.segment_map.data[i] != 0, myo);
  }
}

TEST(SynthPhantom, NoStalenessAtZeroInterval) {
  PhantomSpec spec;
  spec.scar_segments = {7, 8};
  spec.transmurality = 0.8;
  SegmentState mri_state{};
  mri_state[6] = mri_state[7] = 0.8;
  const auto at_ecg = scar_state_at_ecg(spec, {}, 0.0);
  EXPECT_EQ(at_ecg, mri_state);
  EXPECT_EQ(deformation_magnitude(at_ecg, 600), deformation_magnitude(mri_state, 600));
  EXPECT_GT(deformation_magnitude(at_ecg, 600), 0.0);
}

TEST(SynthPhantom, InformativenessFallsWithStaleness) {
  PhantomSpec spec;
  spec.transmurality = 0.9;
  StalenessModel st;
  double prev_snr = INFINITY;
  for (double t = 0.0; t <= 1.0; t += 0.1) {
    const double signal = deformation_magnitude(scar_state_at_ecg(spec, st, t), spec.ecg_samples);
    const double noise = spec.ecg_base_noise + st.ecg_noise_gain * t;
    EXPECT_LT(signal / noise, prev_snr);
    prev_snr = signal / noise;
  }
}

TEST(SynthPhantom, LeadTerritories) {
  // Inferior segment: II, III, aVF only.
  const auto w = segment_lead_weights(4);
  for (int l = 0; l < kNumLeads; ++l) EXPECT_EQ(w[l], (l == 1 || l == 2 || l == 5) ? 1.0 : 0.0);
  // Anteroseptal: V1-V2 shared by both territories dominate.
  const auto a = segment_lead_weights(2);
  EXPECT_EQ(a[6], 1.0);
  EXPECT_EQ(a[7], 1.0);
  EXPECT_EQ(a[8], 0.5);
  EXPECT_EQ(a[0], 0.0);
  // Scar on a lateral segment leaves the inferior leads untouched.
  SegmentState st{};
  st[15] = 1.0;
  const Tensor scarred = ecg_waveform(st, 300), healthy = ecg_waveform({}, 300);
  for (int t = 0; t < 300; ++t) {
    EXPECT_EQ(scarred.at(1, t), healthy.at(1, t));
    EXPECT_EQ(scarred.at(6, t), healthy.at(6, t));
  }
}

TEST(SynthPhantom, ScarAreaMatchesTransmuralityShare) {
  PhantomSpec spec;
  spec.slices = 8;
  spec.noise_sd = 0.0;
  spec.transmurality = 0.6;
  spec.scar_segments = {9};
  const auto g = synth_phantom_pair(spec, {}, 0, 2);
  const auto& s = g.sample;
  // Aggregate over the mid-zone slices: scar / myocardium against tau / 6.
  double scar_px = 0, myo_px = 0;
  for (int k = 0; k < spec.slices; ++k) {
    if (s.prior.slice_zones[k] != atlas::Zone::mid) continue;
    for (auto v : s.labels.labels.slice(k)) {
      scar_px += v == scar;
      myo_px += v >= myocardium;
    }
  }
  ASSERT_GT(myo_px, 0);
  EXPECT_NEAR(scar_px / myo_px, spec.transmurality / 6.0, 0.02);
}

TEST(SynthPhantom, PriorRecoversSingleSegmentScar) {
  for (int seg = 1; seg <= 17; ++seg) {
    PhantomSpec spec;
    spec.scar_segments = {seg};
    spec.transmurality = 0.5 + 0.025 * seg;
    const auto g = synth_phantom_pair(spec, {}, 10, static_cast<std::uint64_t>(seg));
    EXPECT_EQ(dominant_segment(g.sample), seg);
  }
}

TEST(SynthPhantom, InvalidSpecs) {
  PhantomSpec spec;
  spec.scar_segments = {18};
  EXPECT_THROW(synth_phantom_pair(spec, {}, 0, 1), SpecError);
  spec.scar_segments = {1};
  spec.inner_radius_mm = 30;
  EXPECT_THROW(synth_phantom_pair(spec, {}, 0, 1), SpecError);
  spec = {};
  EXPECT_THROW(synth_phantom_pair(spec, {-0.1, 0.1}, 0, 1), SpecError);
  EXPECT_THROW(synth_phantom_pair(spec, {}, 91, 1), InputError);
}

TEST(IntervalBins, Boundaries) {
  EXPECT_EQ(interval_bin_of(0), 0);
  EXPECT_EQ(interval_bin_of(2.9), 0);
  EXPECT_EQ(interval_bin_of(3), 1);
  EXPECT_EQ(interval_bin_of(7), 2);
  EXPECT_EQ(interval_bin_of(14), 3);
  EXPECT_EQ(interval_bin_of(21), 4);
  EXPECT_EQ(interval_bin_of(30), 5);
  EXPECT_EQ(interval_bin_of(59.9), 5);
  EXPECT_EQ(interval_bin_of(60), 6);
  EXPECT_EQ(interval_bin_of(90), 6);
}

TEST(GenerateDataset, PopulatesAllBinsAndSplits) {
  const Dataset ds = generate_dataset(100, 4, {});
  std::set<int> bins;
  for (const auto& s : ds.samples) bins.insert(interval_bin_of(s.t_interval_days));
  EXPECT_EQ(bins.size(), 7u);
  EXPECT_EQ(ds.manifest.sizes(), (std::array<std::size_t, 3>{70, 10, 20}));
  EXPECT_THROW(generate_dataset(9, 4, {}), ConfigError);
}

TEST(GenerateDataset, RegenerationIsByteIdentical) {
  const fs::path base = fs::temp_directory_path() / ("taffseg_gen_" + std::to_string(::getpid()));
  fs::remove_all(base);
  generate_dataset(12, 9, {}, base / "a");
  generate_dataset(12, 9, {}, base / "b");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(base / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), base / "a");
    EXPECT_EQ(slurp(e.path()), slurp(base / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 12u * 4 + 1);
  const Dataset back = load_dataset(base / "a");
  const Dataset mem = generate_dataset(12, 9, {});
  ASSERT_EQ(back.samples.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(back.samples[i].labels.labels, mem.samples[i].labels.labels);
    EXPECT_EQ(back.samples[i].mri, mem.samples[i].mri);
    EXPECT_EQ(back.samples[i].t_interval_days, mem.samples[i].t_interval_days);
  }
  fs::remove_all(base);
}

TEST(EcgCorpus, ShapeAndDeterminism) {
  const auto a = generate_ecg_corpus(5, 1, {});
  const auto b = generate_ecg_corpus(5, 1, {});
  ASSERT_EQ(a.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].waveform.storage(), b[i].waveform.storage());
    EXPECT_NO_THROW(a[i].validate());
  }
}
