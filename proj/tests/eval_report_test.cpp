#include <gtest/gtest.h>

#include <boost/math/special_functions/beta.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "taffseg/errors.hpp"
#include "taffseg/eval_report.hpp"
#include "taffseg/model.hpp"
#include "taffseg/random.hpp"
#include "taffseg/synth_data.hpp"

using namespace taff;
using namespace taff::eval;
namespace fs = std::filesystem;

namespace {

MaskVolume mask_with(int n_total, const std::vector<int>& scar_idx) {
  MaskVolume m(1, 1, n_total, 0);
  for (int i : scar_idx) m.data[i] = kScarClass;
  return m;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

MetricsRow row_at(double days, double dice) {
  MetricsRow r;
  r.t_interval_days = days;
  r.classes[kScarClass].dice = dice;
  return r;
}

}  // namespace

TEST(Metrics, IdenticalMasks) {
  const auto m = mask_with(20, {1, 2, 3, 4});
  const auto r = compute_metrics(m, m, {1, 1, 1});
  EXPECT_EQ(r.scar().dice, 1.0);
  EXPECT_EQ(*r.scar().precision, 1.0);
  EXPECT_EQ(*r.scar().sensitivity, 1.0);
  EXPECT_EQ(r.volume_difference_ml, 0.0);
}

TEST(Metrics, HalfCoverageNoFalsePositives) {
  const auto gt = mask_with(20, {0, 1, 2, 3, 4, 5});
  const auto pred = mask_with(20, {0, 1, 2});
  const auto r = compute_metrics(pred, gt, {1, 1, 1});
  EXPECT_NEAR(r.scar().dice, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(*r.scar().precision, 1.0);
  EXPECT_EQ(*r.scar().sensitivity, 0.5);
}

TEST(Metrics, VolumeDifferenceInMillilitres) {
  const auto gt = mask_with(20, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto pred = mask_with(20, {});
  const auto r = compute_metrics(pred, gt, {1.0, 1.0, 10.0});
  // 10 voxels of 10 mm^3 = 100 mm^3 = 0.1 mL.
  EXPECT_NEAR(r.volume_difference_ml, 0.1, 1e-15);
  EXPECT_NEAR(r.gt_scar_ml, 0.1, 1e-15);
  EXPECT_EQ(r.scar().dice, 0.0);
  EXPECT_FALSE(r.scar().precision.has_value());
  EXPECT_EQ(*r.scar().sensitivity, 0.0);
}

TEST(Metrics, EmptyConventions) {
  const auto empty = mask_with(8, {});
  const auto r = compute_metrics(empty, empty, {1, 1, 1});
  EXPECT_EQ(r.scar().dice, 1.0);
  EXPECT_EQ(*r.scar().precision, 1.0);
  EXPECT_EQ(*r.scar().sensitivity, 1.0);
  const auto r2 = compute_metrics(mask_with(8, {3}), empty, {1, 1, 1});
  EXPECT_EQ(r2.scar().dice, 0.0);
  EXPECT_EQ(*r2.scar().precision, 0.0);
  EXPECT_FALSE(r2.scar().sensitivity.has_value());
}

TEST(Metrics, SymmetryAndBoundsOnRandomMasks) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    MaskVolume a(2, 5, 5), b(2, 5, 5);
    for (auto& v : a.data) v = static_cast<std::uint8_t>(rng.below(4));
    for (auto& v : b.data) v = static_cast<std::uint8_t>(rng.below(4));
    for (std::uint8_t c = 1; c <= 3; ++c) {
      const auto ab = overlap(a, b, c), ba = overlap(b, a, c);
      EXPECT_EQ(ab.dice, ba.dice);
      EXPECT_EQ(ab.precision, ba.sensitivity);
      EXPECT_GE(ab.dice, 0.0);
      EXPECT_LE(ab.dice, 1.0);
    }
  }
}

TEST(Metrics, Errors) {
  EXPECT_THROW(compute_metrics(mask_with(4, {}), mask_with(4, {}), {0, 1, 1}), InputError);
  EXPECT_THROW(compute_metrics(mask_with(4, {}), mask_with(5, {}), {1, 1, 1}), ShapeError);
}

TEST(AhaVolumes, ConfinedScarAndPartitionIdentity) {
  synth::PhantomSpec spec;
  spec.scar_segments = {7};
  const auto g = synth::synth_phantom_pair(spec, {}, 10.0, 4);
  const auto& s = g.sample;
  const auto v = aha17_scar_volumes(s.labels.labels, s.prior, s.labels.spacing);
  EXPECT_GT(v.voxels[6], 0u);
  std::size_t sum = v.extra_voxels;
  for (int k = 0; k < 17; ++k) {
    if (k != 6) EXPECT_EQ(v.voxels[k], 0u) << "segment " << k + 1;
    sum += v.voxels[k];
  }
  EXPECT_EQ(sum, v.total_voxels);
  EXPECT_EQ(v.total_voxels, s.labels.count(kScarClass));
  EXPECT_DOUBLE_EQ(v.segment_ml(7), static_cast<double>(v.voxels[6]) * s.labels.spacing.voxel_ml());

  // Scar painted outside the myocardium counts as extra-myocardial.
  MaskVolume stray = s.labels.labels;
  stray(0, 0, 0) = kScarClass;
  const auto w = aha17_scar_volumes(stray, s.prior, s.labels.spacing);
  EXPECT_EQ(w.extra_voxels, v.extra_voxels + 1);
  EXPECT_EQ(w.total_voxels, v.total_voxels + 1);

  MaskVolume wrong(1, 4, 4);
  EXPECT_THROW(aha17_scar_volumes(wrong, s.prior, s.labels.spacing), ShapeError);
}

// Scar covering all of segment 7 plus an angular wedge of segment 8 sized to
// 3/7 of that area; the reported per-segment volumes should be 7:3.
TEST(AhaVolumes, TwoSegmentSplitSeventyThirty) {
  synth::PhantomSpec spec;
  spec.height = spec.width = 128;
  spec.pixel_mm = 0.5;
  spec.scar_segments = {};
  const auto g = synth::synth_phantom_pair(spec, {}, 1.0, 8);
  const auto& prior = g.sample.prior;
  MaskVolume labels = g.sample.labels.labels;

  std::size_t area7 = 0;
  struct Pix {
    int s, r, c;
    double angle;
  };
  std::vector<Pix> seg8;
  double cx = 0, cy = 0;
  for (int s = 0; s < labels.slices; ++s)
    for (int r = 0; r < labels.height; ++r)
      for (int c = 0; c < labels.width; ++c) {
        const int seg = prior.segment_map(s, r, c);
        if (seg == 7) {
          labels(s, r, c) = kScarClass;
          ++area7;
        }
        if (seg == 8) seg8.push_back({s, r, c, 0.0});
      }
  ASSERT_GT(area7, 100u);
  ASSERT_FALSE(seg8.empty());
  // Angles about the image centre, measured from the wedge's mean direction.
  const double mid = (labels.height - 1) / 2.0;
  for (const auto& p : seg8) {
    cx += std::cos(std::atan2(p.r - mid, p.c - mid));
    cy += std::sin(std::atan2(p.r - mid, p.c - mid));
  }
  const double mean_dir = std::atan2(cy, cx);
  double lo = 1e9, hi = -1e9;
  for (auto& p : seg8) {
    p.angle = std::remainder(std::atan2(p.r - mid, p.c - mid) - mean_dir, 2.0 * std::numbers::pi);
    lo = std::min(lo, p.angle);
    hi = std::max(hi, p.angle);
  }
  const double frac = (3.0 / 7.0) * static_cast<double>(area7) / static_cast<double>(seg8.size());
  ASSERT_LT(frac, 1.0);
  const double cut = lo + frac * (hi - lo);
  for (const auto& p : seg8)
    if (p.angle <= cut) labels(p.s, p.r, p.c) = kScarClass;

  const auto v = aha17_scar_volumes(labels, prior, g.sample.labels.spacing);
  const double ratio = v.segment_ml(7) / v.segment_ml(8);
  EXPECT_NEAR(ratio, 7.0 / 3.0, 0.05 * 7.0 / 3.0);
}

TEST(TimeBins, BoundariesAndStatistics) {
  const auto bins = time_bin_report({row_at(5, 0.2), row_at(5, 0.4)});
  for (int b = 0; b < 7; ++b) EXPECT_EQ(bins[b].count, b == 1 ? 2u : 0u);
  EXPECT_NEAR(bins[1].mean, 0.3, 1e-15);
  EXPECT_NEAR(bins[1].sd, std::sqrt(0.02), 1e-15);

  const auto single = time_bin_report({row_at(0.0, 0.8)});
  EXPECT_EQ(single[0].count, 1u);
  EXPECT_EQ(single[0].mean, 0.8);
  EXPECT_EQ(single[0].sd, 0.0);

  const auto edge = time_bin_report({row_at(7.0, 0.5), row_at(90.0, 0.1), row_at(120.0, 0.3)});
  EXPECT_EQ(edge[1].count, 0u);
  EXPECT_EQ(edge[2].count, 1u);
  EXPECT_EQ(edge[6].count, 2u);

  const char* labels[] = {"[0,3)", "[3,7)", "[7,14)", "[14,21)", "[21,30)", "[30,60)", "[60,90]"};
  const double los[] = {0, 3, 7, 14, 21, 30, 60};
  const double his[] = {3, 7, 14, 21, 30, 60, 90};
  for (int b = 0; b < 7; ++b) {
    EXPECT_EQ(edge[b].label, labels[b]);
    EXPECT_EQ(edge[b].lo, los[b]);
    EXPECT_EQ(edge[b].hi, his[b]);
  }
  EXPECT_THROW(time_bin_report({}), InputError);
}

TEST(TimeBins, EveryRowLandsInExactlyOneBin) {
  Rng rng(9);
  std::vector<MetricsRow> rows;
  for (int i = 0; i < 300; ++i) rows.push_back(row_at(rng.uniform() * 90.0, rng.uniform()));
  std::size_t total = 0;
  for (const auto& b : time_bin_report(rows)) total += b.count;
  EXPECT_EQ(total, rows.size());
}

TEST(PairedTTest, DegenerateCases) {
  const auto same = paired_ttest({0.5, 0.6, 0.7}, {0.5, 0.6, 0.7});
  EXPECT_TRUE(same.degenerate);
  EXPECT_EQ(same.p, 1.0);
  EXPECT_EQ(same.t, 0.0);
  const auto shifted = paired_ttest({1.5, 2.5, 3.25}, {1.0, 2.0, 2.75});
  EXPECT_TRUE(shifted.degenerate);
  EXPECT_EQ(shifted.p, 0.0);
  EXPECT_THROW(paired_ttest({1.0}, {0.0}), InputError);
  EXPECT_THROW(paired_ttest({1.0, 2.0}, {0.0}), InputError);
}

TEST(PairedTTest, HandWorkedExample) {
  // d = (0.1, 0.2, 0.3): mean 0.2, sd 0.1, t = 0.2 / (0.1 / sqrt 3) = 2 sqrt 3.
  // With 2 degrees of freedom the two-sided p is 1 - |t| / sqrt(t^2 + 2).
  const auto r = paired_ttest({0.6, 0.7, 0.8}, {0.5, 0.5, 0.5});
  const double t = 2.0 * std::sqrt(3.0);
  EXPECT_NEAR(r.t, t, 1e-9);
  EXPECT_NEAR(r.p, 1.0 - t / std::sqrt(t * t + 2.0), 1e-9);
  EXPECT_NEAR(r.p, 0.0741799, 1e-7);
  EXPECT_EQ(r.n, 3u);
  EXPECT_FALSE(r.degenerate);
}

TEST(PairedTTest, MatchesClosedFormOnRandomInputs) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(30));
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform();
      b[i] = rng.uniform();
    }
    // Textbook form: t = sum(d) / sqrt((n sum(d^2) - sum(d)^2) / (n - 1)).
    double sd = 0, sd2 = 0;
    for (int i = 0; i < n; ++i) {
      sd += a[i] - b[i];
      sd2 += (a[i] - b[i]) * (a[i] - b[i]);
    }
    const double t = sd / std::sqrt((n * sd2 - sd * sd) / (n - 1.0));
    const double nu = n - 1.0;
    // Two-sided p via the regularized incomplete beta function.
    const double p = boost::math::ibeta(nu / 2.0, 0.5, nu / (nu + t * t));
    const auto r = paired_ttest(a, b);
    EXPECT_NEAR(r.t, t, 1e-9 * std::max(1.0, std::abs(t)));
    EXPECT_NEAR(r.p, p, 1e-9);
  }
}

class ReportPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    synth::DatasetRanges r;
    r.base.height = r.base.width = 32;
    r.base.pixel_mm = 2.0;
    r.base.slices = 4;
    r.base.ecg_samples = 64;
    data_ = new synth::Dataset(synth::generate_dataset(20, 3, r));
  }
  static void TearDownTestSuite() { delete data_; }

  static ModelConfig config(bool fused) {
    ModelConfig c;
    c.unet.base_width = 4;
    c.unet.depth = 2;
    c.unet.tap_depth = 1;
    c.ecg.samples = 64;
    c.ecg.channels = 4;
    c.ecg.latent = 8;
    c.gate_hidden = 4;
    c.film_hidden = 4;
    c.use_prior = fused;
    c.use_ecg = c.use_time = fused;
    return c;
  }

  static fs::path build_run(const std::string& name) {
    const fs::path run = fs::temp_directory_path() / ("taffseg_report_" + name);
    fs::remove_all(run);
    const TaffModel base(config(false), 1), full(config(true), 1);
    evaluate(base, data_->samples, data_->manifest, run / "baseline");
    evaluate(full, data_->samples, data_->manifest, run / "multimodal");
    report(run);
    return run;
  }

  static synth::Dataset* data_;
};
synth::Dataset* ReportPipeline::data_ = nullptr;

TEST_F(ReportPipeline, EvaluateWritesPerSampleArtifacts) {
  const fs::path run = build_run("artifacts");
  const auto test_ids = data_->manifest.ids_in(Split::test);
  EXPECT_EQ(lines_of(run / "multimodal" / "metrics.csv").size(), test_ids.size() + 1);
  EXPECT_EQ(lines_of(run / "multimodal" / "aha17_voxels.csv").size(), 2 * test_ids.size() + 1);
  EXPECT_TRUE(fs::exists(run / "multimodal" / "gate.csv"));
  EXPECT_FALSE(fs::exists(run / "baseline" / "gate.csv"));
  for (const auto& id : test_ids) {
    EXPECT_TRUE(fs::exists(run / "multimodal" / "predictions" / (id + "_pred.nii")));
    EXPECT_EQ(lines_of(run / "multimodal" / "attention" / (id + "_cross_lead.csv")).size(), 12u);
  }
}

TEST_F(ReportPipeline, VolumeTableSumsToTotal) {
  const fs::path run = build_run("volumes");
  const auto rows = lines_of(run / "report" / "aha17_volumes.csv");
  ASSERT_EQ(rows.size(), 1u + 17u + 2u);
  EXPECT_EQ(rows[0], "segment,gt_voxels,gt_ml,baseline_voxels,baseline_ml,multimodal_voxels,multimodal_ml");
  std::array<long, 3> sums{0, 0, 0}, totals{};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::stringstream ss(rows[i]);
    std::string label, cell;
    std::getline(ss, label, ',');
    std::vector<std::string> f;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    ASSERT_EQ(f.size(), 6u);
    for (int k = 0; k < 3; ++k) {
      const long v = std::stol(f[2 * k]);
      if (label == "total")
        totals[k] = v;
      else
        sums[k] += v;
    }
  }
  EXPECT_EQ(sums, totals);
  EXPECT_GT(totals[0], 0);
}

TEST_F(ReportPipeline, BinTableAndSignificanceTest) {
  const fs::path run = build_run("bins");
  const auto rows = lines_of(run / "report" / "time_bins.csv");
  ASSERT_EQ(rows.size(), 1u + 2u * 7u);
  const char* labels[] = {"[0,3)", "[3,7)", "[7,14)", "[14,21)", "[21,30)", "[30,60)", "[60,90]"};
  for (int b = 0; b < 7; ++b) EXPECT_NE(rows[1 + b].find(std::string("\"") + labels[b] + "\""), std::string::npos);
  const std::string summary = slurp(run / "report" / "summary.txt");
  EXPECT_NE(summary.find("multimodal vs baseline"), std::string::npos);
  EXPECT_NE(summary.find("p = "), std::string::npos);
  EXPECT_NE(summary.find("dice delta"), std::string::npos);
  for (const char* f : {"metrics.csv", "gate_summary.csv", "attention_cross_lead_multimodal.csv",
                        "attention_temporal_multimodal.csv"})
    EXPECT_TRUE(fs::exists(run / "report" / f)) << f;
  EXPECT_FALSE(fs::exists(run / "report" / "attention_cross_lead_baseline.csv"));
}

TEST_F(ReportPipeline, RegeneratedReportIsByteIdentical) {
  const fs::path a = build_run("bytes_a");
  const fs::path b = build_run("bytes_b");
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(a / "report")) {
    EXPECT_EQ(slurp(e.path()), slurp(b / "report" / e.path().filename())) << e.path().filename();
    ++compared;
  }
  EXPECT_GE(compared, 7u);
  // Re-running report over the same directory is also stable.
  const std::string before = slurp(a / "report" / "summary.txt");
  report(a);
  EXPECT_EQ(slurp(a / "report" / "summary.txt"), before);
}

TEST(Report, MissingInputsAreNamed) {
  const fs::path run = fs::temp_directory_path() / "taffseg_report_missing";
  fs::remove_all(run);
  fs::create_directories(run / "multimodal");
  EXPECT_THROW(report(run), InputError);
  std::ofstream(run / "multimodal" / "evaluation.json") << R"({"model": {"use_ecg": false}})";
  try {
    report(run);
    FAIL() << "missing metrics accepted";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("metrics.csv"), std::string::npos);
  }
  EXPECT_THROW(report(run / "nope"), IoError);
}
