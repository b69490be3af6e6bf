#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <set>

#include "taffseg/core_data.hpp"
#include "taffseg/errors.hpp"
#include "taffseg/nifti.hpp"
#include "taffseg/random.hpp"

namespace fs = std::filesystem;
using namespace taff;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("taffseg_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> make_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(NormalizeInterval, Examples) {
  EXPECT_DOUBLE_EQ(normalize_interval(0.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_interval(90.0), 1.0);
  EXPECT_DOUBLE_EQ(normalize_interval(45.0), 0.5);
}

TEST(NormalizeInterval, ClampsBeyondWindowAndRejectsNegative) {
  EXPECT_DOUBLE_EQ(normalize_interval(200.0), 1.0);
  EXPECT_THROW(normalize_interval(-1.0), InputError);
}

TEST(NormalizeInterval, MonotoneAndLinearInsideWindow) {
  double prev = -1.0;
  for (double d = 0.0; d <= 150.0; d += 0.5) {
    const double v = normalize_interval(d);
    EXPECT_GE(v, prev);
    if (d <= 90.0) EXPECT_NEAR(v, d / 90.0, 1e-15);
    prev = v;
  }
}

TEST(SplitDataset, SizesFollowFloorRule) {
  auto sizes = [](int n) { return split_dataset(make_ids(n), 3).sizes(); };
  EXPECT_EQ(sizes(103), (std::array<std::size_t, 3>{72, 10, 21}));
  EXPECT_EQ(sizes(10), (std::array<std::size_t, 3>{7, 1, 2}));
  EXPECT_EQ(sizes(100), (std::array<std::size_t, 3>{70, 10, 20}));
}

TEST(SplitDataset, DeterministicDisjointExhaustive) {
  for (int n : {10, 11, 37, 103, 250}) {
    for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
      const auto ids = make_ids(n);
      const auto a = split_dataset(ids, seed);
      const auto b = split_dataset(ids, seed);
      EXPECT_EQ(a.splits, b.splits);
      std::set<std::string> seen;
      std::size_t total = 0;
      for (Split s : {Split::train, Split::val, Split::test}) {
        for (const auto& id : a.ids_in(s)) EXPECT_TRUE(seen.insert(id).second);
        total += a.ids_in(s).size();
      }
      EXPECT_EQ(total, static_cast<std::size_t>(n));
    }
  }
  EXPECT_NE(split_dataset(make_ids(50), 1).splits, split_dataset(make_ids(50), 2).splits);
}

TEST(SplitDataset, RejectsTooFewIds) { EXPECT_THROW(split_dataset(make_ids(9), 0), ConfigError); }

TEST(OneHot, AllBackground) {
  std::vector<std::uint8_t> m(6 * 5, 0);
  const Tensor t = one_hot_labels(m, 6, 5);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 5; ++c) {
      EXPECT_EQ(t.at(0, r, c), 1.0);
      for (int k = 1; k < 4; ++k) EXPECT_EQ(t.at(k, r, c), 0.0);
    }
}

TEST(OneHot, SingleScarPixel) {
  std::vector<std::uint8_t> m(4 * 4, 0);
  m[2 * 4 + 1] = scar;
  const Tensor t = one_hot_labels(m, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_EQ(t.at(3, r, c), (r == 2 && c == 1) ? 1.0 : 0.0);
}

TEST(OneHot, PartitionAndArgmaxRoundTrip) {
  Rng rng(7);
  std::vector<std::uint8_t> m(9 * 11);
  for (auto& v : m) v = static_cast<std::uint8_t>(rng.below(4));
  const Tensor t = one_hot_labels(m, 9, 11);
  for (int r = 0; r < 9; ++r)
    for (int c = 0; c < 11; ++c) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += t.at(k, r, c);
      EXPECT_EQ(s, 1.0);
    }
  EXPECT_EQ(argmax_labels(t), m);
}

TEST(OneHot, OutOfRangeNamesValue) {
  std::vector<std::uint8_t> m(4, 0);
  m[3] = 7;
  try {
    one_hot_labels(m, 2, 2);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos);
  }
}

TEST(Dates, ParseFormatRoundTrip) {
  const Date d = parse_date("2023-02-28");
  EXPECT_EQ(format_date(d + std::chrono::days(1)), "2023-03-01");
  EXPECT_THROW(parse_date("2023-13-01"), InputError);
  EXPECT_EQ(lead_index("aVF"), 5);
  EXPECT_THROW(lead_index("V7"), InputError);
}

TEST(Nifti, RoundTripTypes) {
  const auto dir = scratch_dir("nifti");
  nifti::Image img;
  img.dims = {5, 4, 3, 2};
  img.pixdim = {1.25, 1.5, 8.0, 1.0};
  Rng rng(3);
  img.values.resize(img.voxel_count());
  for (auto& v : img.values) v = std::round(rng.uniform(0.0, 200.0));
  for (auto t : {nifti::DataType::uint8, nifti::DataType::int16, nifti::DataType::int32, nifti::DataType::float32,
                 nifti::DataType::float64}) {
    img.datatype = t;
    nifti::write(dir / "a.nii", img);
    EXPECT_EQ(fs::file_size(dir / "a.nii"), 352 + img.voxel_count() * (t == nifti::DataType::uint8    ? 1
                                                                        : t == nifti::DataType::int16 ? 2
                                                                        : t == nifti::DataType::float64 ? 8
                                                                                                        : 4));
    const auto back = nifti::read(dir / "a.nii");
    EXPECT_EQ(back.dims, img.dims);
    EXPECT_EQ(back.pixdim, img.pixdim);
    EXPECT_EQ(back.values, img.values);
  }
  fs::remove_all(dir);
}

TEST(Nifti, MissingFileIsIoError) { EXPECT_THROW(nifti::read("/nonexistent/x.nii"), IoError); }

TEST(SampleIo, WriteReadRoundTrip) {
  const auto dir = scratch_dir("sample");
  PairedSample s;
  s.id = "S0001";
  const int S = 5, H = 12, W = 10;
  Rng rng(11);
  s.mri = ImageVolume(S, H, W);
  for (auto& v : s.mri.data) v = rng.normal();
  s.labels.labels = MaskVolume(S, H, W, 0);
  s.labels.spacing = {1.25, 1.5, 8.0};
  for (int k = 0; k < S; ++k)
    for (int r = 3; r < 9; ++r)
      for (int c = 3; c < 7; ++c) s.labels.labels(k, r, c) = (r == 3 || r == 8 || c == 3 || c == 6) ? myocardium : blood_pool;
  for (int k = 0; k < S; ++k) s.labels.labels(k, 3, 4) = scar;
  for (int r = 3; r < 9; ++r)
    for (int c = 3; c < 7; ++c)
      if (s.labels.labels(S - 1, r, c) == blood_pool) s.labels.labels(S - 1, r, c) = myocardium;
  s.prior = atlas::build_aha17(s.labels.myocardium_region(), s.labels.class_mask(blood_pool));
  s.ecg.waveform = Tensor({12, 80});
  for (auto& v : s.ecg.waveform.values()) v = rng.normal() * 0.3;
  s.mri_acquired_at = parse_date("2023-05-10");
  s.ecg.acquired_at = parse_date("2023-04-20");
  s.t_interval_days = 20.0;
  s.t_norm = normalize_interval(20.0);
  s.validate();

  write_sample(dir / s.id, s, {{"note", "x"}});
  const PairedSample b = read_sample(dir / s.id);
  EXPECT_EQ(b.id, s.id);
  EXPECT_EQ(b.labels.labels, s.labels.labels);
  EXPECT_EQ(b.prior, s.prior);
  EXPECT_DOUBLE_EQ(b.labels.spacing.slice_mm, 8.0);
  EXPECT_DOUBLE_EQ(b.labels.spacing.row_mm, 1.25);
  for (std::size_t i = 0; i < s.mri.size(); ++i) EXPECT_NEAR(b.mri.data[i], s.mri.data[i], 1e-6);
  for (std::size_t i = 0; i < s.ecg.waveform.size(); ++i) EXPECT_NEAR(b.ecg.waveform[i], s.ecg.waveform[i], 1e-6);
  EXPECT_EQ(b.mri_acquired_at, s.mri_acquired_at);
  EXPECT_EQ(b.ecg.acquired_at, s.ecg.acquired_at);
  EXPECT_DOUBLE_EQ(b.t_interval_days, 20.0);
  EXPECT_DOUBLE_EQ(b.t_norm, s.t_norm);

  DatasetManifest m = split_dataset(make_ids(12), 5);
  write_manifest(dir / "manifest.json", m);
  const auto mb = read_manifest(dir / "manifest.json");
  EXPECT_EQ(mb.ids, m.ids);
  EXPECT_EQ(mb.splits, m.splits);
  EXPECT_EQ(mb.seed, 5u);
  fs::remove_all(dir);
}

TEST(SampleIo, EcgCsvRejectsWrongLeadCount) {
  const auto dir = scratch_dir("csv");
  {
    std::ofstream f(dir / "ecg.csv");
    f << "I,II\n0.1,0.2\n";
  }
  EXPECT_THROW(read_ecg_csv(dir / "ecg.csv"), DataError);
  fs::remove_all(dir);
}

TEST(LabelMask, ValidateNamesBadValue) {
  LabelMask m;
  m.labels = MaskVolume(1, 2, 2, 0);
  m.labels.data[2] = 9;
  EXPECT_THROW(m.validate(), DataError);
}

TEST(NormalizeIntensity, ZeroMeanUnitSdOverNonzero) {
  ImageVolume v(2, 8, 8, 0.0);
  Rng rng(1);
  for (std::size_t i = 10; i < v.size(); ++i) v.data[i] = rng.normal(3.0, 2.0);
  normalize_intensity(v);
  double s = 0, s2 = 0;
  std::size_t n = 0;
  for (std::size_t i = 10; i < v.size(); ++i) {
    s += v.data[i];
    s2 += v.data[i] * v.data[i];
    ++n;
  }
  EXPECT_NEAR(s / n, 0.0, 1e-9);
  EXPECT_NEAR(s2 / n, 1.0, 1e-9);
}
