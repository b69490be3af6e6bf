#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "taffseg/atlas_prior.hpp"
#include "taffseg/core_data.hpp"

// Segmentation metrics, AHA-17 scar volumes, interval-bin summaries, the
// paired t-test, and the evaluate/report pipeline that writes them to disk.
namespace taff {
class TaffModel;
}

namespace taff::eval {

inline constexpr std::uint8_t kScarClass = 3;

struct OverlapMetrics {
  double dice = 0.0;
  // Missing when the denominator set is empty and the other is not.
  std::optional<double> precision;
  std::optional<double> sensitivity;
  std::size_t pred_voxels = 0;
  std::size_t gt_voxels = 0;
  std::size_t overlap_voxels = 0;
};

// Binary overlap of `cls` in two label volumes of identical geometry.
OverlapMetrics overlap(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t cls);

struct MetricsRow {
  std::string sample_id;
  double t_interval_days = 0.0;
  double t_norm = 0.0;
  // Index 1..3 = blood pool, myocardium, scar; index 0 unused.
  std::array<OverlapMetrics, 4> classes{};
  double pred_scar_ml = 0.0;
  double gt_scar_ml = 0.0;
  // |V_pred - V_gt| for scar, millilitres.
  double volume_difference_ml = 0.0;

  const OverlapMetrics& scar() const { return classes[kScarClass]; }
};

// Per-volume metrics over the whole slice stack. Throws InputError on bad spacing.
MetricsRow compute_metrics(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing);

struct Aha17Volumes {
  std::array<std::size_t, atlas::kSegments> voxels{};
  // Scar voxels outside every segment channel.
  std::size_t extra_voxels = 0;
  std::size_t total_voxels = 0;
  double voxel_ml = 0.0;

  double segment_ml(int segment) const { return static_cast<double>(voxels.at(segment - 1)) * voxel_ml; }
  double extra_ml() const { return static_cast<double>(extra_voxels) * voxel_ml; }
  double total_ml() const { return static_cast<double>(total_voxels) * voxel_ml; }
};

Aha17Volumes aha17_scar_volumes(const MaskVolume& labels, const atlas::Aha17Prior& prior, const Spacing& spacing);

struct BinSummary {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double mean = 0.0;
  // Sample standard deviation; 0 for fewer than two rows.
  double sd = 0.0;
};

// Mean scar Dice per acquisition-interval bin.
std::array<BinSummary, 7> time_bin_report(const std::vector<MetricsRow>& rows);

struct TTest {
  std::size_t n = 0;
  double mean_difference = 0.0;
  double t = 0.0;
  double p = 1.0;
  // True when the differences have zero variance and the fallback rule applied.
  bool degenerate = false;
};

// Two-sided paired t-test on a - b with n-1 degrees of freedom.
TTest paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Runs the model over one split and writes predictions plus per-sample tables to out_dir.
struct EvaluateOptions {
  Split split = Split::test;
  bool write_predictions = true;
};
std::vector<MetricsRow> evaluate(const TaffModel& model, const std::vector<PairedSample>& samples,
                                 const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                                 const EvaluateOptions& opt = {});

// Reads every evaluated model directory under run_dir (those holding evaluation.json) and writes
// the report bundle to run_dir/report. Returns the report directory.
std::filesystem::path report(const std::filesystem::path& run_dir);

}  // namespace taff::eval
