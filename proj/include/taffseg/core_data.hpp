#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/atlas_prior.hpp"
#include "taffseg/tensor.hpp"
#include "taffseg/volume.hpp"

namespace taff {

inline constexpr int kNumClasses = 4;
inline constexpr int kNumLeads = 12;
inline constexpr double kAdmissionWindowDays = 90.0;

enum LabelClass : std::uint8_t { background = 0, blood_pool = 1, myocardium = 2, scar = 3 };

using Date = std::chrono::sys_days;
Date parse_date(const std::string& iso);
std::string format_date(Date d);

const std::array<std::string, kNumLeads>& standard_lead_names();
int lead_index(const std::string& name);

// Per-voxel class ids over a slice stack.
struct LabelMask {
  MaskVolume labels;
  Spacing spacing;

  // Throws DataError naming the first value outside {0,1,2,3}.
  void validate() const;
  MaskVolume class_mask(std::uint8_t cls) const;
  // Myocardium including scar, the region the atlas prior partitions.
  MaskVolume myocardium_region() const;
  std::size_t count(std::uint8_t cls) const;
};

struct EcgRecord {
  // (12, T) in millivolts.
  Tensor waveform;
  std::array<std::string, kNumLeads> lead_names = standard_lead_names();
  Date acquired_at{};

  int samples() const { return waveform.rank() == 2 ? waveform.dim(1) : 0; }
  void validate() const;
};

struct PairedSample {
  std::string id;
  ImageVolume mri;
  atlas::Aha17Prior prior;
  LabelMask labels;
  EcgRecord ecg;
  Date mri_acquired_at{};
  double t_interval_days = 0.0;
  double t_norm = 0.0;

  int slices() const { return mri.slices; }
  void validate() const;
};

enum class Split { train, val, test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DatasetManifest {
  std::vector<std::string> ids;
  std::vector<Split> splits;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.7, 0.1, 0.2};

  std::vector<std::string> ids_in(Split s) const;
  std::array<std::size_t, 3> sizes() const;
};

// days / 90, clamped to 1 (with a warning) beyond the admission window.
double normalize_interval(double days);

DatasetManifest split_dataset(const std::vector<std::string>& ids, std::uint64_t seed);

// (4, H, W) one-hot encoding of one slice of class ids.
Tensor one_hot_labels(std::span<const std::uint8_t> labels, int height, int width);
Tensor one_hot_labels(const LabelMask& mask, int slice);
// Inverse of one_hot_labels on (C, H, W) scores.
std::vector<std::uint8_t> argmax_labels(const Tensor& scores);

// Z-score over nonzero voxels, then clip to +/- clip_sd.
void normalize_intensity(ImageVolume& volume, double clip_sd = 5.0);

// On-disk layout: <root>/<id>/{mri.nii, labels.nii, ecg.csv, meta.json}.
void write_sample(const std::filesystem::path& dir, const PairedSample& sample,
                  const nlohmann::json& extra_meta = nlohmann::json::object());
PairedSample read_sample(const std::filesystem::path& dir, const atlas::PartitionConfig& cfg = {});

void write_ecg_csv(const std::filesystem::path& path, const EcgRecord& ecg);
Tensor read_ecg_csv(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace taff
