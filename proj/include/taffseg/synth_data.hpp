#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "taffseg/core_data.hpp"

// Deterministic paired LGE-phantom + 12-lead ECG generator.
//
// The ECG encodes which AHA segments are scarred (lead pattern from the
// territory table, zone from the Q-wave / ST-shift mix) and how transmural the
// scar is. Staleness shrinks the scar seen by the ECG and adds noise, both in
// proportion to the normalized acquisition interval.
namespace taff::synth {

struct PhantomSpec {
  int slices = 8;
  int height = 64;
  int width = 64;
  double pixel_mm = 1.0;
  double slice_mm = 8.0;
  // Base-slice radii; the ventricle tapers toward the apex.
  double outer_radius_mm = 24.0;
  double inner_radius_mm = 15.0;
  // Radius factor of the last non-apex slice relative to the base.
  double apical_taper = 0.6;
  // Trailing slices that carry a myocardial cap but no blood pool.
  int apex_slices = 1;
  // Offset of the ventricle centre from the image centre, whole pixels.
  int center_offset_row = 0;
  int center_offset_col = 0;

  std::vector<int> scar_segments{7};
  // Fraction of the segment's wall area, growing outward from the endocardium.
  double transmurality = 0.7;

  // Mean intensity per class: background, blood pool, myocardium, scar.
  std::array<double, 4> intensity{0.1, 0.75, 0.2, 0.6};
  double noise_sd = 0.12;
  // Bright, scar-like blobs placed in healthy myocardium.
  int artifacts = 0;
  double artifact_intensity = 0.4;
  double artifact_radius_mm = 3.0;

  int ecg_samples = 600;
  double ecg_base_noise = 0.01;

  void validate() const;
};

struct StalenessModel {
  // Transmurality lost per unit of normalized interval.
  double growth_rate = 0.4;
  // ECG noise standard deviation (mV) added per unit of normalized interval.
  double ecg_noise_gain = 0.12;

  void validate() const;
};

// Per-segment scar state as the ECG sees it (transmurality, 0 = healthy).
using SegmentState = std::array<double, 17>;

SegmentState scar_state_at_ecg(const PhantomSpec& spec, const StalenessModel& staleness, double t_norm);

// Lead weights of a segment from the clinical territory table, max 1.
std::array<double, kNumLeads> segment_lead_weights(int segment);

// Noise-free template beat plus scar deformation. Returns (12, T).
Tensor ecg_waveform(const SegmentState& state, int samples, double amplitude_scale = 1.0);
// Peak absolute scar deformation over all leads.
double deformation_magnitude(const SegmentState& state, int samples);

struct GeneratedSample {
  PairedSample sample;
  // Generator ground truth, written into the sample metadata.
  std::vector<int> scar_segments;
  double transmurality = 0.0;
};

GeneratedSample synth_phantom_pair(const PhantomSpec& spec, const StalenessModel& staleness, double t_interval_days,
                                   std::uint64_t seed);

// The seven reporting bins of the acquisition interval, in days.
struct IntervalBin {
  double lo;
  double hi;
  bool closed_right;
};
const std::array<IntervalBin, 7>& interval_bins();
int interval_bin_of(double days);

struct DatasetRanges {
  PhantomSpec base;
  StalenessModel staleness;
  double transmurality_min = 0.4;
  double transmurality_max = 1.0;
  double second_segment_probability = 0.4;
  int max_center_offset = 2;
  double radius_jitter = 0.08;
  int artifacts_max = 3;
  double scar_intensity_min = 0.45;
  double scar_intensity_max = 0.7;
};

struct Dataset {
  std::vector<PairedSample> samples;
  DatasetManifest manifest;
};

// Generates n samples, interval bins filled round-robin, split 7:1:2 by seed.
// Writes the on-disk layout plus manifest.json when out_dir is non-empty.
Dataset generate_dataset(int n, std::uint64_t seed, const DatasetRanges& ranges,
                         const std::filesystem::path& out_dir = {});

// Loads every sample listed in <dir>/manifest.json.
Dataset load_dataset(const std::filesystem::path& dir);

// Unpaired ECG corpus for reconstruction pretraining.
std::vector<EcgRecord> generate_ecg_corpus(int n, std::uint64_t seed, const DatasetRanges& ranges);

}  // namespace taff::synth
