#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "taffseg/volume.hpp"

// AHA 17-segment anatomical prior built from left-ventricular masks.
//
// Slices run from base (index 0) to apex unless the masks indicate the
// opposite orientation; the apical end is detected from the masks. Angles
// are measured counterclockwise from image "up" (decreasing row) plus the
// configured reference angle.
namespace taff::atlas {

inline constexpr int kSegments = 17;

enum class Zone : std::uint8_t { none, basal, mid, apical, apex };

std::string to_string(Zone z);
Zone zone_of_segment(int segment);

enum class ApexRule { last_slice_without_blood_pool, most_apical_fraction };

struct PartitionConfig {
  double reference_angle = 0.0;
  ApexRule apex_rule = ApexRule::last_slice_without_blood_pool;

  void validate() const;
};

struct Centroid {
  double row = 0.0;
  double col = 0.0;
};

struct Aha17Prior {
  int slices = 0;
  int height = 0;
  int width = 0;
  double reference_angle = 0.0;
  // Zone label per slice (Zone::none where the slice has no myocardium).
  std::vector<Zone> slice_zones;
  // Segment id (1-17) per voxel, 0 outside the myocardium. The 17 binary
  // channels are views of this labelling, which makes them disjoint.
  MaskVolume segment_map;

  std::uint8_t channel_value(int segment, int s, int r, int c) const {
    return segment_map(s, r, c) == segment ? 1 : 0;
  }
  // Binary mask of one segment (1-based id).
  MaskVolume channel(int segment) const;
  // Channel-major 17 x slices x H x W binary tensor, the layout written to disk.
  std::vector<std::uint8_t> channels() const;

  bool operator==(const Aha17Prior&) const = default;
};

Centroid mask_centroid(std::span<const std::uint8_t> mask, int height, int width);

std::vector<Zone> longitudinal_zones(const MaskVolume& myo, const MaskVolume& bp, const PartitionConfig& cfg);

// Sector id per pixel of a slice, -1 for pixels outside the mask. An empty
// mask yields an all -1 assignment.
std::vector<int> angular_sectors(std::span<const std::uint8_t> slice_mask, int height, int width,
                                 Centroid centroid, int n_sectors, double reference_angle);

Aha17Prior build_aha17(const MaskVolume& myo, const MaskVolume& bp, const PartitionConfig& cfg = {});

// Rebuilds a prior from its 17-channel form (e.g. read back from disk).
Aha17Prior prior_from_channels(std::span<const std::uint8_t> channels, int slices, int height, int width,
                               double reference_angle);

}  // namespace taff::atlas
