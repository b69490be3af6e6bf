#include "taffseg/atlas_prior.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace taff::atlas {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

bool any_set(std::span<const std::uint8_t> v) {
  return std::any_of(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; });
}

std::size_t count_set(std::span<const std::uint8_t> v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; }));
}

}  // namespace

std::string to_string(Zone z) {
  switch (z) {
    case Zone::none: return "none";
    case Zone::basal: return "basal";
    case Zone::mid: return "mid";
    case Zone::apical: return "apical";
    case Zone::apex: return "apex";
  }
  return "none";
}

Zone zone_of_segment(int segment) {
  if (segment >= 1 && segment <= 6) return Zone::basal;
  if (segment >= 7 && segment <= 12) return Zone::mid;
  if (segment >= 13 && segment <= 16) return Zone::apical;
  if (segment == 17) return Zone::apex;
  throw InputError("AHA segment id out of range: " + std::to_string(segment));
}

void PartitionConfig::validate() const {
  if (!(reference_angle >= 0.0 && reference_angle < kTwoPi))
    throw ConfigError("reference_angle must lie in [0, 2pi), got " + std::to_string(reference_angle));
}

MaskVolume Aha17Prior::channel(int segment) const {
  zone_of_segment(segment);
  MaskVolume out(slices, height, width, 0);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = segment_map.data[i] == segment ? 1 : 0;
  return out;
}

std::vector<std::uint8_t> Aha17Prior::channels() const {
  const std::size_t n = segment_map.size();
  std::vector<std::uint8_t> out(kSegments * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int s = segment_map.data[i];
    if (s > 0) out[(s - 1) * n + i] = 1;
  }
  return out;
}

Centroid mask_centroid(std::span<const std::uint8_t> mask, int height, int width) {
  double sr = 0.0, sc = 0.0;
  std::size_t n = 0;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c)
      if (mask[static_cast<std::size_t>(r) * width + c]) {
        sr += r;
        sc += c;
        ++n;
      }
  if (n == 0) throw GeometryError("centroid of an empty mask");
  return {sr / static_cast<double>(n), sc / static_cast<double>(n)};
}

std::vector<Zone> longitudinal_zones(const MaskVolume& myo, const MaskVolume& bp, const PartitionConfig& cfg) {
  cfg.validate();
  if (!myo.same_geometry(bp)) throw GeometryError("myocardium and blood-pool volumes differ in shape");
  std::vector<int> ms;
  for (int s = 0; s < myo.slices; ++s)
    if (any_set(myo.slice(s))) ms.push_back(s);
  const int n = static_cast<int>(ms.size());
  if (n < 4)
    throw GeometryError("need at least 4 slices with myocardium for AHA partitioning, found " + std::to_string(n));

  auto has_bp = [&](int s) { return any_set(bp.slice(s)); };
  int head = 0;
  while (head < n && !has_bp(ms[head])) ++head;
  int tail = 0;
  while (tail < n && !has_bp(ms[n - 1 - tail])) ++tail;

  // Orientation: the apex is the end lacking blood pool; otherwise the end
  // with the smaller myocardial cross-section (ties resolve to the last slice).
  const auto area_first = count_set(myo.slice(ms.front()));
  const auto area_last = count_set(myo.slice(ms.back()));
  const bool by_area_at_end = area_last <= area_first;

  bool apex_at_end = true;
  int apex_count = 0;
  if (cfg.apex_rule == ApexRule::last_slice_without_blood_pool && head < n) {
    if (tail > 0 && head == 0) {
      apex_at_end = true;
      apex_count = tail;
    } else if (head > 0 && tail == 0) {
      apex_at_end = false;
      apex_count = head;
    } else {
      apex_at_end = by_area_at_end;
      apex_count = apex_at_end ? tail : head;
    }
  } else {
    apex_at_end = by_area_at_end;
  }
  if (apex_count == 0) apex_count = static_cast<int>(std::ceil(n / 6.0));
  apex_count = std::min(apex_count, n - 3);

  const int m = n - apex_count;
  const int q = m / 3, r = m % 3;
  const int n_basal = q + (r > 0 ? 1 : 0);
  const int n_mid = q + (r > 1 ? 1 : 0);

  std::vector<Zone> zones(myo.slices, Zone::none);
  for (int i = 0; i < n; ++i) {
    // Position counted from the base end.
    const int k = apex_at_end ? i : n - 1 - i;
    Zone z;
    if (k < n_basal)
      z = Zone::basal;
    else if (k < n_basal + n_mid)
      z = Zone::mid;
    else if (k < m)
      z = Zone::apical;
    else
      z = Zone::apex;
    zones[ms[i]] = z;
  }
  return zones;
}

std::vector<int> angular_sectors(std::span<const std::uint8_t> slice_mask, int height, int width,
                                 Centroid centroid, int n_sectors, double reference_angle) {
  if (n_sectors != 4 && n_sectors != 6) throw InputError("n_sectors must be 4 or 6");
  if (!std::isfinite(centroid.row) || !std::isfinite(centroid.col)) throw InputError("centroid must be finite");
  if (slice_mask.size() != static_cast<std::size_t>(height) * width)
    throw GeometryError("slice mask size does not match height x width");
  std::vector<int> out(slice_mask.size(), -1);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * width + c;
      if (!slice_mask[i]) continue;
      const double up = centroid.row - r;
      const double right = c - centroid.col;
      double theta = std::atan2(up, right) - std::numbers::pi / 2.0 - reference_angle;
      theta = std::fmod(theta, kTwoPi);
      if (theta < 0.0) theta += kTwoPi;
      int sector = static_cast<int>(std::floor(n_sectors * theta / kTwoPi));
      out[i] = std::clamp(sector, 0, n_sectors - 1);
    }
  }
  return out;
}

Aha17Prior build_aha17(const MaskVolume& myo, const MaskVolume& bp, const PartitionConfig& cfg) {
  Aha17Prior prior;
  prior.slices = myo.slices;
  prior.height = myo.height;
  prior.width = myo.width;
  prior.reference_angle = cfg.reference_angle;
  prior.slice_zones = longitudinal_zones(myo, bp, cfg);
  prior.segment_map = MaskVolume(myo.slices, myo.height, myo.width, 0);
  for (int s = 0; s < myo.slices; ++s) {
    const Zone z = prior.slice_zones[s];
    if (z == Zone::none) continue;
    auto myo_s = myo.slice(s);
    auto out = prior.segment_map.slice(s);
    if (z == Zone::apex) {
      for (std::size_t i = 0; i < myo_s.size(); ++i)
        if (myo_s[i]) out[i] = 17;
      continue;
    }
    auto bp_s = bp.slice(s);
    const Centroid ctr = any_set(bp_s) ? mask_centroid(bp_s, myo.height, myo.width)
                                       : mask_centroid(myo_s, myo.height, myo.width);
    const int n_sectors = z == Zone::apical ? 4 : 6;
    const int first = z == Zone::basal ? 1 : (z == Zone::mid ? 7 : 13);
    const auto sectors = angular_sectors(myo_s, myo.height, myo.width, ctr, n_sectors, cfg.reference_angle);
    for (std::size_t i = 0; i < sectors.size(); ++i)
      if (sectors[i] >= 0) out[i] = static_cast<std::uint8_t>(first + sectors[i]);
  }
  return prior;
}

Aha17Prior prior_from_channels(std::span<const std::uint8_t> channels, int slices, int height, int width,
                               double reference_angle) {
  const std::size_t n = static_cast<std::size_t>(slices) * height * width;
  if (channels.size() != kSegments * n) throw GeometryError("prior channel tensor has the wrong size");
  Aha17Prior prior;
  prior.slices = slices;
  prior.height = height;
  prior.width = width;
  prior.reference_angle = reference_angle;
  prior.segment_map = MaskVolume(slices, height, width, 0);
  prior.slice_zones.assign(slices, Zone::none);
  for (int seg = 1; seg <= kSegments; ++seg) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!channels[(seg - 1) * n + i]) continue;
      if (prior.segment_map.data[i] != 0) throw InvariantError("prior channels overlap");
      prior.segment_map.data[i] = static_cast<std::uint8_t>(seg);
      prior.slice_zones[i / prior.segment_map.plane()] = zone_of_segment(seg);
    }
  }
  return prior;
}

}  // namespace taff::atlas
