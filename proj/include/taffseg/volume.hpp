#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "taffseg/errors.hpp"

namespace taff {

// Physical voxel size in millimetres.
struct Spacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  double slice_mm = 1.0;

  double voxel_ml() const { return row_mm * col_mm * slice_mm / 1000.0; }
  bool valid() const { return row_mm > 0.0 && col_mm > 0.0 && slice_mm > 0.0; }
};

// Slice-major stack: index (slice, row, col), col fastest.
template <typename T>
struct Volume {
  int slices = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Volume() = default;
  Volume(int s, int h, int w, T fill = T{})
      : slices(s), height(h), width(w), data(static_cast<std::size_t>(s) * h * w, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  T& operator()(int s, int r, int c) { return data[s * plane() + static_cast<std::size_t>(r) * width + c]; }
  T operator()(int s, int r, int c) const { return data[s * plane() + static_cast<std::size_t>(r) * width + c]; }

  std::span<T> slice(int s) { return {data.data() + s * plane(), plane()}; }
  std::span<const T> slice(int s) const { return {data.data() + s * plane(), plane()}; }

  bool same_geometry(int s, int h, int w) const { return slices == s && height == h && width == w; }
  template <typename U>
  bool same_geometry(const Volume<U>& o) const {
    return same_geometry(o.slices, o.height, o.width);
  }

  bool operator==(const Volume&) const = default;
};

using MaskVolume = Volume<std::uint8_t>;
using ImageVolume = Volume<double>;

}  // namespace taff
