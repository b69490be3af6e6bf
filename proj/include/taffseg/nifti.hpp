#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace taff::nifti {

// Subset of NIfTI-1 datatype codes that this project reads and writes.
enum class DataType : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
};

struct Image {
  // dims[0..3] = nx, ny, nz, nt (unused trailing dims are 1).
  std::array<int, 4> dims{1, 1, 1, 1};
  // Voxel size along x, y, z (mm) and t.
  std::array<double, 4> pixdim{1.0, 1.0, 1.0, 1.0};
  DataType datatype = DataType::float32;
  // x fastest, then y, z, t.
  std::vector<double> values;

  std::size_t voxel_count() const;
};

// Single-file (.nii, "n+1") little-endian writer. Values are cast to the
// requested datatype; integer types round to nearest.
void write(const std::filesystem::path& path, const Image& image);
Image read(const std::filesystem::path& path);

}  // namespace taff::nifti
