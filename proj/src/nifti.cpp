#include "taffseg/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "taffseg/errors.hpp"

namespace taff::nifti {

namespace {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

// Byte offsets within the 348-byte nifti_1_header.
constexpr int kOffDim = 40;
constexpr int kOffDatatype = 70;
constexpr int kOffBitpix = 72;
constexpr int kOffPixdim = 76;
constexpr int kOffVoxOffset = 108;
constexpr int kOffSclSlope = 112;
constexpr int kOffSclInter = 116;
constexpr int kOffXyztUnits = 123;
constexpr int kOffDescrip = 148;
constexpr int kOffQformCode = 252;
constexpr int kOffSformCode = 254;
constexpr int kOffSrowX = 280;
constexpr int kOffMagic = 344;

template <typename T>
void put(std::vector<char>& buf, int off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, int off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

int bytes_per_voxel(DataType t) {
  switch (t) {
    case DataType::uint8: return 1;
    case DataType::int16: return 2;
    case DataType::int32: return 4;
    case DataType::float32: return 4;
    case DataType::float64: return 8;
  }
  throw DataError("unsupported NIfTI datatype " + std::to_string(static_cast<int>(t)));
}

template <typename T>
void encode(std::span<const double> src, char* dst) {
  for (std::size_t i = 0; i < src.size(); ++i) {
    T v;
    if constexpr (std::is_integral_v<T>) {
      v = static_cast<T>(std::lround(src[i]));
    } else {
      v = static_cast<T>(src[i]);
    }
    std::memcpy(dst + i * sizeof(T), &v, sizeof(T));
  }
}

template <typename T>
void decode(const char* src, std::vector<double>& dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    dst[i] = static_cast<double>(v);
  }
}

}  // namespace

std::size_t Image::voxel_count() const {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

void write(const std::filesystem::path& path, const Image& image) {
  if (image.values.size() != image.voxel_count())
    throw DataError("NIfTI write: value count does not match dims for " + path.string());
  const int ndim = image.dims[3] > 1 ? 4 : (image.dims[2] > 1 ? 3 : 2);
  std::vector<char> hdr(kVoxOffset, 0);
  put<std::int32_t>(hdr, 0, kHeaderSize);
  put<std::int16_t>(hdr, kOffDim, static_cast<std::int16_t>(ndim));
  for (int i = 0; i < 4; ++i) put<std::int16_t>(hdr, kOffDim + 2 * (i + 1), static_cast<std::int16_t>(image.dims[i]));
  for (int i = 4; i < 7; ++i) put<std::int16_t>(hdr, kOffDim + 2 * (i + 1), 1);
  put<std::int16_t>(hdr, kOffDatatype, static_cast<std::int16_t>(image.datatype));
  put<std::int16_t>(hdr, kOffBitpix, static_cast<std::int16_t>(8 * bytes_per_voxel(image.datatype)));
  put<float>(hdr, kOffPixdim, 1.0f);  // qfac
  for (int i = 0; i < 4; ++i) put<float>(hdr, kOffPixdim + 4 * (i + 1), static_cast<float>(image.pixdim[i]));
  put<float>(hdr, kOffVoxOffset, static_cast<float>(kVoxOffset));
  put<float>(hdr, kOffSclSlope, 1.0f);
  put<float>(hdr, kOffSclInter, 0.0f);
  hdr[kOffXyztUnits] = 2 | 8;  // mm, seconds
  const char descrip[] = "taffseg";
  std::memcpy(hdr.data() + kOffDescrip, descrip, sizeof(descrip));
  put<std::int16_t>(hdr, kOffQformCode, 0);
  put<std::int16_t>(hdr, kOffSformCode, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c)
      put<float>(hdr, kOffSrowX + 16 * r + 4 * c, r == c ? static_cast<float>(image.pixdim[r]) : 0.0f);
  std::memcpy(hdr.data() + kOffMagic, "n+1\0", 4);

  const int bpv = bytes_per_voxel(image.datatype);
  std::vector<char> body(image.values.size() * bpv);
  switch (image.datatype) {
    case DataType::uint8: encode<std::uint8_t>(image.values, body.data()); break;
    case DataType::int16: encode<std::int16_t>(image.values, body.data()); break;
    case DataType::int32: encode<std::int32_t>(image.values, body.data()); break;
    case DataType::float32: encode<float>(image.values, body.data()); break;
    case DataType::float64: encode<double>(image.values, body.data()); break;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> hdr(kHeaderSize);
  in.read(hdr.data(), kHeaderSize);
  if (!in) throw IoError("truncated NIfTI header in " + path.string());
  if (get<std::int32_t>(hdr, 0) != kHeaderSize)
    throw DataError("not a little-endian NIfTI-1 file: " + path.string());
  if (std::memcmp(hdr.data() + kOffMagic, "n+1", 4) != 0)
    throw DataError("expected single-file NIfTI (n+1 magic) in " + path.string());

  Image img;
  const int ndim = get<std::int16_t>(hdr, kOffDim);
  if (ndim < 1 || ndim > 4) throw DataError("unsupported NIfTI rank " + std::to_string(ndim) + " in " + path.string());
  for (int i = 0; i < 4; ++i) {
    img.dims[i] = i < ndim ? get<std::int16_t>(hdr, kOffDim + 2 * (i + 1)) : 1;
    img.pixdim[i] = i < ndim ? get<float>(hdr, kOffPixdim + 4 * (i + 1)) : 1.0;
    if (img.dims[i] < 1) throw DataError("nonpositive dimension in " + path.string());
  }
  img.datatype = static_cast<DataType>(get<std::int16_t>(hdr, kOffDatatype));
  const int bpv = bytes_per_voxel(img.datatype);
  const auto vox_offset = static_cast<std::streamoff>(get<float>(hdr, kOffVoxOffset));
  in.seekg(vox_offset);
  std::vector<char> body(img.voxel_count() * bpv);
  in.read(body.data(), static_cast<std::streamsize>(body.size()));
  if (!in) throw IoError("truncated NIfTI data in " + path.string());
  img.values.resize(img.voxel_count());
  switch (img.datatype) {
    case DataType::uint8: decode<std::uint8_t>(body.data(), img.values); break;
    case DataType::int16: decode<std::int16_t>(body.data(), img.values); break;
    case DataType::int32: decode<std::int32_t>(body.data(), img.values); break;
    case DataType::float32: decode<float>(body.data(), img.values); break;
    case DataType::float64: decode<double>(body.data(), img.values); break;
  }
  const float slope = get<float>(hdr, kOffSclSlope);
  const float inter = get<float>(hdr, kOffSclInter);
  if (slope != 0.0f && (slope != 1.0f || inter != 0.0f))
    for (auto& v : img.values) v = v * slope + inter;
  return img;
}

}  // namespace taff::nifti
