#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "isoseg/errors.hpp"

namespace isoseg {

using Dims3 = std::array<std::size_t, 3>;  // depth, height, width
using Spacing3 = std::array<double, 3>;

inline std::string dims_str(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Channel-major 3D volume: data laid out [channel][z][y][x].
template <typename T>
struct Volume {
  Dims3 dims{0, 0, 0};
  std::size_t channels = 1;
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<T> data;

  Volume() = default;
  Volume(Dims3 d, std::size_t c) : dims(d), channels(c), data(c * d[0] * d[1] * d[2], T{}) {}

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t size() const { return channels * voxels(); }

  std::size_t index(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return ((c * dims[0] + z) * dims[1] + y) * dims[2] + x;
  }
  T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data[index(c, z, y, x)];
  }
  const T& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data[index(c, z, y, x)];
  }
};

/// Discrete segmentation: 0=background, 1=CSF, 2=GM, 3=WM.
enum : std::uint8_t { kBackground = 0, kCsf = 1, kGm = 2, kWm = 3 };
inline constexpr std::size_t kNumClasses = 4;

inline const char* class_name(std::uint8_t code) {
  switch (code) {
    case kBackground: return "background";
    case kCsf: return "CSF";
    case kGm: return "GM";
    case kWm: return "WM";
    default: return "?";
  }
}

using LabelVolume = Volume<std::uint8_t>;
using MaskVolume = Volume<std::uint8_t>;

/// One training/evaluation case: two-channel intensities plus ground truth.
struct Subject {
  std::string id;
  Volume<float> image;   // channels = 2 (T1-analog, T2-analog)
  LabelVolume labels;    // channels = 1
  MaskVolume mask;       // channels = 1; 1 inside the brain analog

  void check_consistent() const {
    if (image.dims != labels.dims || image.dims != mask.dims)
      throw DimensionError("subject '" + id + "': image dims " + dims_str(image.dims) +
                           ", labels " + dims_str(labels.dims) + ", mask " +
                           dims_str(mask.dims) + " must agree");
    if (labels.channels != 1 || mask.channels != 1)
      throw DimensionError("subject '" + id + "': labels and mask must be single-channel");
  }
};

template <typename T>
void require_same_dims(const Volume<T>& a, const Volume<T>& b, const char* where) {
  if (a.dims != b.dims)
    throw DimensionError(std::string(where) + ": dims " + dims_str(a.dims) + " vs " +
                         dims_str(b.dims));
}

}  // namespace isoseg
