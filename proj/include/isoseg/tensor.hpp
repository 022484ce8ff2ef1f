#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "isoseg/errors.hpp"

namespace isoseg {

/// Extents of a rank-5 tensor: batch, channel, depth, height, width.
using Shape5 = std::array<std::size_t, 5>;

inline std::size_t numel(const Shape5& s) {
  return s[0] * s[1] * s[2] * s[3] * s[4];
}

inline std::string shape_str(const Shape5& s) {
  std::string out;
  for (std::size_t i = 0; i < 5; ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out;
}

/// Dense rank-5 value container, channel-first layout
/// (batch, channel, depth, height, width), row-major with width fastest.
///
/// `grad` is empty unless the tensor is a parameter that has accumulated
/// gradients; when present it has the same length as `data`.
template <typename S>
struct Tensor {
  Shape5 shape{1, 1, 1, 1, 1};
  std::vector<S> data;
  std::vector<S> grad;

  Tensor() = default;
  explicit Tensor(const Shape5& s) : shape(s), data(numel(s), S(0)) {}
  Tensor(const Shape5& s, S fill) : shape(s), data(numel(s), fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t batch() const { return shape[0]; }
  std::size_t channels() const { return shape[1]; }
  std::size_t depth() const { return shape[2]; }
  std::size_t height() const { return shape[3]; }
  std::size_t width() const { return shape[4]; }
  std::size_t spatial() const { return shape[2] * shape[3] * shape[4]; }

  std::size_t index(std::size_t b, std::size_t c, std::size_t d, std::size_t h,
                    std::size_t w) const {
    return (((b * shape[1] + c) * shape[2] + d) * shape[3] + h) * shape[4] + w;
  }
  S& at(std::size_t b, std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
    return data[index(b, c, d, h, w)];
  }
  const S& at(std::size_t b, std::size_t c, std::size_t d, std::size_t h,
              std::size_t w) const {
    return data[index(b, c, d, h, w)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), S(0));
  }

  /// Scalar convenience for 1-element tensors (losses).
  S item() const {
    if (data.size() != 1)
      throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape));
    return data[0];
  }

  static Tensor scalar(S v) {
    Tensor t(Shape5{1, 1, 1, 1, 1});
    t.data[0] = v;
    return t;
  }
};

template <typename S>
void check_finite(const Tensor<S>& t, const char* where) {
  for (const S& v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw InternalError(std::string("non-finite value produced by ") + where);
  }
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape == b.shape) return;
  for (std::size_t ax = 0; ax < 5; ++ax) {
    if (a.shape[ax] != b.shape[ax])
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape) + " vs " +
                           shape_str(b.shape) + " differ on axis " + std::to_string(ax));
  }
}

}  // namespace isoseg
