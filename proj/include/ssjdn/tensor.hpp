#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssjdn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense h x w x c feature map stored channels-last (NHWC without N), so the
// channel vector at one pixel is contiguous for the SIMD kernels.
template <typename T>
struct Tensor3 {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<T> data;

  Tensor3() = default;
  Tensor3(int height, int width, int channels, T fill = T(0))
      : h(height), w(width), c(channels),
        data(static_cast<std::size_t>(height) * width * channels, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(h) * w; }
  bool same_shape(const Tensor3& o) const { return h == o.h && w == o.w && c == o.c; }

  std::size_t offset(int y, int x) const {
    return (static_cast<std::size_t>(y) * w + x) * c;
  }
  T& at(int y, int x, int ch) { return data[offset(y, x) + ch]; }
  const T& at(int y, int x, int ch) const { return data[offset(y, x) + ch]; }

  std::span<T> pixel(int y, int x) { return {data.data() + offset(y, x), static_cast<std::size_t>(c)}; }
  std::span<const T> pixel(int y, int x) const {
    return {data.data() + offset(y, x), static_cast<std::size_t>(c)};
  }

  template <typename U>
  Tensor3<U> cast() const {
    Tensor3<U> out(h, w, c);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Single-channel spatial map (attention maps, suppression masks).
template <typename T>
struct Map2 {
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Map2() = default;
  Map2(int height, int width, T fill = T(0))
      : h(height), w(width), data(static_cast<std::size_t>(height) * width, fill) {}

  T& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  const T& at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return data.size(); }
};

// Row-major dense matrix used for similarity tables and loss gradients.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

}  // namespace ssjdn
