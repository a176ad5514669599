#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace lbsac {

// Dense row-major float32 tensor. The autodiff graph and all network code
// treat tensors as rank-2 (rows x cols); scalars are 1x1, row vectors 1xN.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
    if (r < 1 || c < 1) throw std::invalid_argument("Tensor: dimensions must be >= 1");
  }
  Tensor(int r, int c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
    if (r < 1 || c < 1) throw std::invalid_argument("Tensor: dimensions must be >= 1");
    if (data.size() != static_cast<size_t>(r) * c) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, float v) {
    Tensor t(r, c);
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(float v) { return full(1, 1, v); }

  size_t size() const { return data.size(); }
  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }
};

}  // namespace lbsac
