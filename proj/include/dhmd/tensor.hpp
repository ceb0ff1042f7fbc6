#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace dhmd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

// Dense row-major float64 tensor. The last dimension is the feature axis;
// every op that works "per row" flattens the leading dimensions.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(int i) const {
    return shape.at(i < 0 ? shape.size() + i : static_cast<std::size_t>(i));
  }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  double item() const {
    if (data.size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape));
    return data[0];
  }
  bool all_finite() const;
};

// Per-(sample, timestep) validity of a padded [B x T x C] batch tensor.
struct Mask {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<std::uint8_t> valid;

  Mask() = default;
  Mask(std::size_t b, std::size_t t, bool fill = true)
      : batch(b), steps(t), valid(b * t, fill ? 1 : 0) {}

  bool operator()(std::size_t b, std::size_t t) const { return valid[b * steps + t] != 0; }
  std::size_t count(std::size_t b) const;
  std::size_t count() const;
};

}  // namespace dhmd
