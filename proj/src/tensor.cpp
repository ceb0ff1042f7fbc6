#include "dhmd/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dhmd {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::size_t Mask::count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < steps; ++t) n += valid[b * steps + t];
  return n;
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto v : valid) n += v;
  return n;
}

}  // namespace dhmd
