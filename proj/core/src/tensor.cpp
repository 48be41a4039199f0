#include "icl_lab/tensor.hpp"

#include <cmath>
#include <numeric>

namespace icl {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <class T>
void Tensor<T>::require_finite(const char* what) const {
  if (!all_finite()) throw NonFinite(std::string(what) + ": non-finite value");
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace icl
