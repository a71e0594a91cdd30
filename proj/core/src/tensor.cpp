#include "eio/tensor.hpp"

namespace eio {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require(d >= 0, ErrorCategory::shape, "negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace eio
