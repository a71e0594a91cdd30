#pragma once

#include <cmath>
#include <limits>
#include <span>

namespace eio {

// Elementwise projection onto B_inf(center, eps) intersected with [0, 1].
// Bounds are nudged with nextafter so that |z - center| <= eps holds exactly
// when evaluated in extended precision, not just up to rounding.
template <typename T>
void project_linf_box(std::span<T> z, std::span<const T> center, T eps) {
  using Wide = long double;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T c = center[i];
    T hi = c + eps;
    while (static_cast<Wide>(hi) - static_cast<Wide>(c) > static_cast<Wide>(eps))
      hi = std::nextafter(hi, -std::numeric_limits<T>::infinity());
    T lo = c - eps;
    while (static_cast<Wide>(c) - static_cast<Wide>(lo) > static_cast<Wide>(eps))
      lo = std::nextafter(lo, std::numeric_limits<T>::infinity());
    T v = z[i];
    if (!(v >= lo)) v = lo;  // also maps NaN to the boundary
    if (v > hi) v = hi;
    if (v < T{0}) v = T{0};
    if (v > T{1}) v = T{1};
    z[i] = v;
  }
}

template <typename T>
bool within_linf_box(std::span<const T> z, std::span<const T> center, T eps) {
  using Wide = long double;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!(z[i] >= T{0} && z[i] <= T{1})) return false;
    if (std::abs(static_cast<Wide>(z[i]) - static_cast<Wide>(center[i])) > static_cast<Wide>(eps)) return false;
  }
  return true;
}

template <typename T>
T sign_of(T v) {
  return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0});
}

}  // namespace eio
