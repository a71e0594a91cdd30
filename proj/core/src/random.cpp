#include "eio/random.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "eio/error.hpp"

namespace eio {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_bytes(const void* data, std::size_t size, std::uint64_t seed) noexcept {
  // FNV-1a
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_string(std::string_view s) noexcept { return hash_bytes(s.data(), s.size()); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

Rng Rng::derive(std::uint64_t root_seed, std::string_view stream) {
  return Rng(mix64(root_seed ^ mix64(hash_string(stream))));
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  require(n >= 1, ErrorCategory::validation, "uniform_index: n must be >= 1");
  if (n == 1) return 0;
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * M_PI * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
  char buf[32];
  std::snprintf(buf, sizeof buf, "%a", spare_);
  os << buf;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  int spare_flag = 0;
  std::string spare;
  is >> spare_flag >> spare;
  require(!is.fail(), ErrorCategory::corrupt, "malformed rng state");
  has_spare_ = spare_flag != 0;
  spare_ = std::strtod(spare.c_str(), nullptr);
}

}  // namespace eio
