#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace eio {

// SplitMix64 finalizer; used to derive independent seeds from a root seed.
std::uint64_t mix64(std::uint64_t x) noexcept;
std::uint64_t hash_bytes(const void* data, std::size_t size,
                         std::uint64_t seed = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t hash_string(std::string_view s) noexcept;
std::string hex64(std::uint64_t v);

// Seeded stream with portable draw semantics. libstdc++ distributions are not
// used for anything persisted, so results do not depend on the standard
// library implementation.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Independent child stream named by purpose ("paths", "distill", ...).
  static Rng derive(std::uint64_t root_seed, std::string_view stream);

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Lemire's multiply-shift with rejection; the
  // number of draws is a deterministic function of the stream state.
  std::uint64_t uniform_index(std::uint64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  double normal();

  std::string state() const;
  void set_state(const std::string& s);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace eio
