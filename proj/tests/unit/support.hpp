#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "eio/arch.hpp"
#include "eio/rgn.hpp"

namespace eio::testsup {

// 3-conv net on 3x8x8 inputs, 3 classes.
inline const char* kSmallNet = R"(
input input shape=3x8x8
c1 conv out=4 k=3
b1 bn
r1 activation fn=relu
c2 conv out=6 k=3 stride=2
b2 bn
r2 activation fn=relu
c3 conv out=6 k=3
b3 bn
r3 activation fn=relu
pool pool type=gavg
fc linear out=3
output output
edge input c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 r2
edge r2 c3
edge c3 b3
edge b3 r3
edge r3 pool
edge pool fc
edge fc output
)";

// One residual block.
inline const char* kResidualNet = R"(
input input shape=3x8x8
c1 conv out=4 k=3
b1 bn
r1 activation fn=relu
c2 conv out=4 k=3
b2 bn
add add skip=r1
r2 activation fn=relu
pool pool type=gavg
fc linear out=3
output output
edge input c1
edge c1 b1
edge b1 r1
edge r1 c2
edge c2 b2
edge b2 add
edge r1 add
edge add r2
edge r2 pool
edge pool fc
edge fc output
)";

// A single gated conv: n=2 gives exactly two paths.
inline const char* kOneConv = R"(
input input shape=3x8x8
c1 conv out=4 k=3
r1 activation fn=relu
pool pool type=gavg
fc linear out=2
output output
edge input c1
edge c1 r1
edge r1 pool
edge pool fc
edge fc output
)";

inline arch::RGNSpec spec_of(const char* text, int n, const std::string& scope = "all") {
  const auto g = arch::parse_arch(text);
  return arch::build_rgn_spec(g, arch::make_scope(g, arch::ScopeRequest::parse(scope)), n);
}

template <typename T = float>
rgn::RGNModel<T> make_rgn(const char* text, int n, std::uint64_t seed = 1) {
  Rng rng(seed);
  return rgn::RGNModel<T>::create(spec_of(text, n), rng);
}

template <typename T = float>
Tensor<T> random_batch(int batch, const Shape& s, Rng& rng) {
  Shape full{batch};
  full.insert(full.end(), s.begin(), s.end());
  Tensor<T> x(full);
  for (auto& v : x.storage()) v = static_cast<T>(rng.uniform01());
  return x;
}

inline std::vector<int> random_labels(int batch, int classes, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(batch));
  for (auto& v : y) v = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
  return y;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("eio-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace eio::testsup
