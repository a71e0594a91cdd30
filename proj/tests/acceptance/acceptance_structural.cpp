// Structural invariants of the random gated network.

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>

#include "eio/arch.hpp"
#include "eio/rgn.hpp"
#include "verdict.hpp"

using namespace eio;
using acceptance::Criterion;

namespace {

constexpr double kPValue = 0.01;
constexpr int kGateDraws = 100000;
constexpr int kPathSets = 10000;
constexpr int kMaxNL = 4096;
constexpr double kDegenerateTol = 1e-5;
constexpr double kDeriveTol = 1e-6;
constexpr double kBudgetSeconds = 300;

std::string arch_dir() {
#ifdef EIO_ARCH_DIR
  return EIO_ARCH_DIR;
#else
  return "archs";
#endif
}

arch::RGNSpec spec_for(const arch::ArchGraph& g, int n) {
  return arch::build_rgn_spec(g, arch::make_scope(g, arch::ScopeRequest::all()), n);
}

Tensor<float> random_images(int batch, const Shape& s, Rng& rng) {
  Shape full{batch};
  full.insert(full.end(), s.begin(), s.end());
  Tensor<float> x(full);
  for (auto& v : x.storage()) v = static_cast<float>(rng.uniform01());
  return x;
}

// Decimal big-number oracle, independent of the library's integer type.
std::string times_small(const std::string& a, int m) {
  std::string out;
  int carry = 0;
  for (auto it = a.rbegin(); it != a.rend(); ++it) {
    const int v = (*it - '0') * m + carry;
    out.push_back(static_cast<char>('0' + v % 10));
    carry = v / 10;
  }
  while (carry) {
    out.push_back(static_cast<char>('0' + carry % 10));
    carry /= 10;
  }
  while (out.size() > 1 && out.back() == '0') out.pop_back();
  std::reverse(out.begin(), out.end());
  return out;
}

bool gate_uniformity(Criterion& c) {
  bool ok = true;
  for (int n : {2, 3}) {
    Rng rng(0xC0FFEE + static_cast<std::uint64_t>(n));
    std::vector<long> counts(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < kGateDraws; ++i) ++counts[static_cast<std::size_t>(rgn::sample_gate(n, rng).value)];
    const double expect = static_cast<double>(kGateDraws) / n;
    double chi2 = 0;
    for (long k : counts) chi2 += (k - expect) * (k - expect) / expect;
    const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(n - 1), chi2));
    ok &= c.check(p > kPValue, "gate uniformity n=" + std::to_string(n) + ": chi2=" + Criterion::fmt(chi2, 3) +
                                   " p=" + Criterion::fmt(p, 4) + " > 0.01");
  }
  // Every block's gate over whole paths, too.
  Rng rng(99);
  const int L = 5, n = 3;
  std::vector<std::vector<long>> counts(L, std::vector<long>(n, 0));
  for (int i = 0; i < kGateDraws; ++i) {
    const auto p = rgn::sample_path(L, n, rng);
    for (int b = 0; b < L; ++b) ++counts[static_cast<std::size_t>(b)][static_cast<std::size_t>(p.gates[static_cast<std::size_t>(b)])];
  }
  double worst = 1;
  for (const auto& row : counts) {
    double chi2 = 0;
    const double expect = static_cast<double>(kGateDraws) / n;
    for (long k : row) chi2 += (k - expect) * (k - expect) / expect;
    worst = std::min(worst, boost::math::cdf(boost::math::complement(boost::math::chi_squared(n - 1), chi2)));
  }
  // Bonferroni over the L blocks.
  ok &= c.check(worst * L > kPValue, "per-block path gates n=3, L=5: min p=" + Criterion::fmt(worst, 4) + " (x5 > 0.01)");
  return ok;
}

bool path_distinctness(Criterion& c) {
  Rng rng(1234);
  int mismatches = 0, violations = 0, infeasible_ok = 0, infeasible_cases = 0;
  for (int t = 0; t < kPathSets; ++t) {
    const int n = 1 + static_cast<int>(rng.uniform_index(4));
    const int L = 1 + static_cast<int>(rng.uniform_index(8));
    const int l = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(L)));
    const int p = 1 + static_cast<int>(rng.uniform_index(6));
    long prefixes = 1;
    for (int i = 0; i < l; ++i) prefixes *= n;
    if (prefixes < p) {
      ++infeasible_cases;
      try {
        (void)rgn::sample_distinct_paths(L, n, p, l, rng);
      } catch (const Error& e) {
        if (e.category() == ErrorCategory::infeasible) ++infeasible_ok;
      }
      continue;
    }
    const auto paths = rgn::sample_distinct_paths(L, n, p, l, rng);
    // Oracle: distinct top-l prefixes as a set.
    std::set<std::vector<int>> seen;
    bool valid = static_cast<int>(paths.size()) == p;
    for (const auto& path : paths) {
      valid = valid && path.length() == L;
      for (int g : path.gates) valid = valid && g >= 0 && g < n;
      seen.insert(std::vector<int>(path.gates.begin(), path.gates.begin() + l));
    }
    const bool oracle = valid && static_cast<int>(seen.size()) == p;
    if (!oracle) ++violations;
    if (rgn::pairwise_prefix_distinct(paths, l) != oracle) ++mismatches;
    // The predicate must also reject a set with a duplicated prefix.
    if (p >= 2) {
      auto dup = paths;
      std::copy_n(dup[0].gates.begin(), l, dup[1].gates.begin());
      if (rgn::pairwise_prefix_distinct(dup, l)) ++mismatches;
    }
  }
  bool ok = c.check(violations == 0, std::to_string(kPathSets) + " sampled path sets: " + std::to_string(violations) +
                                         " with repeated top-l prefixes");
  ok &= c.check(mismatches == 0, "distinctness predicate agrees with set oracle (" + std::to_string(mismatches) + " mismatches)");
  ok &= c.check(infeasible_ok == infeasible_cases,
                "n^l < p rejected as infeasible: " + std::to_string(infeasible_ok) + "/" + std::to_string(infeasible_cases));
  return ok;
}

bool path_counting(Criterion& c) {
  int checked = 0, enumerated = 0, bad = 0;
  for (int n = 1; n <= kMaxNL; ++n) {
    // Every n up to 16, then a sparse set of wide blocks.
    if (n > 16 && n != 31 && n != 64 && n != 255 && n != 1024 && n != kMaxNL) continue;
    std::string power = "1";
    for (int L = 1; n * L <= kMaxNL; ++L) {
      power = times_small(power, n);
      if (rgn::count_paths(n, L).str() != power) ++bad;
      ++checked;
      // Explicit enumeration where the space is small: odometer over gates.
      if (std::pow(static_cast<double>(n), L) <= 1 << 16) {
        std::vector<int> g(static_cast<std::size_t>(L), 0);
        long count = 0;
        while (true) {
          ++count;
          int b = L - 1;
          while (b >= 0 && ++g[static_cast<std::size_t>(b)] == n) g[static_cast<std::size_t>(b--)] = 0;
          if (b < 0) break;
        }
        if (rgn::count_paths(n, L) != count) ++bad;
        ++enumerated;
      }
    }
  }
  return c.check(bad == 0, "count_paths matches " + std::to_string(checked) + " (n, L) pairs with n*L <= 4096 (" +
                               std::to_string(enumerated) + " by explicit enumeration)");
}

// Base network executed directly on the graph with the RGN's (single) replica
// parameters, bypassing gates and paths entirely.
Tensor<float> base_forward(const rgn::RGNModel<float>& m, const Tensor<float>& x) {
  const auto& g = m.graph();
  nn::Binding<float> b(static_cast<std::size_t>(g.size()), nullptr);
  auto& mm = const_cast<rgn::RGNModel<float>&>(m);
  for (int blk = 0; blk < m.depth(); ++blk) {
    const int node = m.block_node(blk);
    b[static_cast<std::size_t>(node)] = &mm.replica(blk, 0);
    if (g.fused_bn(node) >= 0) b[static_cast<std::size_t>(g.fused_bn(node))] = &mm.replica(blk, 0);
  }
  for (int node : m.shared_nodes()) b[static_cast<std::size_t>(node)] = &mm.shared(node);
  nn::Executor<float> ex(g);
  ex.forward(b, x, nn::Mode::eval);
  return ex.logits();
}

bool degenerate_and_derive(Criterion& c) {
  bool ok = true;
  Rng data(5);
  for (const char* name : {"toy6.arch", "resnet20.arch"}) {
    const auto g = arch::load_arch(arch_dir() + "/" + name);
    const auto x = random_images(4, g.input_shape(), data);
    {
      Rng rng(11);
      const auto spec = spec_for(g, 1);
      const auto m = rgn::RGNModel<float>::create(spec, rng);
      Rng gates(3);
      float worst = 0;
      for (int t = 0; t < 3; ++t) worst = std::max(worst, max_abs_diff(rgn::random_gated_inference(m, x, gates), base_forward(m, x)));
      ok &= c.check(spec.degenerate() && rgn::count_paths(spec) == 1 && worst <= kDegenerateTol,
                    std::string(name) + " n=1: single path, max |dlogit| vs base network = " + Criterion::fmt(worst, 9));
    }
    for (int n : {2, 3}) {
      Rng rng(12 + static_cast<std::uint64_t>(n));
      auto m = rgn::RGNModel<float>::create(spec_for(g, n), rng);
      Rng prng(7);
      float worst = 0;
      for (int t = 0; t < 4; ++t) {
        const auto path = rgn::sample_path(m.depth(), n, prng);
        const auto derived = rgn::derive_model(m, path, "d");
        worst = std::max(worst, max_abs_diff(derived.logits(x), m.forward(path, x).logits));
        ok &= path == derived.provenance().path;
      }
      ok &= c.check(worst <= kDeriveTol, std::string(name) + " n=" + std::to_string(n) +
                                             ": derived vs path forward max |dlogit| = " + Criterion::fmt(worst, 9));
    }
  }
  return ok;
}

bool replica_counts(Criterion& c) {
  bool ok = true;
  Rng data(8);
  for (const char* name : {"toy6.arch", "resnet20.arch"}) {
    const auto g = arch::load_arch(arch_dir() + "/" + name);
    for (int n : {2, 3}) {
      Rng rng(21);
      auto m = rgn::RGNModel<float>::create(spec_for(g, n), rng);
      Rng prng(9);
      bool good = true;
      for (int t = 0; t < 5; ++t) {
        const auto path = rgn::sample_path(m.depth(), n, prng);
        const auto x = random_images(1 + t, g.input_shape(), data);
        m.reset_counters();
        (void)m.forward(path, x);
        std::uint64_t total = 0;
        for (int b = 0; b < m.depth(); ++b) {
          total += m.block_executions(b);
          for (int r = 0; r < n; ++r) {
            const auto want = r == path.gates[static_cast<std::size_t>(b)] ? 1u : 0u;
            good = good && m.replica(b, r).executions.get() == want;
          }
        }
        good = good && total == static_cast<std::uint64_t>(m.depth());
      }
      ok &= c.check(good, std::string(name) + " n=" + std::to_string(n) + ": one replica per block, L=" +
                              std::to_string(m.depth()) + " replica forwards per input");
    }
  }
  return ok;
}

}  // namespace

int main() {
  Criterion c("structural invariants");
  try {
    gate_uniformity(c);
    path_distinctness(c);
    path_counting(c);
    degenerate_and_derive(c);
    replica_counts(c);
  } catch (const std::exception& e) {
    c.check(false, std::string("exception: ") + e.what());
  }
  return c.finish(kBudgetSeconds) ? 0 : 1;
}
