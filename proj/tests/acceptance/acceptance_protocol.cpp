// Evaluation-protocol accounting: black-box inventory size and the
// all-or-nothing aggregation.

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "eio/protocol.hpp"
#include "eio/rgn.hpp"
#include "verdict.hpp"

using namespace eio;
using acceptance::Criterion;

namespace {

constexpr int kRandomCases = 10000;

const char* kSurrogateNet = R"(
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

bool inventory(Criterion& c) {
  const auto g = arch::parse_arch(kSurrogateNet);
  std::vector<rgn::StandaloneModel<float>> models;
  for (int k = 0; k < 3; ++k) {
    Rng rng(100 + static_cast<std::uint64_t>(k));
    models.push_back(rgn::StandaloneModel<float>::initialize(g, rng, "surrogate" + std::to_string(k)));
  }
  Rng rng(5);
  const int N = 4;
  Tensor<float> x({N, 3, 8, 8});
  for (auto& v : x.storage()) v = static_cast<float>(rng.uniform01());
  std::vector<int> y{0, 1, 2, 1};

  auto cfg = eval::ProtocolConfig::blackbox();
  bool ok = c.check(cfg.versions_per_model() == 10, "inventory per surrogate = (3 PGD starts + M-DI2-FGSM + SGM) x {CE, C&W} = " +
                                                         std::to_string(cfg.versions_per_model()));
  cfg.steps = 2;  // accounting only; the attack strength is irrelevant here
  for (int count : {1, 3}) {
    eval::SurrogateSet<float> set;
    for (int k = 0; k < count; ++k) set.models.push_back(&models[static_cast<std::size_t>(k)]);
    const auto adv = eval::generate_blackbox(set, 0.03, x, y, cfg);
    const auto labels = adv.labels();
    const std::set<std::string> distinct(labels.begin(), labels.end());
    std::map<std::string, int> per_source;
    bool shapes = true;
    for (const auto& v : adv.versions) {
      ++per_source[v.source];
      shapes = shapes && v.x_adv.shape() == x.shape();
    }
    bool balanced = static_cast<int>(per_source.size()) == count;
    for (const auto& [id, n] : per_source) balanced = balanced && n == 10;
    const auto row = eval::score_against(models[0], adv, x, y, "blackbox", 0);
    const int want = 10 * count;
    ok &= c.check(static_cast<int>(adv.versions.size()) == want && static_cast<int>(distinct.size()) == want && balanced &&
                      shapes && row.versions == want && static_cast<int>(row.per_attack.size()) == want &&
                      static_cast<int>(row.sources.size()) == count,
                  std::to_string(count) + " surrogate(s): " + std::to_string(adv.versions.size()) +
                      " distinct adversarial versions per sample (want " + std::to_string(want) + ")");
  }
  return ok;
}

// Independent oracle: a sample counts only if no attack flips it.
double oracle(const std::vector<std::vector<char>>& f) {
  const std::size_t S = f[0].size();
  std::size_t ok = 0;
  for (std::size_t s = 0; s < S; ++s) {
    bool all = true;
    for (const auto& row : f) all = all && row[s];
    ok += all;
  }
  return static_cast<double>(ok) / static_cast<double>(S);
}

bool check_matrix(const std::vector<std::vector<char>>& f, int& bad_value, int& bad_bound) {
  const double a = eval::all_or_nothing(f);
  double lowest = 1.0;
  for (const auto& row : f)
    lowest = std::min(lowest, static_cast<double>(std::count(row.begin(), row.end(), 1)) / static_cast<double>(row.size()));
  if (a != oracle(f)) ++bad_value;
  if (a > lowest) ++bad_bound;
  return true;
}

bool aggregation(Criterion& c) {
  int bad_value = 0, bad_bound = 0, exhaustive = 0;
  // Every matrix up to 3 attacks x 3 samples.
  for (int A = 1; A <= 3; ++A)
    for (int S = 1; S <= 3; ++S)
      for (unsigned bits = 0; bits < (1u << (A * S)); ++bits) {
        std::vector<std::vector<char>> f(static_cast<std::size_t>(A), std::vector<char>(static_cast<std::size_t>(S)));
        for (int a = 0; a < A; ++a)
          for (int s = 0; s < S; ++s) f[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)] = (bits >> (a * S + s)) & 1u;
        check_matrix(f, bad_value, bad_bound);
        ++exhaustive;
      }
  Rng rng(77);
  for (int t = 0; t < kRandomCases; ++t) {
    const auto A = 1 + rng.uniform_index(30), S = 1 + rng.uniform_index(60);
    const double p = rng.uniform(0.3, 1.0);
    std::vector<std::vector<char>> f(A, std::vector<char>(S));
    for (auto& row : f)
      for (auto& v : row) v = rng.uniform01() < p;
    check_matrix(f, bad_value, bad_bound);
  }
  bool thrown = false;
  try {
    (void)eval::all_or_nothing({});
  } catch (const Error&) {
    thrown = true;
  }
  bool ok = c.check(bad_value == 0, "all_or_nothing equals the oracle on " + std::to_string(exhaustive) + " exhaustive + " +
                                        std::to_string(kRandomCases) + " random matrices (" + std::to_string(bad_value) + " mismatches)");
  ok &= c.check(bad_bound == 0, "all_or_nothing <= min per-attack accuracy (" + std::to_string(bad_bound) + " violations)");
  ok &= c.check(thrown, "an empty attack inventory is rejected");
  return ok;
}

}  // namespace

int main() {
  Criterion c("protocol accounting");
  try {
    inventory(c);
    aggregation(c);
  } catch (const std::exception& e) {
    c.check(false, std::string("exception: ") + e.what());
  }
  return c.finish() ? 0 : 1;
}
