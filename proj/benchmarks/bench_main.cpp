#include <benchmark/benchmark.h>

#include "eio/attack.hpp"
#include "eio/dataset.hpp"
#include "eio/trainer.hpp"

using namespace eio;

namespace {

rgn::RGNModel<float> load(const char* name, int n = 2) {
  const auto g = arch::load_arch(std::string(EIO_ARCH_DIR) + "/" + name);
  Rng rng(1);
  return rgn::RGNModel<float>::create(arch::build_rgn_spec(g, arch::make_scope(g, arch::ScopeRequest::parse("all")), n), rng);
}

const data::Dataset& shapes() {
  static const auto d = data::synthetic_shapes(10, 256, 1);
  return d;
}

std::vector<std::size_t> rows(std::size_t from, std::size_t count) {
  std::vector<std::size_t> r(count);
  for (std::size_t i = 0; i < count; ++i) r[i] = from + i;
  return r;
}

void BM_Forward(benchmark::State& st) {
  auto m = load("toy6_half.arch");
  const auto r = rows(0, static_cast<std::size_t>(st.range(0)));
  const auto x = shapes().images_as<float>(r);
  const rgn::Path p{std::vector<int>(static_cast<std::size_t>(m.spec().L), 0)};
  for (auto _ : st) benchmark::DoNotOptimize(m.forward(p, x).logits);
  st.SetItemsProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_Forward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_PathCeBackward(benchmark::State& st) {
  auto m = load("toy6_half.arch");
  const auto r = rows(0, 128);
  const auto x = shapes().images_as<float>(r);
  const auto y = shapes().labels_at(r);
  const rgn::Path p{std::vector<int>(static_cast<std::size_t>(m.spec().L), 1)};
  for (auto _ : st) {
    benchmark::DoNotOptimize(train::accumulate_path_ce(m, p, x, y));
    m.zero_grad();
  }
}
BENCHMARK(BM_PathCeBackward)->Unit(benchmark::kMillisecond);

void BM_DiversifyStep(benchmark::State& st) {
  auto m = load("toy6_half.arch");
  train::TrainConfig cfg;
  cfg.batch_size = 64;
  train::BatchPair<float> b{shapes().images_as<float>(rows(0, 64)), shapes().labels_at(rows(0, 64)),
                            shapes().images_as<float>(rows(64, 64)), shapes().labels_at(rows(64, 64))};
  auto state = train::TrainState::fresh(1);
  for (auto _ : st) benchmark::DoNotOptimize(train::diversify_step(m, b, cfg, 0.01, state));
}
BENCHMARK(BM_DiversifyStep)->Unit(benchmark::kMillisecond)->Iterations(3);

void BM_AttackStep(benchmark::State& st) {
  const auto m = load("toy6_half.arch");
  const auto d = rgn::derive_model(m, rgn::Path{std::vector<int>(static_cast<std::size_t>(m.spec().L), 0)}, "d");
  const auto r = rows(0, 64);
  const auto x = shapes().images_as<float>(r);
  const auto y = shapes().labels_at(r);
  attack::AttackSpec s;
  s.method = static_cast<attack::Method>(st.range(0));
  s.eps = 0.03;
  s.steps = 5;
  s.step_size = 0.006;
  Rng rng(2);
  for (auto _ : st) benchmark::DoNotOptimize(attack::attack(d, x, y, s, rng));
  st.SetItemsProcessed(st.iterations() * 64 * s.steps);
  st.SetLabel(attack::method_name(s.method));
}
BENCHMARK(BM_AttackStep)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
