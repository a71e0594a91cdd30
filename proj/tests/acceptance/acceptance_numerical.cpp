// Numerical correctness on fp64 toy networks: analytic gradients against
// central finite differences, gradient accumulation, the closed-form attack on
// a linear classifier, and the perturbation constraints.

#include <cmath>
#include <cstdio>
#include <string>

#include "eio/attack.hpp"
#include "eio/constraints.hpp"
#include "eio/distill.hpp"
#include "eio/trainer.hpp"
#include "verdict.hpp"

using namespace eio;
using acceptance::Criterion;

namespace {

constexpr double kFiniteDiffTol = 1e-3;
constexpr double kAccumulateTol = 1e-5;
constexpr double kStep = 1e-6;
constexpr double kBudgetSeconds = 600;

// Smooth (tanh) net so that finite differences are well defined everywhere.
const char* kTanhNet = R"(
input input shape=3x6x6
c1 conv out=4 k=3
b1 bn
a1 activation fn=tanh
c2 conv out=6 k=3 stride=2
b2 bn
a2 activation fn=tanh
c3 conv out=6 k=3
b3 bn
a3 activation fn=tanh
pool pool type=gavg
fc linear out=3
output output
edge input c1
edge c1 b1
edge b1 a1
edge a1 c2
edge c2 b2
edge b2 a2
edge a2 c3
edge c3 b3
edge b3 a3
edge a3 pool
edge pool fc
edge fc output
)";

const char* kResidualNet = R"(
input input shape=3x8x8
c1 conv out=4 k=3
b1 bn
r1 activation fn=relu
c2 conv out=4 k=3
b2 bn
add add skip=r1
r2 activation fn=relu
mp pool type=max k=2 stride=2
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
edge r2 mp
edge mp pool
edge pool fc
edge fc output
)";

const char* kLinear = R"(
input input shape=3x4x4
fc linear out=2
output output
edge input fc
edge fc output
)";

template <typename T>
Tensor<T> images(int batch, const Shape& s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Shape full{batch};
  full.insert(full.end(), s.begin(), s.end());
  Tensor<T> x(full);
  for (auto& v : x.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return x;
}

std::vector<int> labels(int batch, int classes, Rng& rng) {
  std::vector<int> y(static_cast<std::size_t>(batch));
  for (auto& v : y) v = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
  return y;
}

rgn::RGNModel<double> tanh_rgn(int n, std::uint64_t seed) {
  const auto g = arch::parse_arch(kTanhNet);
  Rng rng(seed);
  auto m = rgn::RGNModel<double>::create(arch::build_rgn_spec(g, arch::make_scope(g, arch::ScopeRequest::all()), n), rng);
  // Non-trivial running statistics for the eval-mode batchnorms.
  Rng data(seed + 1);
  for (int t = 0; t < 4; ++t) (void)m.forward(rgn::sample_path(m.depth(), n, data), images<double>(8, g.input_shape(), data), nn::Mode::train);
  m.zero_grad();
  return m;
}

// ||a - b|| / max(||a||, ||b||) over the sampled coordinates.
double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double s = std::sqrt(std::max(na, nb));
  return s == 0 ? 0 : std::sqrt(d) / s;
}

bool distill_gradient(Criterion& c) {
  auto m = tanh_rgn(2, 3);
  Rng rng(17);
  const auto x_t = images<double>(3, m.graph().input_shape(), rng);
  const auto z = images<double>(3, m.graph().input_shape(), rng);
  double worst = 0;
  for (int layer = 1; layer <= m.depth(); ++layer) {
    const auto path = rgn::sample_path(m.depth(), 2, rng);
    const auto og = distill::distill_objective_grad(m, path, layer, z, x_t);
    std::vector<double> analytic, numeric;
    for (std::size_t i = 0; i < z.size(); i += 3) {
      auto zp = z, zm = z;
      zp[i] += kStep;
      zm[i] -= kStep;
      numeric.push_back((distill::distill_objective(m, path, layer, zp, x_t) - distill::distill_objective(m, path, layer, zm, x_t)) /
                        (2 * kStep));
      analytic.push_back(og.grad[i]);
    }
    worst = std::max(worst, rel_err(analytic, numeric));
  }
  return c.check(worst <= kFiniteDiffTol, "distillation objective gradient vs central differences: rel err " +
                                              Criterion::fmt(worst, 9) + " <= 1e-3");
}

bool cw_gradient(Criterion& c) {
  auto m = tanh_rgn(1, 5);
  Rng rng(23);
  const auto model = m.path_model(rgn::Path{std::vector<int>(static_cast<std::size_t>(m.depth()), 0)}, "tanh");
  const auto x = images<double>(4, m.graph().input_shape(), rng);
  const auto y = labels(4, 3, rng);
  double worst = 0;
  // kappa large enough that the clamp is inactive, and the clamped default.
  for (double kappa : {0.0, 50.0}) {
    auto dloss = [&](const Tensor<double>& z) {
      Tensor<double> g;
      attack::cw_margin_loss(z, y, kappa, &g);
      return g;
    };
    const auto grad = model.input_gradient(x, dloss);
    std::vector<double> analytic, numeric;
    for (std::size_t i = 0; i < x.size(); i += 2) {
      auto xp = x, xm = x;
      xp[i] += kStep;
      xm[i] -= kStep;
      numeric.push_back((attack::cw_margin_loss(model.logits(xp), y, kappa) - attack::cw_margin_loss(model.logits(xm), y, kappa)) /
                        (2 * kStep));
      analytic.push_back(grad[i]);
    }
    worst = std::max(worst, rel_err(analytic, numeric));
  }
  return c.check(worst <= kFiniteDiffTol, "C&W loss input gradient vs central differences: rel err " +
                                              Criterion::fmt(worst, 9) + " <= 1e-3");
}

std::vector<double> flat_grads(rgn::RGNModel<double>& m) {
  std::vector<double> out;
  m.for_each_layer([&](const std::string&, nn::LayerParams<double>& lp) {
    lp.for_each_param([&](const char*, nn::Param<double>& p) {
      for (std::size_t i = 0; i < p.value.size(); ++i) out.push_back(p.grad.size() == p.value.size() ? p.grad[i] : 0.0);
    });
  });
  return out;
}

bool accumulated_gradient(Criterion& c) {
  auto m = tanh_rgn(2, 7);
  Rng rng(31);
  const int L = m.depth(), p = 3;
  const auto paths = rgn::sample_distinct_paths(L, 2, p, 2, rng);
  const auto x_s = images<double>(5, m.graph().input_shape(), rng);
  const auto y_s = labels(5, 3, rng);
  std::vector<distill::DistilledBatch<double>> distilled;
  distill::DistillConfig dc;
  dc.layer = 2;
  for (int i = 0; i < p; ++i) {
    const auto x_t = images<double>(5, m.graph().input_shape(), rng);
    distilled.push_back(distill::distill_features(m, paths[static_cast<std::size_t>(i)], x_t, x_s, y_s, dc, rng));
  }

  m.zero_grad();
  (void)train::accumulate_cross_loss(m, paths, distilled, y_s);
  const auto acc = flat_grads(m);

  // Oracle 1: every cross term back-propagated on its own, summed here.
  std::vector<double> sum(acc.size(), 0.0);
  for (int j = 0; j < p; ++j)
    for (int i = 0; i < p; ++i) {
      if (i == j) continue;
      m.zero_grad();
      (void)train::accumulate_path_ce(m, paths[static_cast<std::size_t>(j)], distilled[static_cast<std::size_t>(i)].x_prime, y_s);
      const auto g = flat_grads(m);
      for (std::size_t k = 0; k < g.size(); ++k) sum[k] += g[k];
    }
  m.zero_grad();
  const double e1 = rel_err(acc, sum);

  // Oracle 2: central differences of the summed train-mode loss.
  auto total = [&] {
    const auto l = train::cross_loss(m, paths, distilled, y_s, nn::Mode::train);
    double s = 0;
    for (double v : l) s += v;
    return s;
  };
  std::vector<double> analytic, numeric;
  std::size_t flat = 0;
  m.for_each_layer([&](const std::string&, nn::LayerParams<double>& lp) {
    lp.for_each_param([&](const char*, nn::Param<double>& prm) {
      for (std::size_t i = 0; i < prm.value.size(); i += 5) {
        const double keep = prm.value[i];
        prm.value[i] = keep + kStep;
        const double fp = total();
        prm.value[i] = keep - kStep;
        const double fm = total();
        prm.value[i] = keep;
        numeric.push_back((fp - fm) / (2 * kStep));
        analytic.push_back(acc[flat + i]);
      }
      flat += prm.value.size();
    });
  });
  const double e2 = rel_err(analytic, numeric);
  bool ok = c.check(e1 <= kAccumulateTol, "accumulated cross-term gradient vs sum of per-term backward passes: rel err " +
                                              Criterion::fmt(e1, 12) + " <= 1e-5");
  ok &= c.check(e2 <= kAccumulateTol, "accumulated gradient vs central differences of the summed loss: rel err " +
                                          Criterion::fmt(e2, 9) + " <= 1e-5");
  return ok;
}

bool linear_closed_form(Criterion& c) {
  const auto g = arch::parse_arch(kLinear);
  Rng rng(41);
  auto model = rgn::StandaloneModel<double>::initialize(g, rng, "linear");
  auto& fc = model.layer(g.index_of("fc"));
  for (auto& w : fc.weight.value.storage()) w = rng.uniform(-0.5, 0.5);
  const int N = 16;
  const auto x = images<double>(N, g.input_shape(), rng, 0.1, 0.9);
  const auto y = labels(N, 2, rng);
  const std::size_t D = x.stride0();
  int mismatched = 0, cases = 0;
  double worst_mag = 0;
  for (auto loss : {attack::Loss::cross_entropy, attack::Loss::cw})
    for (double mu : {0.0, 1.0})
      for (double eps : {0.01, 0.03, 0.07}) {
        attack::AttackSpec s;
        s.loss = loss;
        s.eps = eps;
        s.steps = 10;
        s.step_size = eps / 5;
        s.random_init = false;
        s.momentum = mu;
        s.kappa = 1e6;  // keep the C&W margin active for every sample
        Rng arng(7);
        const auto r = attack::attack(model, x, y, s, arng);
        const auto& z = r.starts.at(0);
        for (int n = 0; n < N; ++n) {
          const int yt = y[static_cast<std::size_t>(n)];
          for (std::size_t d = 0; d < D; ++d) {
            // Closed form: the loss increases along w_other - w_y.
            const double w = fc.weight.value[static_cast<std::size_t>(1 - yt) * D + d] - fc.weight.value[static_cast<std::size_t>(yt) * D + d];
            const double delta = z[static_cast<std::size_t>(n) * D + d] - x[static_cast<std::size_t>(n) * D + d];
            if (sign_of(delta) != sign_of(w)) ++mismatched;
            worst_mag = std::max(worst_mag, std::abs(std::abs(delta) - eps));
          }
        }
        ++cases;
      }
  bool ok = c.check(mismatched == 0, "PGD on a linear classifier: sign pattern equals sign(w) in " + std::to_string(cases) +
                                         " settings (" + std::to_string(mismatched) + " mismatched coordinates)");
  ok &= c.check(worst_mag <= 1e-12, "PGD on a linear classifier: |delta| = eps (max dev " + Criterion::fmt(worst_mag, 15) + ")");
  return ok;
}

template <typename T>
bool constraints_for(Criterion& c, const char* type) {
  const auto g = arch::parse_arch(kResidualNet);
  Rng rng(53);
  const auto model = rgn::StandaloneModel<T>::initialize(g, rng, "res");
  const int N = 6;
  auto x = images<T>(N, g.input_shape(), rng);
  // Saturated pixels exercise the [0, 1] clamp.
  for (std::size_t i = 0; i < x.size(); i += 3) x[i] = static_cast<T>(i % 2);
  const auto y = labels(N, 3, rng);
  int batches = 0, violations = 0, noops = 0, noop_cases = 0;
  for (auto method : {attack::Method::pgd, attack::Method::mdi2fgsm, attack::Method::sgm})
    for (auto loss : {attack::Loss::cross_entropy, attack::Loss::cw})
      for (double eps : {0.0, 0.01, 0.03, 0.07}) {
        attack::AttackSpec s;
        s.method = method;
        s.loss = loss;
        s.eps = eps;
        s.steps = 6;
        s.step_size = eps > 0 ? eps / 2 : 0.01;  // overshoots on purpose
        s.random_starts = 2;
        Rng arng(61);
        const auto r = attack::attack(model, x, y, s, arng);
        for (const auto& z : r.starts) {
          ++batches;
          if (!within_linf_box<T>(z.values(), x.values(), static_cast<T>(eps))) ++violations;
          if (eps == 0) {
            ++noop_cases;
            if (z == x) ++noops;
          }
        }
      }
  // Feature distillation emits perturbations too.
  const auto gt = arch::parse_arch(kTanhNet);
  Rng mrng(71);
  auto m = rgn::RGNModel<T>::create(arch::build_rgn_spec(gt, arch::make_scope(gt, arch::ScopeRequest::all()), 2), mrng);
  auto xs = images<T>(N, gt.input_shape(), rng);
  for (std::size_t i = 0; i < xs.size(); i += 4) xs[i] = static_cast<T>(i % 3 == 0);
  const auto xt = images<T>(N, gt.input_shape(), rng);
  for (double eps : {0.0, 0.03, 0.07})
    for (bool rs : {false, true}) {
      distill::DistillConfig dc;
      dc.eps = eps;
      dc.step_size = eps > 0 ? eps / 3 : 0.01;
      dc.layer = 2;
      dc.random_start = rs;
      const auto d = distill::distill_features(m, rgn::sample_path(m.depth(), 2, rng), xt, xs, y, dc, rng);
      ++batches;
      if (!within_linf_box<T>(d.x_prime.values(), xs.values(), static_cast<T>(eps))) ++violations;
      if (eps == 0) {
        ++noop_cases;
        if (d.x_prime == xs) ++noops;
      }
    }
  bool ok = c.check(violations == 0, std::string(type) + ": " + std::to_string(batches) +
                                         " emitted batches inside the eps-ball and [0,1] (" + std::to_string(violations) +
                                         " violations)");
  ok &= c.check(noops == noop_cases, std::string(type) + ": eps=0 attacks return the input unchanged (" +
                                         std::to_string(noops) + "/" + std::to_string(noop_cases) + ")");
  return ok;
}

}  // namespace

int main() {
  Criterion c("numerical correctness");
  try {
    distill_gradient(c);
    cw_gradient(c);
    accumulated_gradient(c);
    linear_closed_form(c);
    constraints_for<float>(c, "fp32");
    constraints_for<double>(c, "fp64");
  } catch (const std::exception& e) {
    c.check(false, std::string("exception: ") + e.what());
  }
  return c.finish(kBudgetSeconds) ? 0 : 1;
}
