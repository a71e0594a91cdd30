#include "eio/distill.hpp"

#include "eio/constraints.hpp"

namespace eio::distill {

void DistillConfig::validate(int depth) const {
  require(eps >= 0, ErrorCategory::config, "distill eps must be >= 0");
  require(steps >= 0, ErrorCategory::config, "distill steps must be >= 0");
  require(steps == 0 || step_size > 0, ErrorCategory::config, "distill step_size must be > 0");
  require(layer >= 1 && layer <= depth, ErrorCategory::config,
          "distill layer " + std::to_string(layer) + " outside [1, " + std::to_string(depth) + "]");
}

namespace {

template <typename T>
Tensor<T> features(const rgn::RGNModel<T>& model, const nn::Binding<T>& b, int tap, const Tensor<T>& x) {
  nn::Executor<T> ex(model.graph());
  ex.forward(b, x, nn::Mode::eval, tap);
  return ex.activation(tap);
}

template <typename T>
ObjectiveGrad<T> objective_with_target(const rgn::RGNModel<T>& model, const nn::Binding<T>& b, int tap,
                                       const Tensor<T>& z, const Tensor<T>& target, bool want_grad) {
  nn::Executor<T> ex(model.graph());
  ex.forward(b, z, nn::Mode::eval, tap);
  const Tensor<T>& fz = ex.activation(tap);
  ObjectiveGrad<T> out;
  Tensor<T> seed(fz.shape());
  double total = 0;
  for (std::size_t i = 0; i < fz.size(); ++i) {
    const double d = static_cast<double>(fz[i]) - static_cast<double>(target[i]);
    total += d * d;
    seed[i] = static_cast<T>(2.0 * d);
  }
  out.value = total;
  if (want_grad) out.grad = ex.backward(b, {{tap, std::move(seed)}}, nn::BackwardOptions{});
  return out;
}

}  // namespace

template <typename T>
double distill_objective(const rgn::RGNModel<T>& model, const rgn::Path& path, int layer, const Tensor<T>& z,
                         const Tensor<T>& x_t) {
  require(z.shape() == x_t.shape(), ErrorCategory::shape, "distill_objective: z and x_t differ in shape");
  const int tap = model.tap_node(layer);
  auto b = model.bind(path);
  return objective_with_target(model, b, tap, z, features(model, b, tap, x_t), false).value;
}

template <typename T>
ObjectiveGrad<T> distill_objective_grad(const rgn::RGNModel<T>& model, const rgn::Path& path, int layer,
                                        const Tensor<T>& z, const Tensor<T>& x_t) {
  require(z.shape() == x_t.shape(), ErrorCategory::shape, "distill_objective: z and x_t differ in shape");
  const int tap = model.tap_node(layer);
  auto b = model.bind(path);
  return objective_with_target(model, b, tap, z, features(model, b, tap, x_t), true);
}

template <typename T>
DistilledBatch<T> distill_features(const rgn::RGNModel<T>& model, const rgn::Path& path, const Tensor<T>& x_t,
                                   const Tensor<T>& x_s, std::span<const int> y_s, const DistillConfig& cfg, Rng& rng,
                                   std::vector<double>* trace) {
  cfg.validate(model.depth());
  require(x_t.shape() == x_s.shape(), ErrorCategory::shape, "distill_features: x_t and x_s differ in shape");
  const int tap = model.tap_node(cfg.layer);
  auto b = model.bind(path);
  const T eps = static_cast<T>(cfg.eps);
  const T alpha = static_cast<T>(cfg.step_size);

  DistilledBatch<T> out{x_s, std::vector<int>(y_s.begin(), y_s.end()), path, cfg.layer};
  Tensor<T>& z = out.x_prime;
  if (cfg.steps == 0 || cfg.eps == 0) return out;

  const Tensor<T> target = features(model, b, tap, x_t);
  if (cfg.random_start) {
    for (auto& v : z.values()) v += static_cast<T>(rng.uniform(-cfg.eps, cfg.eps));
    project_linf_box<T>(z.values(), x_s.values(), eps);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    ObjectiveGrad<T> og = objective_with_target(model, b, tap, z, target, true);
    if (trace) trace->push_back(og.value);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= alpha * sign_of(og.grad[i]);
    project_linf_box<T>(z.values(), x_s.values(), eps);
  }
  if (trace) trace->push_back(objective_with_target(model, b, tap, z, target, false).value);
  return out;
}

#define EIO_DISTILL_INSTANTIATE(T)                                                                                   \
  template double distill_objective<T>(const rgn::RGNModel<T>&, const rgn::Path&, int, const Tensor<T>&,           \
                                       const Tensor<T>&);                                                          \
  template ObjectiveGrad<T> distill_objective_grad<T>(const rgn::RGNModel<T>&, const rgn::Path&, int,              \
                                                      const Tensor<T>&, const Tensor<T>&);                         \
  template DistilledBatch<T> distill_features<T>(const rgn::RGNModel<T>&, const rgn::Path&, const Tensor<T>&,      \
                                                 const Tensor<T>&, std::span<const int>, const DistillConfig&,     \
                                                 Rng&, std::vector<double>*);

EIO_DISTILL_INSTANTIATE(float)
EIO_DISTILL_INSTANTIATE(double)

}  // namespace eio::distill
