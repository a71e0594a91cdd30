#pragma once

// Feature distillation: perturb a source batch inside an L-inf ball so that
// its layer-l features under one path mimic those of an unrelated target batch.

#include <optional>
#include <vector>

#include "eio/rgn.hpp"

namespace eio::distill {

struct DistillConfig {
  double eps = 0.07;
  int steps = 10;
  double step_size = 0.007;
  int layer = 1;  // 1-based gated block index
  bool random_start = false;

  void validate(int depth) const;
};

template <typename T>
struct DistilledBatch {
  Tensor<T> x_prime;
  std::vector<int> y_s;
  rgn::Path path;
  int layer = 0;
};

template <typename T>
struct ObjectiveGrad {
  double value = 0.0;
  Tensor<T> grad;  // d objective / d z
};

// Squared L2 distance between layer-l feature maps of z and x_t under `path`,
// summed over the batch (eval mode; x_t features are constants).
template <typename T>
double distill_objective(const rgn::RGNModel<T>& model, const rgn::Path& path, int layer, const Tensor<T>& z,
                         const Tensor<T>& x_t);

template <typename T>
ObjectiveGrad<T> distill_objective_grad(const rgn::RGNModel<T>& model, const rgn::Path& path, int layer,
                                        const Tensor<T>& z, const Tensor<T>& x_t);

// Sign-gradient PGD from z0 = x_s (or a uniform random start), projecting onto
// B_inf(x_s, eps) and [0, 1] after every step. `trace`, when given, receives
// the objective before the first step and after each step.
template <typename T>
DistilledBatch<T> distill_features(const rgn::RGNModel<T>& model, const rgn::Path& path, const Tensor<T>& x_t,
                                   const Tensor<T>& x_s, std::span<const int> y_s, const DistillConfig& cfg, Rng& rng,
                                   std::vector<double>* trace = nullptr);

}  // namespace eio::distill
