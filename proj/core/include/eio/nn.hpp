#pragma once

// Layer-graph execution engine: parameter storage, forward/backward over an
// ArchGraph with per-node parameter bindings, and the classification losses.

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "eio/arch.hpp"
#include "eio/random.hpp"
#include "eio/tensor.hpp"

namespace eio::nn {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;      // allocated on first accumulation
  Tensor<T> momentum;  // allocated on first optimizer update
  bool touched = false;  // received a gradient since the last update

  void accumulate(const T* g) {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    T* dst = grad.data();
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += g[i];
    touched = true;
  }
  void zero_grad() {
    grad.fill(T{0});
    touched = false;
  }
};

// Relaxed atomic counter that copies by value.
class ExecutionCounter {
 public:
  ExecutionCounter() = default;
  ExecutionCounter(const ExecutionCounter& o) : v_(o.get()) {}
  ExecutionCounter& operator=(const ExecutionCounter& o) {
    v_.store(o.get(), std::memory_order_relaxed);
    return *this;
  }
  void bump() const { v_.fetch_add(1, std::memory_order_relaxed); }
  std::uint64_t get() const { return v_.load(std::memory_order_relaxed); }
  void reset() const { v_.store(0, std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> v_{0};
};

// Parameters of one layer instance: conv (+ fused batchnorm), linear, or a
// standalone batchnorm. Conv weights are stored as [out, in*k*k].
template <typename T>
struct LayerParams {
  bool has_weight = false;
  bool has_bias = false;
  bool has_bn = false;
  Param<T> weight;
  Param<T> bias;
  Param<T> bn_weight;
  Param<T> bn_bias;
  Tensor<T> bn_mean;
  Tensor<T> bn_var;
  ExecutionCounter executions;  // forward passes through this instance

  // f(name, Param&) over trainable tensors in a fixed order.
  template <typename F>
  void for_each_param(F&& f) {
    if (has_weight) f("weight", weight);
    if (has_bias) f("bias", bias);
    if (has_bn) {
      f("bn_weight", bn_weight);
      f("bn_bias", bn_bias);
    }
  }
  template <typename F>
  void for_each_param(F&& f) const {
    const_cast<LayerParams*>(this)->for_each_param([&](const char* name, Param<T>& p) { f(name, static_cast<const Param<T>&>(p)); });
  }
  // f(name, Tensor&) over every persisted tensor, parameters and statistics.
  template <typename F>
  void for_each_tensor(F&& f) {
    for_each_param([&](const char* name, Param<T>& p) { f(std::string(name), p.value); });
    if (has_bn) {
      f(std::string("bn_running_mean"), bn_mean);
      f(std::string("bn_running_var"), bn_var);
    }
  }

  void zero_grad() {
    for_each_param([](const char*, Param<T>& p) { p.zero_grad(); });
  }

  template <typename U>
  LayerParams<U> cast() const;
};

// Fresh parameters for parameterized node `node` of `g` (conv with its fused
// batchnorm, linear, or unfused batchnorm). Conv weights use He-normal fan-in
// initialization; linear layers use uniform(+-1/sqrt(fan_in)).
template <typename T>
LayerParams<T> init_layer_params(const arch::ArchGraph& g, int node, Rng& rng);

// Per-node parameter pointers; a fused batchnorm node points at its conv's
// LayerParams. Non-parameterized nodes hold nullptr.
template <typename T>
using Binding = std::vector<LayerParams<T>*>;

enum class Mode { train, eval };

struct BackwardOptions {
  bool param_grads = false;
  // Scale applied to gradients flowing into the residual (non-shortcut)
  // inputs of add nodes. 1 is the exact gradient.
  double residual_scale = 1.0;
};

template <typename T>
class Executor {
 public:
  explicit Executor(const arch::ArchGraph& g) : g_(&g) {}

  // Runs nodes in topological order through `last` (inclusive, default all).
  void forward(const Binding<T>& b, const Tensor<T>& x, Mode mode, int last = -1);

  const Tensor<T>& activation(int node) const { return acts_.at(static_cast<std::size_t>(node)); }
  const Tensor<T>& logits() const { return activation(g_->output_node()); }

  // Back-propagates the given (node, dL/d node output) seeds and returns
  // dL/dx. Parameter gradients are accumulated into the bound Params when
  // requested.
  Tensor<T> backward(const Binding<T>& b, std::vector<std::pair<int, Tensor<T>>> seeds, const BackwardOptions& opt);

  const arch::ArchGraph& graph() const { return *g_; }

 private:
  void forward_node(int i, const Binding<T>& b);
  void backward_node(int i, const Binding<T>& b, const BackwardOptions& opt);
  Tensor<T>& grad_slot(int node);

  const arch::ArchGraph* g_;
  Mode mode_ = Mode::eval;
  int last_ = -1;
  std::vector<Tensor<T>> acts_;
  std::vector<Tensor<T>> grads_;
  std::vector<Tensor<T>> bn_xhat_;
  std::vector<std::vector<T>> bn_invstd_;
  std::vector<std::vector<std::uint32_t>> argmax_;
};

// Mean softmax cross-entropy over the batch; writes dL/dlogits when `grad` is
// non-null.
template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tensor<T>* grad);

// Per-sample cross entropy values.
template <typename T>
std::vector<double> cross_entropy_per_sample(const Tensor<T>& logits, std::span<const int> labels);

// Mean C&W margin max(z_y - max_{c!=y} z_c, -kappa) and its gradient.
template <typename T>
double cw_margin(const Tensor<T>& logits, std::span<const int> labels, double kappa, Tensor<T>* grad);

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace eio::nn
