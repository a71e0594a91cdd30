#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "eio/nn.hpp"

namespace eio {

// dL/dlogits as a function of the logits.
template <typename T>
using LogitGradFn = std::function<Tensor<T>(const Tensor<T>& logits)>;

// Frozen, differentiable classifier as seen by attacks and evaluation. All
// calls run in eval mode and leave parameters untouched.
template <typename T>
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual Tensor<T> logits(const Tensor<T>& x) const = 0;

  // d/dx of sum(dloss(z) * z) with z = logits(x). `residual_scale` multiplies
  // gradients entering residual branches of skip connections (1 = exact).
  virtual Tensor<T> input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale = 1.0) const = 0;

  virtual bool has_skip_connections() const = 0;
  virtual std::string id() const = 0;
};

// Runs a graph with a fixed parameter binding.
template <typename T>
class BoundGraph : public Classifier<T> {
 public:
  BoundGraph(const arch::ArchGraph& graph, nn::Binding<T> binding, std::string id)
      : graph_(&graph), binding_(std::move(binding)), id_(std::move(id)) {}

  Tensor<T> logits(const Tensor<T>& x) const override {
    nn::Executor<T> ex(*graph_);
    ex.forward(binding_, x, nn::Mode::eval);
    return ex.logits();
  }

  Tensor<T> input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale = 1.0) const override {
    nn::Executor<T> ex(*graph_);
    ex.forward(binding_, x, nn::Mode::eval);
    Tensor<T> seed = dloss(ex.logits());
    nn::BackwardOptions opt;
    opt.residual_scale = residual_scale;
    return ex.backward(binding_, {{graph_->output_node(), std::move(seed)}}, opt);
  }

  bool has_skip_connections() const override { return graph_->has_skip_connections(); }
  std::string id() const override { return id_; }

 private:
  const arch::ArchGraph* graph_;
  nn::Binding<T> binding_;
  std::string id_;
};

enum class EnsembleRule { mean_prob, mean_logit, majority_vote };

EnsembleRule parse_ensemble_rule(const std::string& s);
std::string ensemble_rule_name(EnsembleRule r);

// Combines member predictions. mean_prob returns log of the averaged softmax,
// so argmax and cross-entropy act on the averaged probabilities. The vote rule
// returns vote counts; its gradient is that of mean_logit.
template <typename T>
class Ensemble : public Classifier<T> {
 public:
  Ensemble(std::vector<const Classifier<T>*> members, EnsembleRule rule, std::string id);

  Tensor<T> logits(const Tensor<T>& x) const override;
  Tensor<T> input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale = 1.0) const override;
  bool has_skip_connections() const override;
  std::string id() const override { return id_; }

 private:
  std::vector<const Classifier<T>*> members_;
  EnsembleRule rule_;
  std::string id_;
};

// Fraction of rows whose argmax equals the label.
template <typename T>
double accuracy(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> labels, int batch_size = 256);

template <typename T>
std::vector<char> correct_flags(const Classifier<T>& model, const Tensor<T>& x, std::span<const int> labels, int batch_size = 256);

}  // namespace eio
