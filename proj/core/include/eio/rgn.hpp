#pragma once

// Random gated network runtime: replica storage, gate and path sampling,
// path-conditioned forward with feature taps, derivation of standalone models
// and random-gated inference.

#include <boost/multiprecision/cpp_int.hpp>
#include <compare>
#include <optional>
#include <string>
#include <vector>

#include "eio/arch.hpp"
#include "eio/model.hpp"
#include "eio/nn.hpp"
#include "eio/random.hpp"

namespace eio::rgn {

using BigInt = boost::multiprecision::cpp_int;

// Index of the single open gate of a block.
struct GateIndex {
  int value = 0;
  auto operator<=>(const GateIndex&) const = default;
};

// One gate per gated block, in topological block order.
struct Path {
  std::vector<int> gates;

  int length() const noexcept { return static_cast<int>(gates.size()); }
  bool operator==(const Path&) const = default;
  // "0.1.1.0"
  std::string to_string() const;
  static Path parse(const std::string& s);
};

// True when the paths differ in at least one of their first `l` gates.
bool differ_in_prefix(const Path& a, const Path& b, int l);
// Every pair of `paths` differs somewhere in the first `l` gates.
bool pairwise_prefix_distinct(const std::vector<Path>& paths, int l);

GateIndex sample_gate(int n, Rng& rng);
Path sample_path(int L, int n, Rng& rng);

// p paths whose top-l prefixes are pairwise distinct. Rejection sampling with
// `retry_budget` attempts, then a deterministic assignment of distinct
// prefixes. Throws Error(infeasible) when n^l < p.
std::vector<Path> sample_distinct_paths(int L, int n, int p, int l, Rng& rng, int retry_budget = 1000);

BigInt count_paths(const arch::RGNSpec& spec);
BigInt count_paths(int n, int L);
// n^l >= p without overflow.
bool enough_prefixes(int n, int l, int p);

struct Provenance {
  std::string rgn_hash;  // hash of the RGN parameters the model came from
  std::string spec_hash;
  Path path;
};

template <typename T>
class StandaloneModel;

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<Tensor<T>> feature;
};

template <typename T>
class RGNModel {
 public:
  // Every replica and shared layer is initialized independently from `rng`.
  static RGNModel create(arch::RGNSpec spec, Rng& rng);

  const arch::RGNSpec& spec() const noexcept { return spec_; }
  const arch::ArchGraph& graph() const noexcept { return spec_.base; }
  int depth() const noexcept { return spec_.L; }
  int width() const noexcept { return spec_.n; }

  // Node index of gated block `b` (0-based) and of its feature tap.
  int block_node(int b) const { return spec_.scope.selected.at(static_cast<std::size_t>(b)); }
  // Feature map node for the 1-based tap layer l.
  int tap_node(int l) const;

  nn::LayerParams<T>& replica(int block, int r);
  const nn::LayerParams<T>& replica(int block, int r) const;
  // Parameters of a non-gated node (shared by every path).
  nn::LayerParams<T>& shared(int node);
  const nn::LayerParams<T>& shared(int node) const;
  const std::vector<int>& shared_nodes() const noexcept { return shared_nodes_; }

  void validate(const Path& path) const;

  // Parameter binding for one path. The const overload is for eval-mode use
  // only; eval-mode execution never writes through the binding.
  nn::Binding<T> bind(const Path& path);
  nn::Binding<T> bind(const Path& path) const;

  // Path-conditioned forward; `tap` is a 1-based gated-block index whose
  // feature map is returned alongside the logits.
  ForwardResult<T> forward(const Path& path, const Tensor<T>& x, nn::Mode mode = nn::Mode::eval,
                           std::optional<int> tap = std::nullopt);

  // Frozen path view usable by attacks and evaluation.
  BoundGraph<T> path_model(const Path& path, std::string id = {}) const;

  // Sum over replicas of block `b` of forward executions since the last reset.
  std::uint64_t block_executions(int b) const;
  void reset_counters() const;

  void zero_grad();

  // f(name, LayerParams&) with names "block{i}.replica{j}" and "shared.<id>".
  template <typename F>
  void for_each_layer(F&& f) {
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      for (std::size_t r = 0; r < blocks_[b].size(); ++r)
        f("block" + std::to_string(b) + ".replica" + std::to_string(r), blocks_[b][r]);
    for (std::size_t s = 0; s < shared_nodes_.size(); ++s)
      f("shared." + graph().node(shared_nodes_[s]).id, shared_[s]);
  }
  template <typename F>
  void for_each_layer(F&& f) const {
    const_cast<RGNModel*>(this)->for_each_layer([&](const std::string& name, nn::LayerParams<T>& p) {
      f(name, static_cast<const nn::LayerParams<T>&>(p));
    });
  }

  // Hash over every parameter and statistic value.
  std::uint64_t param_hash() const;

 private:
  RGNModel() = default;
  std::size_t shared_slot(int node) const;

  arch::RGNSpec spec_;
  std::vector<std::vector<nn::LayerParams<T>>> blocks_;  // [L][n]
  std::vector<int> shared_nodes_;
  std::vector<nn::LayerParams<T>> shared_;
  std::vector<int> block_of_node_;  // node -> block index or -1
};

// Single-path network with its own copy of the parameters; no gates.
template <typename T>
class StandaloneModel : public Classifier<T> {
 public:
  StandaloneModel(arch::ArchGraph graph, std::vector<int> param_nodes, std::vector<nn::LayerParams<T>> params,
                  Provenance provenance, std::string id);
  StandaloneModel(const StandaloneModel& o);
  StandaloneModel& operator=(const StandaloneModel& o);

  // Fresh base-architecture model with independently initialized parameters.
  static StandaloneModel initialize(const arch::ArchGraph& graph, Rng& rng, std::string id);

  const arch::ArchGraph& graph() const noexcept { return graph_; }
  const Provenance& provenance() const noexcept { return provenance_; }
  void set_id(std::string id) { id_ = std::move(id); }

  nn::Binding<T> bind();
  nn::Binding<T> bind() const;

  Tensor<T> logits(const Tensor<T>& x) const override;
  Tensor<T> input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale = 1.0) const override;
  bool has_skip_connections() const override { return graph_.has_skip_connections(); }
  std::string id() const override { return id_; }

  const std::vector<int>& param_nodes() const noexcept { return param_nodes_; }
  nn::LayerParams<T>& layer(int node);
  const nn::LayerParams<T>& layer(int node) const;

  template <typename F>
  void for_each_layer(F&& f) {
    for (std::size_t i = 0; i < param_nodes_.size(); ++i) f(graph_.node(param_nodes_[i]).id, params_[i]);
  }
  template <typename F>
  void for_each_layer(F&& f) const {
    for (std::size_t i = 0; i < param_nodes_.size(); ++i)
      f(graph_.node(param_nodes_[i]).id, static_cast<const nn::LayerParams<T>&>(params_[i]));
  }
  void zero_grad();
  std::uint64_t param_hash() const;

 private:
  arch::ArchGraph graph_;
  std::vector<int> param_nodes_;
  std::vector<nn::LayerParams<T>> params_;
  Provenance provenance_;
  std::string id_;
};

// Deep copy of the parameters along `path`.
template <typename T>
StandaloneModel<T> derive_model(const RGNModel<T>& rgn, const Path& path, std::string id = {});

// Samples one path for the whole batch and forwards it.
template <typename T>
Tensor<T> random_gated_inference(const RGNModel<T>& rgn, const Tensor<T>& x, Rng& rng);

// Classifier view that draws a fresh path on every call. Not thread-safe.
template <typename T>
class RandomGatedModel : public Classifier<T> {
 public:
  RandomGatedModel(const RGNModel<T>& rgn, Rng rng, std::string id) : rgn_(&rgn), rng_(rng), id_(std::move(id)) {}
  Tensor<T> logits(const Tensor<T>& x) const override;
  Tensor<T> input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale = 1.0) const override;
  bool has_skip_connections() const override { return rgn_->graph().has_skip_connections(); }
  std::string id() const override { return id_; }

 private:
  const RGNModel<T>* rgn_;
  mutable Rng rng_;
  std::string id_;
};

}  // namespace eio::rgn
