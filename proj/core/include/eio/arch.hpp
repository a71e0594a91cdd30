#pragma once

// Base-architecture description and the random-gated-network construction
// plan: which parameterized layers become gated blocks and how wide.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "eio/tensor.hpp"

namespace eio::arch {

enum class NodeKind { input, conv, batchnorm, linear, activation, pool, add, output };
enum class ActivationFn { relu, tanh };
enum class PoolType { max, avg, global_avg };

std::string_view kind_name(NodeKind k) noexcept;

struct LayerNode {
  std::string id;
  NodeKind kind = NodeKind::input;
  int line = 0;  // source line, 0 for programmatic nodes
  std::map<std::string, std::string> attrs;

  // Resolved attributes; only the ones relevant to `kind` are meaningful.
  int out_channels = 0;  // conv
  int kernel = 1;        // conv, pool
  int stride = 1;        // conv, pool
  int pad = 0;           // conv
  bool bias = false;     // conv, linear
  int out_features = 0;  // linear
  ActivationFn fn = ActivationFn::relu;
  PoolType pool = PoolType::max;
  std::string skip;      // add: id of the shortcut input
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  Shape out_shape;  // per sample: {C, H, W} or {F}
};

// Layer DAG of a base network. Nodes are stored in a deterministic topological
// order (ties broken by declaration order), so node indices double as
// topological positions.
class ArchGraph {
 public:
  const std::vector<LayerNode>& nodes() const noexcept { return nodes_; }
  const LayerNode& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  int size() const noexcept { return static_cast<int>(nodes_.size()); }
  int index_of(std::string_view id) const;

  const std::vector<int>& inputs(int i) const { return inputs_.at(static_cast<std::size_t>(i)); }
  const std::vector<int>& consumers(int i) const { return consumers_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::pair<int, int>>& edges() const noexcept { return edges_; }
  int input_node() const noexcept { return input_; }
  int output_node() const noexcept { return output_; }
  const Shape& input_shape() const { return node(input_).out_shape; }
  int num_classes() const;

  // Parameterized layers eligible for gating, in topological order: every
  // conv (with its fused batchnorm) and every hidden linear layer. The final
  // classifier is excluded and always shared.
  const std::vector<int>& param_layers() const noexcept { return param_layers_; }
  std::vector<std::string> param_layer_ids() const;
  // For a conv: index of the batchnorm fused into it, or -1.
  int fused_bn(int i) const { return fused_bn_.at(static_cast<std::size_t>(i)); }
  // For a batchnorm: index of the conv that owns it, or -1.
  int fused_owner(int i) const { return fused_owner_.at(static_cast<std::size_t>(i)); }
  // Nodes carrying parameters outside the gated set candidates: classifier,
  // unfused batchnorms.
  std::vector<int> all_param_nodes() const;

  // Node whose output is the feature map of parameterized layer `i`: the
  // activation following it (through a residual add if needed), otherwise the
  // layer output itself.
  int feature_tap(int i) const;

  bool has_skip_connections() const;

  // Base-network operator count (every node except input and output).
  int operator_count() const;

  const std::string& source_text() const noexcept { return source_; }
  std::uint64_t hash() const;

  friend ArchGraph parse_arch(std::string_view text);

 private:
  void finalize();

  std::vector<LayerNode> nodes_;
  std::vector<std::pair<int, int>> edges_;
  std::vector<std::vector<int>> inputs_;
  std::vector<std::vector<int>> consumers_;
  std::vector<int> param_layers_;
  std::vector<int> fused_bn_;
  std::vector<int> fused_owner_;
  int input_ = -1;
  int output_ = -1;
  std::string source_;
};

// Parses the line-oriented architecture format:
//   <id> <kind> key=value ...
//   edge <src> <dst>
// '#' starts a comment. Throws Error(parse) with the offending line number.
ArchGraph parse_arch(std::string_view text);
ArchGraph load_arch(const std::string& path);

enum class ScopeMode { all, top_k, explicit_list };

struct ScopeRequest {
  ScopeMode mode = ScopeMode::all;
  int k = 0;
  std::vector<std::string> ids;

  static ScopeRequest all() { return {}; }
  static ScopeRequest top(int k) { return {ScopeMode::top_k, k, {}}; }
  static ScopeRequest list(std::vector<std::string> ids) { return {ScopeMode::explicit_list, 0, std::move(ids)}; }
  // "all", "top7", "list:conv1,conv2"
  static ScopeRequest parse(std::string_view text);
  std::string to_string() const;
};

struct AugmentationScope {
  ScopeRequest request;
  std::vector<int> selected;  // node indices, topological order

  int gated_depth() const noexcept { return static_cast<int>(selected.size()); }
};

AugmentationScope make_scope(const ArchGraph& arch, const ScopeRequest& mode);

struct RGNSpec {
  ArchGraph base;
  AugmentationScope scope;
  int n = 1;  // replicas per gated block
  int L = 0;  // gated depth
  int m = 0;  // base operator count

  bool degenerate() const noexcept { return n == 1; }
  std::uint64_t hash() const;
};

RGNSpec build_rgn_spec(const ArchGraph& arch, const AugmentationScope& scope, int n);

}  // namespace eio::arch
