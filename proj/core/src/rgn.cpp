#include "eio/rgn.hpp"

#include <algorithm>
#include <sstream>

namespace eio::rgn {

namespace {
std::size_t idx(int i) { return static_cast<std::size_t>(i); }

template <typename T>
std::uint64_t hash_tensor(std::uint64_t h, const Tensor<T>& t) {
  return hash_bytes(t.data(), t.size() * sizeof(T), h);
}
}  // namespace

std::string Path::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < gates.size(); ++i) s += (i ? "." : "") + std::to_string(gates[i]);
  return s;
}

Path Path::parse(const std::string& s) {
  Path p;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, '.');) {
    try {
      p.gates.push_back(std::stoi(part));
    } catch (const std::exception&) {
      fail(ErrorCategory::parse, "malformed path '" + s + "'");
    }
  }
  return p;
}

bool differ_in_prefix(const Path& a, const Path& b, int l) {
  const int len = std::min({l, a.length(), b.length()});
  for (int k = 0; k < len; ++k)
    if (a.gates[idx(k)] != b.gates[idx(k)]) return true;
  return false;
}

bool pairwise_prefix_distinct(const std::vector<Path>& paths, int l) {
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = i + 1; j < paths.size(); ++j)
      if (!differ_in_prefix(paths[i], paths[j], l)) return false;
  return true;
}

GateIndex sample_gate(int n, Rng& rng) {
  if (n < 1) fail(ErrorCategory::validation, "sample_gate: n must be >= 1, got " + std::to_string(n));
  return {static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)))};
}

Path sample_path(int L, int n, Rng& rng) {
  require(L >= 1, ErrorCategory::validation, "sample_path: L must be >= 1");
  Path p;
  p.gates.reserve(idx(L));
  for (int b = 0; b < L; ++b) p.gates.push_back(sample_gate(n, rng).value);
  return p;
}

bool enough_prefixes(int n, int l, int p) {
  if (n < 1 || l < 1) return false;
  BigInt total = boost::multiprecision::pow(BigInt(n), static_cast<unsigned>(l));
  return total >= p;
}

std::vector<Path> sample_distinct_paths(int L, int n, int p, int l, Rng& rng, int retry_budget) {
  require(p >= 1, ErrorCategory::validation, "sample_distinct_paths: p must be >= 1");
  require(l >= 1 && l <= L, ErrorCategory::validation,
          "sample_distinct_paths: l=" + std::to_string(l) + " outside [1, " + std::to_string(L) + "]");
  if (!enough_prefixes(n, l, p))
    fail(ErrorCategory::infeasible, "cannot draw " + std::to_string(p) + " paths with distinct top-" + std::to_string(l) +
                                        " prefixes from n=" + std::to_string(n) + " (only n^l prefixes exist)");
  std::vector<Path> out;
  out.reserve(idx(p));
  int draws = 0;
  while (static_cast<int>(out.size()) < p && draws < retry_budget) {
    Path cand = sample_path(L, n, rng);
    ++draws;
    bool ok = std::all_of(out.begin(), out.end(), [&](const Path& q) { return differ_in_prefix(cand, q, l); });
    if (ok) out.push_back(std::move(cand));
  }
  if (static_cast<int>(out.size()) == p) return out;

  // Fallback: consecutive prefixes in base-n counting order from a random
  // offset; n^l >= p guarantees they are distinct.
  out.clear();
  const int digits = std::min(l, 62);
  BigInt space = boost::multiprecision::pow(BigInt(n), static_cast<unsigned>(digits));
  const std::uint64_t cap = space > BigInt(std::numeric_limits<std::uint64_t>::max() / 2)
                                ? std::numeric_limits<std::uint64_t>::max() / 2
                                : static_cast<std::uint64_t>(space);
  const std::uint64_t offset = rng.uniform_index(cap);
  for (int i = 0; i < p; ++i) {
    Path path = sample_path(L, n, rng);
    std::uint64_t code = (offset + static_cast<std::uint64_t>(i)) % cap;
    for (int k = digits - 1; k >= 0; --k) {
      path.gates[idx(k)] = static_cast<int>(code % static_cast<std::uint64_t>(n));
      code /= static_cast<std::uint64_t>(n);
    }
    out.push_back(std::move(path));
  }
  if (!pairwise_prefix_distinct(out, l))
    fail(ErrorCategory::infeasible, "distinct path assignment failed");
  return out;
}

BigInt count_paths(int n, int L) {
  require(n >= 1 && L >= 0, ErrorCategory::validation, "count_paths: invalid n or L");
  return boost::multiprecision::pow(BigInt(n), static_cast<unsigned>(L));
}

BigInt count_paths(const arch::RGNSpec& spec) { return count_paths(spec.n, spec.L); }

// ---------------------------------------------------------------------------
// RGNModel

template <typename T>
RGNModel<T> RGNModel<T>::create(arch::RGNSpec spec, Rng& rng) {
  RGNModel m;
  m.spec_ = std::move(spec);
  const auto& g = m.spec_.base;
  m.block_of_node_.assign(idx(g.size()), -1);
  for (int b = 0; b < m.spec_.L; ++b) m.block_of_node_[idx(m.block_node(b))] = b;
  m.blocks_.resize(idx(m.spec_.L));
  for (int b = 0; b < m.spec_.L; ++b)
    for (int r = 0; r < m.spec_.n; ++r) m.blocks_[idx(b)].push_back(nn::init_layer_params<T>(g, m.block_node(b), rng));
  for (int node : g.all_param_nodes()) {
    if (m.block_of_node_[idx(node)] >= 0) continue;
    m.shared_nodes_.push_back(node);
    m.shared_.push_back(nn::init_layer_params<T>(g, node, rng));
  }
  return m;
}

template <typename T>
int RGNModel<T>::tap_node(int l) const {
  if (l < 1 || l > spec_.L)
    fail(ErrorCategory::validation, "tap layer " + std::to_string(l) + " outside [1, " + std::to_string(spec_.L) + "]");
  return graph().feature_tap(block_node(l - 1));
}

template <typename T>
nn::LayerParams<T>& RGNModel<T>::replica(int block, int r) {
  return blocks_.at(idx(block)).at(idx(r));
}

template <typename T>
const nn::LayerParams<T>& RGNModel<T>::replica(int block, int r) const {
  return blocks_.at(idx(block)).at(idx(r));
}

template <typename T>
std::size_t RGNModel<T>::shared_slot(int node) const {
  auto it = std::find(shared_nodes_.begin(), shared_nodes_.end(), node);
  require(it != shared_nodes_.end(), ErrorCategory::validation, "node is not a shared parameter layer");
  return static_cast<std::size_t>(it - shared_nodes_.begin());
}

template <typename T>
nn::LayerParams<T>& RGNModel<T>::shared(int node) {
  return shared_[shared_slot(node)];
}

template <typename T>
const nn::LayerParams<T>& RGNModel<T>::shared(int node) const {
  return shared_[shared_slot(node)];
}

template <typename T>
void RGNModel<T>::validate(const Path& path) const {
  if (path.length() != spec_.L)
    fail(ErrorCategory::shape, "path length " + std::to_string(path.length()) + " does not match gated depth " +
                                   std::to_string(spec_.L));
  for (int gidx : path.gates)
    if (gidx < 0 || gidx >= spec_.n)
      fail(ErrorCategory::validation, "gate index " + std::to_string(gidx) + " outside [0, " + std::to_string(spec_.n) + ")");
}

template <typename T>
nn::Binding<T> RGNModel<T>::bind(const Path& path) {
  validate(path);
  const auto& g = graph();
  nn::Binding<T> b(idx(g.size()), nullptr);
  for (int blk = 0; blk < spec_.L; ++blk) {
    const int node = block_node(blk);
    auto* p = &blocks_[idx(blk)][idx(path.gates[idx(blk)])];
    b[idx(node)] = p;
    if (g.fused_bn(node) >= 0) b[idx(g.fused_bn(node))] = p;
  }
  for (std::size_t s = 0; s < shared_nodes_.size(); ++s) {
    const int node = shared_nodes_[s];
    b[idx(node)] = &shared_[s];
    if (g.node(node).kind == arch::NodeKind::conv && g.fused_bn(node) >= 0) b[idx(g.fused_bn(node))] = &shared_[s];
  }
  return b;
}

template <typename T>
nn::Binding<T> RGNModel<T>::bind(const Path& path) const {
  return const_cast<RGNModel*>(this)->bind(path);
}

template <typename T>
ForwardResult<T> RGNModel<T>::forward(const Path& path, const Tensor<T>& x, nn::Mode mode, std::optional<int> tap) {
  auto b = bind(path);
  nn::Executor<T> ex(graph());
  ex.forward(b, x, mode);
  ForwardResult<T> out{ex.logits(), std::nullopt};
  if (tap) out.feature = ex.activation(tap_node(*tap));
  return out;
}

template <typename T>
BoundGraph<T> RGNModel<T>::path_model(const Path& path, std::string id) const {
  if (id.empty()) id = "path:" + path.to_string();
  return BoundGraph<T>(graph(), bind(path), std::move(id));
}

template <typename T>
std::uint64_t RGNModel<T>::block_executions(int b) const {
  std::uint64_t total = 0;
  for (const auto& r : blocks_.at(idx(b))) total += r.executions.get();
  return total;
}

template <typename T>
void RGNModel<T>::reset_counters() const {
  for (const auto& blk : blocks_)
    for (const auto& r : blk) r.executions.reset();
  for (const auto& s : shared_) s.executions.reset();
}

template <typename T>
void RGNModel<T>::zero_grad() {
  for (auto& blk : blocks_)
    for (auto& r : blk) r.zero_grad();
  for (auto& s : shared_) s.zero_grad();
}

template <typename T>
std::uint64_t RGNModel<T>::param_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_layer([&](const std::string& name, const nn::LayerParams<T>& p) {
    h = hash_bytes(name.data(), name.size(), h);
    const_cast<nn::LayerParams<T>&>(p).for_each_tensor([&](const std::string&, Tensor<T>& t) { h = hash_tensor(h, t); });
  });
  return h;
}

// ---------------------------------------------------------------------------
// StandaloneModel

template <typename T>
StandaloneModel<T>::StandaloneModel(arch::ArchGraph graph, std::vector<int> param_nodes, std::vector<nn::LayerParams<T>> params,
                                    Provenance provenance, std::string id)
    : graph_(std::move(graph)),
      param_nodes_(std::move(param_nodes)),
      params_(std::move(params)),
      provenance_(std::move(provenance)),
      id_(std::move(id)) {
  require(param_nodes_.size() == params_.size(), ErrorCategory::validation, "standalone model: parameter count mismatch");
  require(param_nodes_ == graph_.all_param_nodes(), ErrorCategory::validation,
          "standalone model: parameters do not cover the architecture");
}

template <typename T>
StandaloneModel<T>::StandaloneModel(const StandaloneModel& o) = default;
template <typename T>
StandaloneModel<T>& StandaloneModel<T>::operator=(const StandaloneModel& o) = default;

template <typename T>
StandaloneModel<T> StandaloneModel<T>::initialize(const arch::ArchGraph& graph, Rng& rng, std::string id) {
  std::vector<int> nodes = graph.all_param_nodes();
  std::vector<nn::LayerParams<T>> params;
  for (int node : nodes) params.push_back(nn::init_layer_params<T>(graph, node, rng));
  return StandaloneModel(graph, nodes, std::move(params), {}, std::move(id));
}

template <typename T>
nn::Binding<T> StandaloneModel<T>::bind() {
  nn::Binding<T> b(idx(graph_.size()), nullptr);
  for (std::size_t i = 0; i < param_nodes_.size(); ++i) {
    const int node = param_nodes_[i];
    b[idx(node)] = &params_[i];
    if (graph_.node(node).kind == arch::NodeKind::conv && graph_.fused_bn(node) >= 0) b[idx(graph_.fused_bn(node))] = &params_[i];
  }
  return b;
}

template <typename T>
nn::Binding<T> StandaloneModel<T>::bind() const {
  return const_cast<StandaloneModel*>(this)->bind();
}

template <typename T>
Tensor<T> StandaloneModel<T>::logits(const Tensor<T>& x) const {
  return BoundGraph<T>(graph_, bind(), id_).logits(x);
}

template <typename T>
Tensor<T> StandaloneModel<T>::input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale) const {
  return BoundGraph<T>(graph_, bind(), id_).input_gradient(x, dloss, residual_scale);
}

template <typename T>
nn::LayerParams<T>& StandaloneModel<T>::layer(int node) {
  auto it = std::find(param_nodes_.begin(), param_nodes_.end(), node);
  require(it != param_nodes_.end(), ErrorCategory::validation, "node has no parameters");
  return params_[static_cast<std::size_t>(it - param_nodes_.begin())];
}

template <typename T>
const nn::LayerParams<T>& StandaloneModel<T>::layer(int node) const {
  return const_cast<StandaloneModel*>(this)->layer(node);
}

template <typename T>
void StandaloneModel<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
std::uint64_t StandaloneModel<T>::param_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each_layer([&](const std::string& name, const nn::LayerParams<T>& p) {
    h = hash_bytes(name.data(), name.size(), h);
    const_cast<nn::LayerParams<T>&>(p).for_each_tensor([&](const std::string&, Tensor<T>& t) { h = hash_tensor(h, t); });
  });
  return h;
}

template <typename T>
StandaloneModel<T> derive_model(const RGNModel<T>& rgn, const Path& path, std::string id) {
  rgn.validate(path);
  const auto& g = rgn.graph();
  std::vector<int> nodes = g.all_param_nodes();
  std::vector<nn::LayerParams<T>> params;
  for (int node : nodes) {
    int block = -1;
    for (int b = 0; b < rgn.depth(); ++b)
      if (rgn.block_node(b) == node) block = b;
    nn::LayerParams<T> p = block >= 0 ? rgn.replica(block, path.gates[idx(block)]) : rgn.shared(node);
    // Gradients and optimizer state stay with the RGN.
    p.for_each_param([](const char*, nn::Param<T>& q) {
      q.grad = Tensor<T>();
      q.momentum = Tensor<T>();
      q.touched = false;
    });
    p.executions.reset();
    params.push_back(std::move(p));
  }
  Provenance prov{hex64(rgn.param_hash()), hex64(rgn.spec().hash()), path};
  if (id.empty()) id = "derived:" + path.to_string();
  return StandaloneModel<T>(g, std::move(nodes), std::move(params), std::move(prov), std::move(id));
}

template <typename T>
Tensor<T> random_gated_inference(const RGNModel<T>& rgn, const Tensor<T>& x, Rng& rng) {
  Path path = sample_path(rgn.depth(), rgn.width(), rng);
  return rgn.path_model(path).logits(x);
}

template <typename T>
Tensor<T> RandomGatedModel<T>::logits(const Tensor<T>& x) const {
  return random_gated_inference(*rgn_, x, rng_);
}

template <typename T>
Tensor<T> RandomGatedModel<T>::input_gradient(const Tensor<T>& x, const LogitGradFn<T>& dloss, double residual_scale) const {
  Path path = sample_path(rgn_->depth(), rgn_->width(), rng_);
  return rgn_->path_model(path).input_gradient(x, dloss, residual_scale);
}

#define EIO_RGN_INSTANTIATE(T)                                                                 \
  template class RGNModel<T>;                                                                  \
  template class StandaloneModel<T>;                                                           \
  template class RandomGatedModel<T>;                                                          \
  template StandaloneModel<T> derive_model<T>(const RGNModel<T>&, const Path&, std::string);   \
  template Tensor<T> random_gated_inference<T>(const RGNModel<T>&, const Tensor<T>&, Rng&);

EIO_RGN_INSTANTIATE(float)
EIO_RGN_INSTANTIATE(double)

}  // namespace eio::rgn
