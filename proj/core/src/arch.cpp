#include "eio/arch.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "eio/random.hpp"

namespace eio::arch {

std::string_view kind_name(NodeKind k) noexcept {
  switch (k) {
    case NodeKind::input: return "input";
    case NodeKind::conv: return "conv";
    case NodeKind::batchnorm: return "batchnorm";
    case NodeKind::linear: return "linear";
    case NodeKind::activation: return "activation";
    case NodeKind::pool: return "pool";
    case NodeKind::add: return "add";
    case NodeKind::output: return "output";
  }
  return "?";
}

namespace {

std::size_t node_index_guard(int i) { return static_cast<std::size_t>(i); }

std::string at_line(int line) { return "line " + std::to_string(line) + ": "; }

std::optional<NodeKind> kind_from(std::string_view s) {
  if (s == "input") return NodeKind::input;
  if (s == "conv") return NodeKind::conv;
  if (s == "batchnorm" || s == "bn") return NodeKind::batchnorm;
  if (s == "linear") return NodeKind::linear;
  if (s == "activation") return NodeKind::activation;
  if (s == "pool") return NodeKind::pool;
  if (s == "add") return NodeKind::add;
  if (s == "output") return NodeKind::output;
  return std::nullopt;
}

int int_attr(const LayerNode& n, const std::string& key, std::optional<int> fallback) {
  auto it = n.attrs.find(key);
  if (it == n.attrs.end()) {
    if (!fallback) fail(ErrorCategory::parse, at_line(n.line) + "node '" + n.id + "' missing attribute '" + key + "'");
    return *fallback;
  }
  try {
    std::size_t used = 0;
    int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCategory::parse, at_line(n.line) + "attribute '" + key + "' of '" + n.id + "' is not an integer: " + it->second);
  }
}

double real_attr(const LayerNode& n, const std::string& key, double fallback) {
  auto it = n.attrs.find(key);
  if (it == n.attrs.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    fail(ErrorCategory::parse, at_line(n.line) + "attribute '" + key + "' of '" + n.id + "' is not a number");
  }
}

Shape parse_shape(const LayerNode& n) {
  auto it = n.attrs.find("shape");
  if (it == n.attrs.end()) fail(ErrorCategory::parse, at_line(n.line) + "input node needs shape=CxHxW");
  Shape s;
  std::stringstream ss(it->second);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      s.push_back(std::stoi(part));
    } catch (const std::exception&) {
      fail(ErrorCategory::parse, at_line(n.line) + "bad shape '" + it->second + "'");
    }
  }
  if (s.empty() || s.size() > 3 || std::any_of(s.begin(), s.end(), [](int d) { return d <= 0; }))
    fail(ErrorCategory::parse, at_line(n.line) + "bad shape '" + it->second + "'");
  return s;
}

void resolve_attrs(LayerNode& n) {
  switch (n.kind) {
    case NodeKind::conv:
      n.out_channels = int_attr(n, "out", std::nullopt);
      n.kernel = int_attr(n, "k", 3);
      n.stride = int_attr(n, "stride", 1);
      n.pad = int_attr(n, "pad", (n.kernel - 1) / 2);
      if (n.out_channels <= 0 || n.kernel <= 0 || n.stride <= 0 || n.pad < 0)
        fail(ErrorCategory::parse, at_line(n.line) + "invalid conv geometry for '" + n.id + "'");
      break;
    case NodeKind::linear:
      n.out_features = int_attr(n, "out", std::nullopt);
      n.bias = int_attr(n, "bias", 1) != 0;
      if (n.out_features <= 0) fail(ErrorCategory::parse, at_line(n.line) + "invalid linear width for '" + n.id + "'");
      break;
    case NodeKind::activation: {
      auto it = n.attrs.find("fn");
      std::string fn = it == n.attrs.end() ? "relu" : it->second;
      if (fn == "relu") n.fn = ActivationFn::relu;
      else if (fn == "tanh") n.fn = ActivationFn::tanh;
      else fail(ErrorCategory::parse, at_line(n.line) + "unknown activation '" + fn + "'");
      break;
    }
    case NodeKind::pool: {
      auto it = n.attrs.find("type");
      std::string type = it == n.attrs.end() ? "max" : it->second;
      if (type == "max") n.pool = PoolType::max;
      else if (type == "avg") n.pool = PoolType::avg;
      else if (type == "gavg") n.pool = PoolType::global_avg;
      else fail(ErrorCategory::parse, at_line(n.line) + "unknown pool type '" + type + "'");
      if (n.pool != PoolType::global_avg) {
        n.kernel = int_attr(n, "k", 2);
        n.stride = int_attr(n, "stride", n.kernel);
        if (n.kernel <= 0 || n.stride <= 0) fail(ErrorCategory::parse, at_line(n.line) + "invalid pool geometry");
      }
      break;
    }
    case NodeKind::batchnorm:
      n.bn_eps = real_attr(n, "eps", 1e-5);
      n.bn_momentum = real_attr(n, "momentum", 0.1);
      break;
    case NodeKind::add: {
      auto it = n.attrs.find("skip");
      if (it != n.attrs.end()) n.skip = it->second;
      break;
    }
    default:
      break;
  }
}

}  // namespace

int ArchGraph::index_of(std::string_view id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].id == id) return static_cast<int>(i);
  return -1;
}

int ArchGraph::num_classes() const {
  const Shape& s = node(output_).out_shape;
  return static_cast<int>(shape_size(s));
}

std::vector<std::string> ArchGraph::param_layer_ids() const {
  std::vector<std::string> ids;
  for (int i : param_layers_) ids.push_back(nodes_[node_index_guard(i)].id);
  return ids;
}

std::vector<int> ArchGraph::all_param_nodes() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    const auto k = nodes_[node_index_guard(i)].kind;
    if (k == NodeKind::conv || k == NodeKind::linear) out.push_back(i);
    if (k == NodeKind::batchnorm && fused_owner_[node_index_guard(i)] < 0) out.push_back(i);
  }
  return out;
}

int ArchGraph::feature_tap(int i) const {
  int last = fused_bn(i) >= 0 ? fused_bn(i) : i;
  const auto& cons = consumers(last);
  if (cons.size() != 1) return last;
  int next = cons[0];
  if (node(next).kind == NodeKind::activation) return next;
  if (node(next).kind == NodeKind::add && consumers(next).size() == 1 &&
      node(consumers(next)[0]).kind == NodeKind::activation)
    return consumers(next)[0];
  return last;
}

bool ArchGraph::has_skip_connections() const {
  return std::any_of(nodes_.begin(), nodes_.end(), [](const LayerNode& n) { return n.kind == NodeKind::add; });
}

int ArchGraph::operator_count() const { return size() - 2; }

std::uint64_t ArchGraph::hash() const {
  std::ostringstream os;
  for (const auto& n : nodes_) {
    os << n.id << ' ' << kind_name(n.kind);
    for (const auto& [k, v] : n.attrs) os << ' ' << k << '=' << v;
    os << '\n';
  }
  for (auto [a, b] : edges_) os << a << "->" << b << '\n';
  return hash_string(os.str());
}

void ArchGraph::finalize() {
  const std::size_t count = nodes_.size();
  inputs_.assign(count, {});
  consumers_.assign(count, {});
  for (auto [a, b] : edges_) {
    inputs_[node_index_guard(b)].push_back(a);
    consumers_[node_index_guard(a)].push_back(b);
  }
  fused_bn_.assign(count, -1);
  fused_owner_.assign(count, -1);
  param_layers_.clear();
  for (int i = 0; i < size(); ++i) {
    const auto& n = nodes_[node_index_guard(i)];
    if (n.kind == NodeKind::conv) {
      const auto& cons = consumers_[node_index_guard(i)];
      if (cons.size() == 1 && nodes_[node_index_guard(cons[0])].kind == NodeKind::batchnorm &&
          inputs_[node_index_guard(cons[0])].size() == 1) {
        fused_bn_[node_index_guard(i)] = cons[0];
        fused_owner_[node_index_guard(cons[0])] = i;
      }
      param_layers_.push_back(i);
    } else if (n.kind == NodeKind::linear) {
      bool classifier = false;
      int cur = i;
      // A linear layer whose output reaches the output node through
      // parameter-free nodes only is the classifier.
      while (true) {
        const auto& cons = consumers_[node_index_guard(cur)];
        if (cons.size() != 1) break;
        cur = cons[0];
        const auto k = nodes_[node_index_guard(cur)].kind;
        if (k == NodeKind::output) {
          classifier = true;
          break;
        }
        if (k != NodeKind::activation) break;
      }
      if (!classifier) param_layers_.push_back(i);
    }
  }
}

ArchGraph parse_arch(std::string_view text) {
  std::vector<LayerNode> decl;
  std::vector<std::tuple<std::string, std::string, int>> raw_edges;
  std::map<std::string, int> by_id;

  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok[0] == "edge") {
      if (tok.size() != 3) fail(ErrorCategory::parse, at_line(lineno) + "edge needs exactly <src> <dst>");
      raw_edges.emplace_back(tok[1], tok[2], lineno);
      continue;
    }
    if (tok.size() < 2) fail(ErrorCategory::parse, at_line(lineno) + "expected '<id> <kind> [key=value ...]'");
    LayerNode n;
    n.id = tok[0];
    n.line = lineno;
    auto kind = kind_from(tok[1]);
    if (!kind) fail(ErrorCategory::parse, at_line(lineno) + "unknown node kind '" + tok[1] + "'");
    n.kind = *kind;
    for (std::size_t t = 2; t < tok.size(); ++t) {
      auto eq = tok[t].find('=');
      if (eq == std::string::npos || eq == 0)
        fail(ErrorCategory::parse, at_line(lineno) + "attribute '" + tok[t] + "' is not key=value");
      n.attrs[tok[t].substr(0, eq)] = tok[t].substr(eq + 1);
    }
    if (by_id.count(n.id)) fail(ErrorCategory::parse, at_line(lineno) + "duplicate node id '" + n.id + "'");
    resolve_attrs(n);
    by_id[n.id] = static_cast<int>(decl.size());
    decl.push_back(std::move(n));
  }
  if (decl.empty()) fail(ErrorCategory::parse, "architecture has no nodes");

  const std::size_t count = decl.size();
  std::vector<std::vector<int>> succ(count), pred(count);
  std::set<std::pair<int, int>> seen_edges;
  for (const auto& [src, dst, ln] : raw_edges) {
    auto a = by_id.find(src);
    auto b = by_id.find(dst);
    if (a == by_id.end() || b == by_id.end())
      fail(ErrorCategory::parse, at_line(ln) + "dangling edge " + src + " -> " + dst + " (unknown node '" +
                                     (a == by_id.end() ? src : dst) + "')");
    if (!seen_edges.insert({a->second, b->second}).second)
      fail(ErrorCategory::parse, at_line(ln) + "duplicate edge " + src + " -> " + dst);
    succ[node_index_guard(a->second)].push_back(b->second);
    pred[node_index_guard(b->second)].push_back(a->second);
  }

  int input = -1, output = -1;
  for (std::size_t i = 0; i < count; ++i) {
    if (decl[i].kind == NodeKind::input) {
      if (input >= 0) fail(ErrorCategory::parse, at_line(decl[i].line) + "more than one input node");
      input = static_cast<int>(i);
    }
    if (decl[i].kind == NodeKind::output) {
      if (output >= 0) fail(ErrorCategory::parse, at_line(decl[i].line) + "more than one output node");
      output = static_cast<int>(i);
    }
  }
  if (input < 0) fail(ErrorCategory::parse, "architecture has no input node");
  if (output < 0) fail(ErrorCategory::parse, "architecture has no output node");

  for (std::size_t i = 0; i < count; ++i) {
    const auto& n = decl[i];
    const std::size_t fan_in = pred[i].size();
    const bool ok = n.kind == NodeKind::input ? fan_in == 0 : n.kind == NodeKind::add ? fan_in >= 2 : fan_in == 1;
    if (!ok)
      fail(ErrorCategory::parse, at_line(n.line) + "node '" + n.id + "' (" + std::string(kind_name(n.kind)) +
                                     ") has " + std::to_string(fan_in) + " inputs");
    if (n.kind != NodeKind::output && succ[i].empty())
      fail(ErrorCategory::parse, at_line(n.line) + "node '" + n.id + "' has no consumers");
  }

  // Kahn's algorithm, smallest declaration index first.
  std::vector<int> indeg(count);
  for (std::size_t i = 0; i < count; ++i) indeg[i] = static_cast<int>(pred[i].size());
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (std::size_t i = 0; i < count; ++i)
    if (indeg[i] == 0) ready.push(static_cast<int>(i));
  std::vector<int> order;
  while (!ready.empty()) {
    int v = ready.top();
    ready.pop();
    order.push_back(v);
    for (int w : succ[node_index_guard(v)])
      if (--indeg[node_index_guard(w)] == 0) ready.push(w);
  }
  if (order.size() != count) {
    std::string members;
    for (std::size_t i = 0; i < count; ++i)
      if (indeg[i] > 0) members += (members.empty() ? "" : ", ") + decl[i].id;
    fail(ErrorCategory::parse, "cycle detected among nodes: " + members);
  }
  if (order.front() != input) fail(ErrorCategory::parse, "node '" + decl[node_index_guard(order.front())].id + "' is not reachable from the input");

  std::vector<int> position(count);
  for (std::size_t p = 0; p < count; ++p) position[node_index_guard(order[p])] = static_cast<int>(p);

  ArchGraph g;
  g.source_ = std::string(text);
  for (int v : order) g.nodes_.push_back(decl[node_index_guard(v)]);
  for (std::size_t i = 0; i < count; ++i)
    for (int w : succ[i]) g.edges_.emplace_back(position[i], position[node_index_guard(w)]);
  std::sort(g.edges_.begin(), g.edges_.end());
  g.input_ = position[node_index_guard(input)];
  g.output_ = position[node_index_guard(output)];
  g.finalize();

  // Reachability from the input.
  std::vector<char> reach(count, 0);
  reach[node_index_guard(g.input_)] = 1;
  for (int i = 0; i < g.size(); ++i)
    if (reach[node_index_guard(i)])
      for (int c : g.consumers_[node_index_guard(i)]) reach[node_index_guard(c)] = 1;
  for (int i = 0; i < g.size(); ++i)
    if (!reach[node_index_guard(i)])
      fail(ErrorCategory::parse, at_line(g.nodes_[node_index_guard(i)].line) + "node '" + g.nodes_[node_index_guard(i)].id +
                                     "' is not reachable from the input");

  // Shape inference.
  for (int i = 0; i < g.size(); ++i) {
    auto& n = g.nodes_[node_index_guard(i)];
    const auto& ins = g.inputs_[node_index_guard(i)];
    const Shape in = ins.empty() ? Shape{} : g.nodes_[node_index_guard(ins[0])].out_shape;
    auto need_image = [&] {
      if (in.size() != 3)
        fail(ErrorCategory::parse, at_line(n.line) + "node '" + n.id + "' expects a CxHxW input, got " + shape_string(in));
    };
    switch (n.kind) {
      case NodeKind::input:
        n.out_shape = parse_shape(n);
        break;
      case NodeKind::conv: {
        need_image();
        const int ho = (in[1] + 2 * n.pad - n.kernel) / n.stride + 1;
        const int wo = (in[2] + 2 * n.pad - n.kernel) / n.stride + 1;
        if (ho <= 0 || wo <= 0) fail(ErrorCategory::parse, at_line(n.line) + "conv '" + n.id + "' output is empty");
        n.out_shape = {n.out_channels, ho, wo};
        n.bias = int_attr(n, "bias", g.fused_bn_[node_index_guard(i)] < 0 ? 1 : 0) != 0;
        break;
      }
      case NodeKind::pool: {
        need_image();
        if (n.pool == PoolType::global_avg) {
          n.out_shape = {in[0]};
        } else {
          const int ho = (in[1] - n.kernel) / n.stride + 1;
          const int wo = (in[2] - n.kernel) / n.stride + 1;
          if (ho <= 0 || wo <= 0) fail(ErrorCategory::parse, at_line(n.line) + "pool '" + n.id + "' output is empty");
          n.out_shape = {in[0], ho, wo};
        }
        break;
      }
      case NodeKind::linear:
        n.out_shape = {n.out_features};
        break;
      case NodeKind::add: {
        for (int j : ins)
          if (g.nodes_[node_index_guard(j)].out_shape != in)
            fail(ErrorCategory::parse, at_line(n.line) + "add '" + n.id + "' inputs have different shapes");
        if (!n.skip.empty()) {
          int s = g.index_of(n.skip);
          if (s < 0 || std::find(ins.begin(), ins.end(), s) == ins.end())
            fail(ErrorCategory::parse, at_line(n.line) + "add '" + n.id + "' skip=" + n.skip + " is not one of its inputs");
        }
        n.out_shape = in;
        break;
      }
      default:
        n.out_shape = in;
        break;
    }
  }
  return g;
}

ArchGraph load_arch(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCategory::io, "cannot open architecture file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_arch(ss.str());
  } catch (const Error& e) {
    throw Error(e.category(), path + ": " + e.what());
  }
}

ScopeRequest ScopeRequest::parse(std::string_view text) {
  if (text == "all") return all();
  if (text.substr(0, 3) == "top") {
    try {
      return top(std::stoi(std::string(text.substr(3))));
    } catch (const std::exception&) {
      fail(ErrorCategory::config, "bad scope '" + std::string(text) + "'");
    }
  }
  if (text.substr(0, 5) == "list:") {
    std::vector<std::string> ids;
    std::stringstream ss{std::string(text.substr(5))};
    for (std::string id; std::getline(ss, id, ',');)
      if (!id.empty()) ids.push_back(id);
    return list(std::move(ids));
  }
  fail(ErrorCategory::config, "bad scope '" + std::string(text) + "' (expected all, top<k> or list:<ids>)");
}

std::string ScopeRequest::to_string() const {
  switch (mode) {
    case ScopeMode::all: return "all";
    case ScopeMode::top_k: return "top" + std::to_string(k);
    case ScopeMode::explicit_list: {
      std::string s = "list:";
      for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + ids[i];
      return s;
    }
  }
  return "all";
}

AugmentationScope make_scope(const ArchGraph& arch, const ScopeRequest& mode) {
  const auto& layers = arch.param_layers();
  AugmentationScope scope{mode, {}};
  switch (mode.mode) {
    case ScopeMode::all:
      scope.selected = layers;
      break;
    case ScopeMode::top_k:
      if (mode.k < 1 || mode.k > static_cast<int>(layers.size()))
        fail(ErrorCategory::validation, "top_k: k=" + std::to_string(mode.k) + " outside [1, " +
                                            std::to_string(layers.size()) + "]");
      scope.selected.assign(layers.begin(), layers.begin() + mode.k);
      break;
    case ScopeMode::explicit_list: {
      std::set<int> chosen;
      for (const auto& id : mode.ids) {
        int idx = arch.index_of(id);
        if (idx < 0 || std::find(layers.begin(), layers.end(), idx) == layers.end())
          fail(ErrorCategory::validation, "scope list: '" + id + "' is not a parameterized layer");
        chosen.insert(idx);
      }
      scope.selected.assign(chosen.begin(), chosen.end());
      break;
    }
  }
  if (scope.selected.empty()) fail(ErrorCategory::validation, "augmentation scope selects no layers");
  return scope;
}

std::uint64_t RGNSpec::hash() const {
  std::string key = hex64(base.hash()) + "|" + scope.request.to_string() + "|" + std::to_string(n);
  return hash_string(key);
}

RGNSpec build_rgn_spec(const ArchGraph& arch, const AugmentationScope& scope, int n) {
  if (n < 1) fail(ErrorCategory::validation, "augmentation factor n must be >= 1, got " + std::to_string(n));
  for (int idx : scope.selected) {
    const auto& layers = arch.param_layers();
    if (std::find(layers.begin(), layers.end(), idx) == layers.end())
      fail(ErrorCategory::validation, "scope selects a non-parameterized node");
  }
  RGNSpec spec{arch, scope, n, scope.gated_depth(), arch.operator_count()};
  if (spec.L < 1 || spec.L > spec.m) fail(ErrorCategory::validation, "gated depth out of range");
  return spec;
}

}  // namespace eio::arch
