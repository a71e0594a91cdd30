#include "eio/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace eio::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'E', 'I', 'O', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint64_t kMaxManifest = 1ull << 30;

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename V>
  V get(const char* what) {
    V v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (is_.gcount() != static_cast<std::streamsize>(sizeof(V))) truncated(what);
    return v;
  }
  void bytes(char* dst, std::size_t n, const char* what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (is_.gcount() != static_cast<std::streamsize>(n)) truncated(what);
  }
  [[noreturn]] void truncated(const char* what) {
    fail(ErrorCategory::corrupt, "checkpoint '" + path_ + "' truncated while reading " + what);
  }
  [[noreturn]] void bad(const std::string& what) { fail(ErrorCategory::corrupt, "checkpoint '" + path_ + "': " + what); }

 private:
  std::istream& is_;
  std::string path_;
};

std::string tensor_key(const std::string& layer, const std::string& name) {
  return layer + "." + name;
}

}  // namespace

template <typename T>
NamedArray NamedArray::from(std::string name, const Tensor<T>& t) {
  NamedArray a;
  a.name = std::move(name);
  a.dtype = dtype_of<T>();
  a.shape = t.shape();
  a.bytes.resize(t.size() * sizeof(T));
  if (!a.bytes.empty()) std::memcpy(a.bytes.data(), t.data(), a.bytes.size());
  return a;
}

template <typename T>
Tensor<T> NamedArray::as() const {
  Tensor<T> out(shape);
  const std::size_t n = out.size();
  if (dtype == dtype_of<T>()) {
    if (n) std::memcpy(out.data(), bytes.data(), n * sizeof(T));
  } else if (dtype == DType::f32) {
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, bytes.data() + i * 4, 4);
      out[i] = static_cast<T>(v);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      std::memcpy(&v, bytes.data() + i * 8, 8);
      out[i] = static_cast<T>(v);
    }
  }
  return out;
}

const NamedArray* Container::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& Container::get(const std::string& name) const {
  const NamedArray* a = find(name);
  if (!a) fail(ErrorCategory::corrupt, "checkpoint has no array '" + name + "'");
  return *a;
}

void write_container(const std::string& path, const Container& c) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCategory::io, "cannot write checkpoint '" + tmp.string() + "'");
    os.write(kMagic, sizeof(kMagic));
    const std::string manifest = c.manifest.dump();
    put<std::uint64_t>(os, manifest.size());
    os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
    put<std::uint64_t>(os, c.arrays.size());
    for (const auto& a : c.arrays) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
      os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      put<std::uint8_t>(os, static_cast<std::uint8_t>(a.dtype));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
      for (int d : a.shape) put<std::int64_t>(os, d);
      os.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
    }
    if (!os) fail(ErrorCategory::io, "write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, target);
}

Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCategory::io, "cannot open checkpoint '" + path + "'");
  Reader r(is, path);
  char magic[8];
  r.bytes(magic, 8, "magic");
  if (std::memcmp(magic, kMagic, 8) != 0) r.bad("bad magic (not an eio checkpoint)");
  const auto mlen = r.get<std::uint64_t>("manifest length");
  if (mlen > kMaxManifest) r.bad("manifest length " + std::to_string(mlen) + " is implausible");
  std::string manifest(mlen, '\0');
  r.bytes(manifest.data(), mlen, "manifest");
  Container c;
  try {
    c.manifest = json::parse(manifest);
  } catch (const json::exception& e) {
    r.bad(std::string("manifest is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>("array count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto nlen = r.get<std::uint32_t>("array name length");
    if (nlen > 4096) r.bad("array name length " + std::to_string(nlen) + " is implausible");
    a.name.resize(nlen);
    r.bytes(a.name.data(), nlen, "array name");
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt > 1) r.bad("array '" + a.name + "' has unknown dtype " + std::to_string(dt));
    a.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.bad("array '" + a.name + "' has rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::int64_t>("dims");
      if (d < 0 || d > (1ll << 31)) r.bad("array '" + a.name + "' has dimension " + std::to_string(d));
      a.shape.push_back(static_cast<int>(d));
      n *= static_cast<std::size_t>(d);
    }
    a.bytes.resize(n * dtype_size(a.dtype));
    r.bytes(reinterpret_cast<char*>(a.bytes.data()), a.bytes.size(), "array data");
    c.arrays.push_back(std::move(a));
  }
  if (is.peek() != std::char_traits<char>::eof()) r.bad("trailing bytes after the last array");
  return c;
}

std::string container_kind(const Container& c) {
  return c.manifest.value("kind", std::string{});
}

namespace {

template <typename T>
void add_layer(Container& c, const std::string& layer, const nn::LayerParams<T>& p) {
  auto& lp = const_cast<nn::LayerParams<T>&>(p);
  lp.for_each_tensor([&](const std::string& name, Tensor<T>& t) { c.add(tensor_key(layer, name), t); });
  lp.for_each_param([&](const char* name, nn::Param<T>& prm) {
    if (prm.momentum.size() == prm.value.size() && !prm.momentum.empty())
      c.add(tensor_key(layer, std::string(name) + ".momentum"), prm.momentum);
  });
}

template <typename T>
void load_layer(const Container& c, const std::string& layer, nn::LayerParams<T>& p) {
  p.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    Tensor<T> v = c.get(tensor_key(layer, name)).template as<T>();
    require(v.shape() == t.shape(), ErrorCategory::corrupt,
            "array '" + layer + "." + name + "' has shape " + shape_string(v.shape()) + ", expected " + shape_string(t.shape()));
    t = std::move(v);
  });
  p.for_each_param([&](const char* name, nn::Param<T>& prm) {
    prm.grad = Tensor<T>();
    prm.touched = false;
    if (const NamedArray* m = c.find(tensor_key(layer, std::string(name) + ".momentum"))) {
      prm.momentum = m->as<T>();
    } else {
      prm.momentum = Tensor<T>();
    }
  });
}

void check_manifest(const Container& c, const char* kind) {
  require(container_kind(c) == kind, ErrorCategory::corrupt,
          std::string("expected a '") + kind + "' checkpoint, found '" + container_kind(c) + "'");
  require(c.manifest.contains("arch"), ErrorCategory::corrupt, "checkpoint manifest lacks the architecture text");
}

}  // namespace

template <typename T>
Container pack_rgn(const rgn::RGNModel<T>& model, const json& extra) {
  Container c;
  c.manifest = extra.is_object() ? extra : json::object();
  const auto& spec = model.spec();
  c.manifest["kind"] = "rgn";
  c.manifest["arch"] = spec.base.source_text();
  c.manifest["arch_hash"] = hex64(spec.base.hash());
  c.manifest["spec_hash"] = hex64(spec.hash());
  c.manifest["n"] = spec.n;
  c.manifest["L"] = spec.L;
  c.manifest["m"] = spec.m;
  c.manifest["scope"] = spec.scope.request.to_string();
  std::vector<std::string> selected;
  for (int s : spec.scope.selected) selected.push_back(spec.base.node(s).id);
  c.manifest["selected"] = selected;
  c.manifest["path_count"] = rgn::count_paths(spec).str();
  c.manifest["degenerate"] = spec.degenerate();
  if (spec.degenerate()) c.manifest["note"] = "degenerate: equivalent to base network";
  c.manifest["param_hash"] = hex64(model.param_hash());
  c.manifest["dtype"] = dtype_of<T>() == DType::f32 ? "f32" : "f64";
  model.for_each_layer([&](const std::string& name, const nn::LayerParams<T>& p) { add_layer(c, name, p); });
  return c;
}

template <typename T>
rgn::RGNModel<T> unpack_rgn(const Container& c) {
  check_manifest(c, "rgn");
  const auto& m = c.manifest;
  arch::ArchGraph g = arch::parse_arch(m.at("arch").get<std::string>());
  auto scope = arch::make_scope(g, arch::ScopeRequest::parse(m.at("scope").get<std::string>()));
  auto spec = arch::build_rgn_spec(g, scope, m.at("n").get<int>());
  require(hex64(spec.hash()) == m.at("spec_hash").get<std::string>(), ErrorCategory::corrupt,
          "checkpoint spec hash does not match its architecture and scope");
  Rng dummy(0);
  auto model = rgn::RGNModel<T>::create(std::move(spec), dummy);
  model.for_each_layer([&](const std::string& name, nn::LayerParams<T>& p) { load_layer(c, name, p); });
  return model;
}

template <typename T>
Container pack_standalone(const rgn::StandaloneModel<T>& model, const json& extra) {
  Container c;
  c.manifest = extra.is_object() ? extra : json::object();
  c.manifest["kind"] = "standalone";
  c.manifest["id"] = model.id();
  c.manifest["arch"] = model.graph().source_text();
  c.manifest["arch_hash"] = hex64(model.graph().hash());
  c.manifest["param_hash"] = hex64(model.param_hash());
  c.manifest["dtype"] = dtype_of<T>() == DType::f32 ? "f32" : "f64";
  const auto& prov = model.provenance();
  c.manifest["provenance"] = {{"rgn_hash", prov.rgn_hash}, {"spec_hash", prov.spec_hash}, {"path", prov.path.to_string()}};
  model.for_each_layer([&](const std::string& name, const nn::LayerParams<T>& p) { add_layer(c, name, p); });
  return c;
}

template <typename T>
rgn::StandaloneModel<T> unpack_standalone(const Container& c) {
  check_manifest(c, "standalone");
  const auto& m = c.manifest;
  arch::ArchGraph g = arch::parse_arch(m.at("arch").get<std::string>());
  std::vector<int> nodes = g.all_param_nodes();
  std::vector<nn::LayerParams<T>> params;
  Rng dummy(0);
  for (int node : nodes) {
    params.push_back(nn::init_layer_params<T>(g, node, dummy));
    load_layer(c, g.node(node).id, params.back());
  }
  rgn::Provenance prov;
  if (m.contains("provenance")) {
    const auto& p = m.at("provenance");
    prov.rgn_hash = p.value("rgn_hash", std::string{});
    prov.spec_hash = p.value("spec_hash", std::string{});
    const std::string path = p.value("path", std::string{});
    if (!path.empty()) prov.path = rgn::Path::parse(path);
  }
  return rgn::StandaloneModel<T>(g, nodes, std::move(params), prov, m.value("id", std::string{}));
}

#define EIO_CKPT_INSTANTIATE(T)                                                        \
  template NamedArray NamedArray::from<T>(std::string, const Tensor<T>&);              \
  template Tensor<T> NamedArray::as<T>() const;                                        \
  template Container pack_rgn<T>(const rgn::RGNModel<T>&, const json&);                \
  template rgn::RGNModel<T> unpack_rgn<T>(const Container&);                           \
  template Container pack_standalone<T>(const rgn::StandaloneModel<T>&, const json&);  \
  template rgn::StandaloneModel<T> unpack_standalone<T>(const Container&);

EIO_CKPT_INSTANTIATE(float)
EIO_CKPT_INSTANTIATE(double)

}  // namespace eio::ckpt
