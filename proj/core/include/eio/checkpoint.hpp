#pragma once

// Checkpoint container:
//   "EIOCKPT1" | u64 manifest length | manifest JSON | u64 array count |
//   per array: u32 name length, name, u8 dtype (0 f32, 1 f64), u32 rank,
//              rank x i64 dims, raw little-endian data.
// Arrays round-trip bit-exactly.

#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "eio/rgn.hpp"

namespace eio::ckpt {

using nlohmann::json;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

struct NamedArray {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;

  template <typename T>
  static NamedArray from(std::string name, const Tensor<T>& t);
  // Exact when the stored dtype is T; otherwise converted.
  template <typename T>
  Tensor<T> as() const;
};

struct Container {
  json manifest = json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    arrays.push_back(NamedArray::from(std::move(name), t));
  }
};

// Written to a temporary file and renamed into place.
void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

// Manifest and arrays for an RGN. `extra` is merged into the manifest (rng
// states, counters, config hash). Optimizer momentum is stored when present
// so that training can resume exactly.
template <typename T>
Container pack_rgn(const rgn::RGNModel<T>& model, const json& extra = json::object());
template <typename T>
rgn::RGNModel<T> unpack_rgn(const Container& c);

template <typename T>
Container pack_standalone(const rgn::StandaloneModel<T>& model, const json& extra = json::object());
template <typename T>
rgn::StandaloneModel<T> unpack_standalone(const Container& c);

template <typename T>
void save_rgn(const std::string& path, const rgn::RGNModel<T>& model, const json& extra = json::object()) {
  write_container(path, pack_rgn(model, extra));
}
template <typename T>
rgn::RGNModel<T> load_rgn(const std::string& path) {
  return unpack_rgn<T>(read_container(path));
}
template <typename T>
void save_standalone(const std::string& path, const rgn::StandaloneModel<T>& model, const json& extra = json::object()) {
  write_container(path, pack_standalone(model, extra));
}
template <typename T>
rgn::StandaloneModel<T> load_standalone(const std::string& path) {
  return unpack_standalone<T>(read_container(path));
}

// "rgn" or "standalone"
std::string container_kind(const Container& c);

}  // namespace eio::ckpt
