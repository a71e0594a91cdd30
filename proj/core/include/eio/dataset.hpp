#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eio/random.hpp"
#include "eio/tensor.hpp"

namespace eio::data {

// Labeled images scaled to [0, 1], stored NCHW in fp32.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;

  template <typename T>
  Tensor<T> images_as(std::span<const std::size_t> rows) const {
    return gather_rows(images, rows).template cast<T>();
  }
  template <typename T>
  Tensor<T> all_images() const {
    return images.template cast<T>();
  }
  std::vector<int> labels_at(std::span<const std::size_t> rows) const;
  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset head(std::size_t count) const;
  // Deterministic sample of `count` rows without replacement.
  Dataset sample(std::size_t count, std::uint64_t seed) const;

  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

enum class Source { cifar10_binary, synthetic_blobs, synthetic_shapes, image_folder };

struct DatasetDescriptor {
  Source source = Source::synthetic_blobs;
  std::string path;  // cifar10_binary / image_folder root
  int classes = 2;
  Shape dims{3, 32, 32};
  std::size_t count = 2000;  // synthetic sources: train + test
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t train_limit = 0;  // 0 = all
  std::size_t test_limit = 0;

  static Source parse_source(const std::string& s);
  static std::string source_name(Source s);
};

DatasetSplit ingest_dataset(const DatasetDescriptor& d);

// One CIFAR-10 binary batch file: 10000 records of 1 label byte + 3072
// channel-major pixel bytes (a record count that divides the file is accepted).
Dataset read_cifar10_file(const std::string& path);
// data_batch_1..5.bin for train and test_batch.bin for test under `dir`.
DatasetSplit read_cifar10_dir(const std::string& dir);
void write_cifar10_file(const std::string& path, const Dataset& d);

// Gaussian clusters around per-class mean images; linearly separable at the
// default noise level.
Dataset synthetic_blobs(int classes, const Shape& dims, std::size_t count, std::uint64_t seed);

// Procedural textured-shape images (class = shape family) with random colors,
// placement, scale and background clutter; a CIFAR-sized stand-in for
// offline runs.
Dataset synthetic_shapes(int classes, std::size_t count, std::uint64_t seed);

// <root>/<class>/*.ppm (binary P6); classes are the sorted subdirectory names.
Dataset read_image_folder(const std::string& root, const Shape& dims);

// Shuffled mini-batch order; the permutation is a function of (seed, epoch).
class BatchStream {
 public:
  BatchStream(std::size_t size, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch, bool drop_last = true);
  std::size_t batches() const noexcept { return batches_; }
  bool next(std::vector<std::size_t>& rows);

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_ = 0;
  std::size_t batches_ = 0;
  std::size_t cursor_ = 0;
};

}  // namespace eio::data
