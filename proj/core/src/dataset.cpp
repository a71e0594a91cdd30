#include "eio/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace eio::data {

namespace fs = std::filesystem;

Shape Dataset::sample_shape() const {
  Shape s = images.shape();
  if (!s.empty()) s.erase(s.begin());
  return s;
}

std::vector<int> Dataset::labels_at(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels.at(r));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  return Dataset{gather_rows(images, rows), labels_at(rows), classes};
}

Dataset Dataset::head(std::size_t count) const {
  count = std::min(count, size());
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return subset(rows);
}

Dataset Dataset::sample(std::size_t count, std::uint64_t seed) const {
  count = std::min(count, size());
  std::vector<std::size_t> rows(size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Rng rng(mix64(seed));
  for (std::size_t i = 0; i < count; ++i) std::swap(rows[i], rows[i + rng.uniform_index(rows.size() - i)]);
  rows.resize(count);
  return subset(rows);
}

void Dataset::validate() const {
  require(images.rank() >= 2 && static_cast<std::size_t>(images.dim(0)) == labels.size(), ErrorCategory::corrupt,
          "dataset images and labels disagree in count");
  for (int y : labels)
    require(y >= 0 && y < classes, ErrorCategory::corrupt, "label " + std::to_string(y) + " outside [0, classes)");
  for (float v : images.values())
    require(v >= 0.0f && v <= 1.0f, ErrorCategory::corrupt, "pixel value outside [0, 1]");
}

Source DatasetDescriptor::parse_source(const std::string& s) {
  if (s == "cifar10_binary" || s == "cifar10") return Source::cifar10_binary;
  if (s == "synthetic_blobs" || s == "blobs") return Source::synthetic_blobs;
  if (s == "synthetic_shapes" || s == "shapes") return Source::synthetic_shapes;
  if (s == "image_folder") return Source::image_folder;
  fail(ErrorCategory::config, "unknown dataset source '" + s + "'");
}

std::string DatasetDescriptor::source_name(Source s) {
  switch (s) {
    case Source::cifar10_binary: return "cifar10_binary";
    case Source::synthetic_blobs: return "synthetic_blobs";
    case Source::synthetic_shapes: return "synthetic_shapes";
    case Source::image_folder: return "image_folder";
  }
  return "?";
}

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

DatasetSplit split(const Dataset& all, double test_fraction) {
  const std::size_t test = static_cast<std::size_t>(std::llround(static_cast<double>(all.size()) * test_fraction));
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < all.size(); ++i) (i < all.size() - test ? tr : te).push_back(i);
  return {all.subset(tr), all.subset(te)};
}

Dataset concat(const std::vector<Dataset>& parts) {
  Dataset out;
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Shape s = parts.at(0).images.shape();
  s[0] = static_cast<int>(n);
  out.images = Tensor<float>(s);
  out.classes = parts[0].classes;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), out.images.data() + off);
    off += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

Dataset read_cifar10_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "cannot open CIFAR-10 file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    fail(ErrorCategory::corrupt, "'" + path + "': size " + std::to_string(bytes.size()) +
                                     " is not a whole number of 3073-byte records");
  const std::size_t n = bytes.size() / kCifarRecord;
  Dataset d;
  d.classes = 10;
  d.images = Tensor<float>({static_cast<int>(n), 3, 32, 32});
  d.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) fail(ErrorCategory::corrupt, "'" + path + "': record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    d.labels[r] = rec[0];
    float* dst = d.images.data() + r * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
  }
  return d;
}

DatasetSplit read_cifar10_dir(const std::string& dir) {
  std::vector<Dataset> train;
  for (int i = 1; i <= 5; ++i) train.push_back(read_cifar10_file((fs::path(dir) / ("data_batch_" + std::to_string(i) + ".bin")).string()));
  return {concat(train), read_cifar10_file((fs::path(dir) / "test_batch.bin").string())};
}

void write_cifar10_file(const std::string& path, const Dataset& d) {
  require(d.sample_shape() == Shape({3, 32, 32}), ErrorCategory::shape, "CIFAR-10 records are 3x32x32");
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCategory::io, "cannot write '" + path + "'");
  std::vector<unsigned char> rec(kCifarRecord);
  for (std::size_t r = 0; r < d.size(); ++r) {
    rec[0] = static_cast<unsigned char>(d.labels[r]);
    const float* src = d.images.data() + r * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k)
      rec[1 + k] = static_cast<unsigned char>(std::lround(std::clamp(src[k], 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

Dataset synthetic_blobs(int classes, const Shape& dims, std::size_t count, std::uint64_t seed) {
  require(classes >= 2, ErrorCategory::config, "synthetic_blobs needs at least 2 classes");
  Rng rng(mix64(seed ^ 0xb10b5ULL));
  const std::size_t dim = shape_size(dims);
  std::vector<std::vector<float>> means(static_cast<std::size_t>(classes), std::vector<float>(dim));
  for (auto& m : means)
    for (auto& v : m) v = static_cast<float>(rng.uniform(0.3, 0.7));
  Shape s = dims;
  s.insert(s.begin(), static_cast<int>(count));
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>(s);
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int y = static_cast<int>(i % static_cast<std::size_t>(classes));
    d.labels[i] = y;
    float* dst = d.images.data() + i * dim;
    for (std::size_t k = 0; k < dim; ++k)
      dst[k] = std::clamp(means[static_cast<std::size_t>(y)][k] + static_cast<float>(rng.normal() * 0.05), 0.0f, 1.0f);
  }
  return d;
}

namespace {

// Shape membership in normalized coordinates (u, v) relative to the shape
// center, scaled by its radius.
bool in_shape(int family, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  switch (family) {
    case 0: return r <= 1.0;                                             // disc
    case 1: return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;           // square
    case 2: return v <= 0.8 && v >= -0.9 + 1.7 * std::abs(u);            // triangle
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);  // plus
    case 4: return r <= 1.0 && r >= 0.55;                                // ring
    case 5: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && static_cast<int>(std::floor((v + 1.0) * 2.5)) % 2 == 0;  // h-stripes
    case 6: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0 && static_cast<int>(std::floor((u + 1.0) * 2.5)) % 2 == 0;  // v-stripes
    case 7: return std::abs(std::abs(u) - std::abs(v)) <= 0.28 && std::abs(u) <= 1.0;  // X
    case 8: return std::abs(u) + std::abs(v) <= 1.0;                     // diamond
    default: {                                                           // two dots
      const double a = std::hypot(u - 0.5, v), b = std::hypot(u + 0.5, v);
      return a <= 0.42 || b <= 0.42;
    }
  }
}

}  // namespace

Dataset synthetic_shapes(int classes, std::size_t count, std::uint64_t seed) {
  require(classes >= 2 && classes <= 10, ErrorCategory::config, "synthetic_shapes supports 2..10 classes");
  Rng rng(mix64(seed ^ 0x5a4e5ULL));
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({static_cast<int>(count), 3, 32, 32});
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int y = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
    d.labels[i] = y;
    float fg[3], bg0[3], bg1[3];
    // Foreground and background colors with a guaranteed luminance gap.
    double lum_fg, lum_bg;
    do {
      for (int c = 0; c < 3; ++c) {
        fg[c] = static_cast<float>(rng.uniform01());
        bg0[c] = static_cast<float>(rng.uniform01());
      }
      lum_fg = 0.3 * fg[0] + 0.59 * fg[1] + 0.11 * fg[2];
      lum_bg = 0.3 * bg0[0] + 0.59 * bg0[1] + 0.11 * bg0[2];
    } while (std::abs(lum_fg - lum_bg) < 0.25);
    for (int c = 0; c < 3; ++c) bg1[c] = std::clamp(bg0[c] + static_cast<float>(rng.uniform(-0.2, 0.2)), 0.0f, 1.0f);
    const double radius = rng.uniform(7.0, 12.0);
    const double cx = rng.uniform(radius * 0.7, 32.0 - radius * 0.7);
    const double cy = rng.uniform(radius * 0.7, 32.0 - radius * 0.7);
    const double angle = rng.uniform(-0.35, 0.35);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double gdir = rng.uniform(0.0, 2.0 * M_PI);
    const int clutter = static_cast<int>(rng.uniform_index(4));
    double cl_x[4], cl_y[4], cl_r[4];
    float cl_c[4][3];
    for (int k = 0; k < clutter; ++k) {
      cl_x[k] = rng.uniform(0, 32);
      cl_y[k] = rng.uniform(0, 32);
      cl_r[k] = rng.uniform(1.0, 2.5);
      for (int c = 0; c < 3; ++c) cl_c[k][c] = static_cast<float>(rng.uniform01());
    }
    float* img = d.images.data() + i * 3 * 32 * 32;
    for (int py = 0; py < 32; ++py)
      for (int px = 0; px < 32; ++px) {
        const double t = 0.5 + 0.5 * ((px - 16) * std::cos(gdir) + (py - 16) * std::sin(gdir)) / 22.6;
        float pix[3];
        for (int c = 0; c < 3; ++c) pix[c] = static_cast<float>(bg0[c] * (1 - t) + bg1[c] * t);
        for (int k = 0; k < clutter; ++k)
          if (std::hypot(px - cl_x[k], py - cl_y[k]) <= cl_r[k])
            for (int c = 0; c < 3; ++c) pix[c] = cl_c[k][c];
        const double dx = (px + 0.5 - cx) / radius, dy = (py + 0.5 - cy) / radius;
        const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
        if (in_shape(y, u, v))
          for (int c = 0; c < 3; ++c) pix[c] = fg[c];
        for (int c = 0; c < 3; ++c)
          img[(c * 32 + py) * 32 + px] = std::clamp(pix[c] + static_cast<float>(rng.normal() * 0.04), 0.0f, 1.0f);
      }
  }
  return d;
}

Dataset read_image_folder(const std::string& root, const Shape& dims) {
  require(dims.size() == 3 && dims[0] == 3, ErrorCategory::config, "image_folder expects 3xHxW dims");
  if (!fs::is_directory(root)) fail(ErrorCategory::io, "image folder '" + root + "' does not exist");
  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  require(class_dirs.size() >= 2, ErrorCategory::corrupt, "image folder needs at least two class directories");
  std::vector<std::vector<float>> imgs;
  std::vector<int> labels;
  const int h = dims[1], w = dims[2];
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[c]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      std::ifstream f(file, std::ios::binary);
      std::string magic;
      int fw = 0, fh = 0, maxv = 0;
      f >> magic >> fw >> fh >> maxv;
      f.get();
      if (magic != "P6" || fw != w || fh != h || maxv != 255)
        fail(ErrorCategory::corrupt, "'" + file.string() + "' is not a " + std::to_string(w) + "x" + std::to_string(h) + " P6 image");
      std::vector<unsigned char> px(static_cast<std::size_t>(w * h * 3));
      f.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
      if (f.gcount() != static_cast<std::streamsize>(px.size())) fail(ErrorCategory::corrupt, "'" + file.string() + "' is truncated");
      std::vector<float> chw(px.size());
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < 3; ++ch)
            chw[static_cast<std::size_t>((ch * h + y) * w + x)] = px[static_cast<std::size_t>((y * w + x) * 3 + ch)] / 255.0f;
      imgs.push_back(std::move(chw));
      labels.push_back(static_cast<int>(c));
    }
  }
  require(!imgs.empty(), ErrorCategory::corrupt, "image folder contains no .ppm files");
  Dataset d;
  d.classes = static_cast<int>(class_dirs.size());
  d.images = Tensor<float>({static_cast<int>(imgs.size()), 3, h, w});
  for (std::size_t i = 0; i < imgs.size(); ++i) std::copy(imgs[i].begin(), imgs[i].end(), d.images.data() + i * imgs[i].size());
  d.labels = std::move(labels);
  return d;
}

DatasetSplit ingest_dataset(const DatasetDescriptor& desc) {
  DatasetSplit out;
  switch (desc.source) {
    case Source::cifar10_binary: {
      fs::path p(desc.path);
      if (fs::is_directory(p)) {
        out = read_cifar10_dir(desc.path);
      } else {
        out = split(read_cifar10_file(desc.path), desc.test_fraction);
      }
      break;
    }
    case Source::synthetic_blobs:
      out = split(synthetic_blobs(desc.classes, desc.dims, desc.count, desc.seed), desc.test_fraction);
      break;
    case Source::synthetic_shapes:
      out = split(synthetic_shapes(desc.classes, desc.count, desc.seed), desc.test_fraction);
      break;
    case Source::image_folder: {
      Dataset all = read_image_folder(desc.path, desc.dims);
      out = split(all.sample(all.size(), desc.seed), desc.test_fraction);
      break;
    }
  }
  if (desc.train_limit > 0 && desc.train_limit < out.train.size()) out.train = out.train.sample(desc.train_limit, desc.seed ^ 0x7a11ULL);
  if (desc.test_limit > 0 && desc.test_limit < out.test.size()) out.test = out.test.sample(desc.test_limit, desc.seed ^ 0x7e57ULL);
  out.train.validate();
  out.test.validate();
  return out;
}

BatchStream::BatchStream(std::size_t size, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch, bool drop_last)
    : order_(size), batch_(batch_size) {
  require(size > 0, ErrorCategory::validation, "dataset is empty");
  require(batch_size > 0, ErrorCategory::config, "batch size must be positive");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(mix64(seed ^ mix64(epoch + 1)));
  for (std::size_t i = size; i > 1; --i) std::swap(order_[i - 1], order_[rng.uniform_index(i)]);
  batches_ = drop_last ? size / batch_size : (size + batch_size - 1) / batch_size;
  if (batches_ == 0) batches_ = 1;  // a single short batch when size < batch_size
}

bool BatchStream::next(std::vector<std::size_t>& rows) {
  if (cursor_ >= batches_) return false;
  const std::size_t begin = cursor_ * batch_;
  const std::size_t end = std::min(begin + batch_, order_.size());
  rows.assign(order_.begin() + static_cast<std::ptrdiff_t>(begin), order_.begin() + static_cast<std::ptrdiff_t>(end));
  ++cursor_;
  return true;
}

}  // namespace eio::data
