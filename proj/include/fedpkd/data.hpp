#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "fedpkd/error.hpp"
#include "fedpkd/rng.hpp"

namespace fedpkd {

// N labeled samples of dimension `dim`, stored row-major.
struct Dataset {
  std::string name;
  std::size_t class_count = 0;
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }

  std::span<const double> row(std::size_t i) const noexcept {
    return {features.data() + i * dim, dim};
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(class_count, 0);
    for (std::size_t y : labels) ++counts[y];
    return counts;
  }

  void validate() const {
    if (labels.empty()) throw InvalidArgument("dataset '" + name + "' is empty");
    if (features.size() != labels.size() * dim) {
      throw InvalidArgument("dataset '" + name + "' feature matrix is not N x d");
    }
    for (std::size_t y : labels) {
      if (y >= class_count) {
        throw InvalidArgument("dataset '" + name + "' label " + std::to_string(y) +
                              " >= class_count " + std::to_string(class_count));
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Isotropic Gaussian clusters, one per class.
struct SyntheticSpec {
  std::size_t class_count = 0;
  std::size_t dim = 0;
  std::size_t samples_per_class = 0;
  std::vector<std::vector<double>> class_means;  // class_count x dim
  double within_class_stddev = 1.0;
  std::uint64_t seed = 0;
  std::string name = "synthetic";

  void validate() const {
    if (class_count == 0 || dim == 0) throw InvalidArgument("synthetic: empty class/dim");
    if (samples_per_class < 1) throw InvalidArgument("synthetic: samples_per_class must be >= 1");
    if (!(within_class_stddev > 0.0)) throw InvalidArgument("synthetic: stddev must be > 0");
    if (class_means.size() != class_count) {
      throw InvalidArgument("synthetic: class_means must have class_count rows");
    }
    for (const auto& m : class_means) {
      if (m.size() != dim) throw InvalidArgument("synthetic: class mean length != dim");
    }
  }
};

// Samples are emitted class by class, n per class, in class order.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.name = spec.name;
  ds.class_count = spec.class_count;
  ds.dim = spec.dim;
  ds.features.reserve(spec.class_count * spec.samples_per_class * spec.dim);
  ds.labels.reserve(spec.class_count * spec.samples_per_class);
  Rng rng(derive_seed(spec.seed, {stream::kData}));
  for (std::size_t c = 0; c < spec.class_count; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      for (std::size_t k = 0; k < spec.dim; ++k) {
        ds.features.push_back(spec.class_means[c][k] + spec.within_class_stddev * rng.normal());
      }
      ds.labels.push_back(c);
    }
  }
  return ds;
}

// Geometry of the default "confusable clusters" benchmark (in units of the
// within-class stddev). Classes 0, 2, 4, 6 share the first two axes: 6 sits at
// the origin and 0, 2, 4 on a circle of radius `spacing` around it, with 2 and
// 4 also `spacing` apart. This plants the overlapping weak groups {0,6} and
// {2,4,6}. Every other class sits `separation` out along its own axis.
inline std::vector<std::vector<double>> confusable_cluster_means(std::size_t class_count,
                                                                 std::size_t dim,
                                                                 double spacing,
                                                                 double separation) {
  if (class_count < 7) throw InvalidArgument("benchmark geometry needs >= 7 classes");
  const std::size_t outer = class_count - 4;
  if (dim < 2 + outer) {
    throw InvalidArgument("benchmark geometry needs dim >= " + std::to_string(2 + outer));
  }
  std::vector<std::vector<double>> means(class_count, std::vector<double>(dim, 0.0));
  // 2 and 4 at +-30 degrees from the negative first axis: |2-4| = spacing.
  const double c30 = std::sqrt(3.0) / 2.0;
  means[0][0] = spacing;
  means[2][0] = -spacing * c30;
  means[2][1] = spacing * 0.5;
  means[4][0] = -spacing * c30;
  means[4][1] = -spacing * 0.5;
  std::size_t axis = 2;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (c == 0 || c == 2 || c == 4 || c == 6) continue;
    means[c][axis++] = separation;
  }
  return means;
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

struct BenchmarkSpec {
  std::size_t class_count = 10;
  std::size_t dim = 16;
  std::size_t train_per_class = 300;
  std::size_t test_per_class = 100;
  double stddev = 1.0;
  double group_spacing = 1.2;
  double separation = 8.0;
  std::uint64_t seed = 0;
};

inline TrainTest make_benchmark(const BenchmarkSpec& b) {
  SyntheticSpec s;
  s.class_count = b.class_count;
  s.dim = b.dim;
  s.within_class_stddev = b.stddev;
  s.class_means = confusable_cluster_means(b.class_count, b.dim, b.group_spacing * b.stddev,
                                           b.separation * b.stddev);
  s.samples_per_class = b.train_per_class;
  s.seed = derive_seed(b.seed, {0});
  s.name = "confusable-train";
  TrainTest out;
  out.train = generate_synthetic(s);
  s.samples_per_class = b.test_per_class;
  s.seed = derive_seed(b.seed, {1});
  s.name = "confusable-test";
  out.test = generate_synthetic(s);
  return out;
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                               const std::string& path) {
  if (offset + 4 > buf.size()) throw ParseError(path, offset, "truncated header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v >> 24));
  buf.push_back(static_cast<unsigned char>(v >> 16));
  buf.push_back(static_cast<unsigned char>(v >> 8));
  buf.push_back(static_cast<unsigned char>(v));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Reads an IDX3 unsigned-byte image file and its IDX1 label file. Pixels are
// scaled to [0, 1]; class_count is max label + 1.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const std::string ipath = images_path.string();
  const std::string lpath = labels_path.string();
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);

  if (const auto magic = detail::read_be32(images, 0, ipath); magic != kIdxImageMagic) {
    throw ParseError(ipath, 0, "bad image magic " + std::to_string(magic));
  }
  const std::uint32_t n_images = detail::read_be32(images, 4, ipath);
  const std::uint32_t rows = detail::read_be32(images, 8, ipath);
  const std::uint32_t cols = detail::read_be32(images, 12, ipath);
  if (const auto magic = detail::read_be32(labels, 0, lpath); magic != kIdxLabelMagic) {
    throw ParseError(lpath, 0, "bad label magic " + std::to_string(magic));
  }
  const std::uint32_t n_labels = detail::read_be32(labels, 4, lpath);
  if (n_labels != n_images) {
    throw ParseError(lpath, 4, "count mismatch: " + std::to_string(n_labels) + " labels vs " +
                                   std::to_string(n_images) + " images");
  }
  if (n_images == 0 || rows == 0 || cols == 0) throw ParseError(ipath, 4, "empty image file");

  const std::size_t d = std::size_t{rows} * cols;
  const std::size_t image_bytes = 16 + std::size_t{n_images} * d;
  if (images.size() < image_bytes) {
    throw ParseError(ipath, images.size(),
                     "truncated payload, expected " + std::to_string(image_bytes) + " bytes");
  }
  if (labels.size() < 8 + std::size_t{n_labels}) {
    throw ParseError(lpath, labels.size(),
                     "truncated payload, expected " + std::to_string(8 + n_labels) + " bytes");
  }

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.dim = d;
  ds.features.resize(std::size_t{n_images} * d);
  for (std::size_t i = 0; i < ds.features.size(); ++i) {
    ds.features[i] = static_cast<double>(images[16 + i]) / 255.0;
  }
  ds.labels.resize(n_labels);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n_labels; ++i) {
    ds.labels[i] = labels[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = max_label + 1;
  return ds;
}

// Writes an IDX image/label pair. Features must already be in [0, 1]; they
// are quantized to round(255 * x).
inline void write_idx(const Dataset& ds, std::size_t rows, std::size_t cols,
                      const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (rows * cols != ds.dim) throw InvalidArgument("rows*cols must equal dataset dim");
  std::vector<unsigned char> img;
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  for (double x : ds.features) {
    img.push_back(static_cast<unsigned char>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)));
  }
  std::vector<unsigned char> lab;
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t y : ds.labels) {
    if (y > 255) throw InvalidArgument("IDX labels must fit in one byte");
    lab.push_back(static_cast<unsigned char>(y));
  }
  std::ofstream(images_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  std::ofstream(labels_path, std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
}

// Rows `indices` of ds, in the given order.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.name = ds.name;
  out.class_count = ds.class_count;
  out.dim = ds.dim;
  out.features.reserve(indices.size() * ds.dim);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw InvalidArgument("subset index out of range");
    const auto r = ds.row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// Position of each global class inside `group`, or npos for classes outside it.
inline constexpr std::size_t kNoClass = static_cast<std::size_t>(-1);

inline std::vector<std::size_t> group_index_map(std::span<const std::size_t> group,
                                                std::size_t class_count) {
  std::vector<std::size_t> map(class_count, kNoClass);
  for (std::size_t pos = 0; pos < group.size(); ++pos) {
    const std::size_t c = group[pos];
    if (c >= class_count) throw InvalidArgument("group class " + std::to_string(c) + " >= C");
    if (map[c] != kNoClass) throw InvalidArgument("group class " + std::to_string(c) + " repeated");
    map[c] = pos;
  }
  return map;
}

struct RemappedDataset {
  Dataset data;
  // source_index[i] is the row of the original dataset that became row i.
  std::vector<std::size_t> source_index;
};

// Keeps samples whose label is in `group` (original order) and relabels them
// to their position in the group.
inline RemappedDataset remap_labels_indexed(const Dataset& ds, std::span<const std::size_t> group) {
  if (group.empty()) throw InvalidArgument("remap_labels: empty group");
  const auto map = group_index_map(group, ds.class_count);
  RemappedDataset out;
  out.data.name = ds.name;
  out.data.class_count = group.size();
  out.data.dim = ds.dim;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t pos = map[ds.labels[i]];
    if (pos == kNoClass) continue;
    const auto r = ds.row(i);
    out.data.features.insert(out.data.features.end(), r.begin(), r.end());
    out.data.labels.push_back(pos);
    out.source_index.push_back(i);
  }
  return out;
}

inline Dataset remap_labels(const Dataset& ds, std::span<const std::size_t> group) {
  return remap_labels_indexed(ds, group).data;
}

}  // namespace fedpkd
