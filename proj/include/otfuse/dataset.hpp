#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "otfuse/error.hpp"
#include "otfuse/model.hpp"
#include "otfuse/rng.hpp"
#include "otfuse/types.hpp"

namespace otfuse {

/// Labelled samples, one per row, features in [0, 1].
struct Dataset {
  Matrix features;
  std::vector<Index> labels;
  Index class_count = 0;
  FeatureShape shape{1, 1, 1};

  Index size() const noexcept { return features.rows(); }
  Index dim() const noexcept { return features.cols(); }

  void validate() const {
    if (features.rows() < 1) throw DomainError("dataset is empty");
    if (static_cast<Index>(labels.size()) != features.rows())
      throw ShapeError("dataset has " + std::to_string(features.rows()) + " rows but " +
                       std::to_string(labels.size()) + " labels");
    if (shape.size() != features.cols())
      throw ShapeError("dataset shape " + std::to_string(shape.channels) + "x" + std::to_string(shape.height) + "x" +
                       std::to_string(shape.width) + " does not match " + std::to_string(features.cols()) +
                       " features");
    for (Index y : labels)
      if (y < 0 || y >= class_count)
        throw DomainError("label " + std::to_string(y) + " outside [0, " + std::to_string(class_count) + ")");
  }
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Rows of `data` at `indices`, in the given order.
inline Dataset take(const Dataset& data, const std::vector<Index>& indices) {
  Dataset out;
  out.class_count = data.class_count;
  out.shape = data.shape;
  out.features.resize(static_cast<Index>(indices.size()), data.dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Index i = indices[r];
    if (i < 0 || i >= data.size()) throw ShapeError("take: index " + std::to_string(i) + " out of range");
    out.features.row(static_cast<Index>(r)) = data.features.row(i);
    out.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// First `n` rows.
inline Dataset head(const Dataset& data, Index n) {
  std::vector<Index> idx(static_cast<std::size_t>(std::min(n, data.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Index>(i);
  return take(data, idx);
}

/// A seeded random subset of `n` rows, kept in original order.
inline Dataset subsample(const Dataset& data, Index n, std::uint64_t seed) {
  if (n >= data.size()) return data;
  const auto perm = random_permutation(static_cast<std::size_t>(data.size()), seed, 0x5ab5);
  std::vector<Index> idx(perm.begin(), perm.begin() + n);
  std::sort(idx.begin(), idx.end());
  return take(data, idx);
}

/// The first `m` rows of a seeded shuffle, used as the fusion sample batch.
inline Matrix sample_batch(const Dataset& data, Index m, std::uint64_t seed) {
  if (m < 1) throw DomainError("sample batch size must be positive");
  const auto perm = random_permutation(static_cast<std::size_t>(data.size()), seed, 0xba7c);
  const Index k = std::min(m, data.size());
  Matrix out(k, data.dim());
  for (Index r = 0; r < k; ++r) out.row(r) = data.features.row(static_cast<Index>(perm[static_cast<std::size_t>(r)]));
  return out;
}

struct SplitSpec {
  std::optional<Index> special_label;
  double receiver_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// Receiver A gets every special-label sample and a seeded
/// `receiver_fraction` of the rest; donor B gets the remainder.
inline std::pair<Dataset, Dataset> split_heterogeneous(const Dataset& data, const SplitSpec& spec) {
  if (!(spec.receiver_fraction > 0.0 && spec.receiver_fraction < 1.0))
    throw DomainError("receiver fraction must lie in (0, 1), got " + std::to_string(spec.receiver_fraction));
  std::vector<Index> a, rest;
  for (Index i = 0; i < data.size(); ++i) {
    if (spec.special_label && data.labels[static_cast<std::size_t>(i)] == *spec.special_label)
      a.push_back(i);
    else
      rest.push_back(i);
  }
  if (spec.special_label && a.empty())
    throw DomainError("special label " + std::to_string(*spec.special_label) + " does not occur in the data");
  const auto perm = random_permutation(rest.size(), spec.seed, 0x5b17);
  const auto to_a = static_cast<std::size_t>(std::llround(spec.receiver_fraction * static_cast<double>(rest.size())));
  std::vector<Index> b;
  for (std::size_t r = 0; r < perm.size(); ++r) (r < to_a ? a : b).push_back(rest[perm[r]]);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.empty() || b.empty()) throw DomainError("heterogeneous split leaves an empty side");
  return {take(data, a), take(data, b)};
}

namespace detail {

inline std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

/// Whole file contents; gzip input is inflated transparently.
inline std::vector<unsigned char> read_maybe_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw Error("cannot open " + path);
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  for (;;) {
    const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      gzclose(f);
      throw Error("read error in " + path);
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

}  // namespace detail

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_maybe_gz(images_path);
  const auto lab = detail::read_maybe_gz(labels_path);
  if (img.size() < 16 || detail::read_be32(img.data()) != 0x803)
    throw DomainError(images_path + ": not an IDX image file (bad magic)");
  if (lab.size() < 8 || detail::read_be32(lab.data()) != 0x801)
    throw DomainError(labels_path + ": not an IDX label file (bad magic)");
  const Index n = detail::read_be32(img.data() + 4);
  const Index h = detail::read_be32(img.data() + 8);
  const Index w = detail::read_be32(img.data() + 12);
  if (static_cast<Index>(img.size()) - 16 < n * h * w) throw ShapeError(images_path + ": truncated pixel data");
  if (static_cast<Index>(detail::read_be32(lab.data() + 4)) != n)
    throw ShapeError(labels_path + ": label count does not match image count");
  if (static_cast<Index>(lab.size()) - 8 < n) throw ShapeError(labels_path + ": truncated label data");
  Dataset d;
  d.shape = {1, h, w};
  d.features.resize(n, h * w);
  for (Index i = 0; i < n * h * w; ++i) d.features.data()[i] = img[static_cast<std::size_t>(16 + i)] / 255.0;
  d.labels.resize(static_cast<std::size_t>(n));
  Index classes = 0;
  for (Index i = 0; i < n; ++i) {
    d.labels[static_cast<std::size_t>(i)] = lab[static_cast<std::size_t>(8 + i)];
    classes = std::max(classes, d.labels[static_cast<std::size_t>(i)] + 1);
  }
  d.class_count = std::max<Index>(classes, 10);
  d.validate();
  return d;
}

/// CSV with the label in the first column; features are multiplied by `scale`.
inline Dataset load_csv(const std::string& path, double scale = 1.0, Index class_count = 0) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::vector<Index> labels;
  std::string line;
  Index lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<double> vals;
    while (std::getline(ss, field, ',')) {
      char* end = nullptr;
      const double v = std::strtod(field.c_str(), &end);
      if (end == field.c_str()) {
        if (lineno == 1 && rows.empty()) break;  // header
        throw DomainError(path + ":" + std::to_string(lineno) + ": non-numeric field '" + field + "'");
      }
      vals.push_back(v);
    }
    if (vals.empty()) continue;
    if (vals.size() < 2) throw ShapeError(path + ":" + std::to_string(lineno) + ": need a label and features");
    if (!rows.empty() && vals.size() - 1 != rows.front().size())
      throw ShapeError(path + ":" + std::to_string(lineno) + ": ragged row");
    const double y = vals.front();
    if (y < 0 || y != std::floor(y)) throw DomainError(path + ":" + std::to_string(lineno) + ": bad label");
    labels.push_back(static_cast<Index>(y));
    rows.emplace_back(vals.begin() + 1, vals.end());
  }
  if (rows.empty()) throw DomainError(path + ": no samples");
  Dataset d;
  const auto dim = static_cast<Index>(rows.front().size());
  d.shape = {1, 1, dim};
  d.features.resize(static_cast<Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Index c = 0; c < dim; ++c) d.features(static_cast<Index>(r), c) = scale * rows[r][static_cast<std::size_t>(c)];
  d.labels = std::move(labels);
  d.class_count = class_count > 0 ? class_count : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.validate();
  return d;
}

/// Deterministic stand-in for a digit dataset: each class is a mixture of
/// Gaussian blobs in a small latent space, pushed through a fixed random
/// two-layer map into [0, 1]^(side*side).
struct SyntheticSpec {
  Index train_size = 60000;
  Index test_size = 4000;
  Index classes = 10;
  Index side = 14;
  Index latent = 24;
  Index modes = 3;
  double spread = 1.5;
  double noise = 0.9;
  double contrast = 6.0;
  double offset = -2.0;
  std::uint64_t seed = 2024;
};

inline DataSplit synthetic_dataset(const SyntheticSpec& spec = {}) {
  if (spec.train_size < 1 || spec.test_size < 1 || spec.classes < 2 || spec.side < 1 || spec.latent < 1 ||
      spec.modes < 1)
    throw DomainError("synthetic dataset sizes must be positive");
  const Index d = spec.side * spec.side, hidden = 2 * spec.latent + 8;
  CounterRng g(spec.seed, 1);
  Matrix centers(spec.classes * spec.modes, spec.latent);
  for (Index i = 0; i < centers.size(); ++i) centers.data()[i] = spec.spread * g.normal();
  Matrix a1(hidden, spec.latent), a2(d, hidden);
  for (Index i = 0; i < a1.size(); ++i) a1.data()[i] = g.normal() / std::sqrt(static_cast<double>(spec.latent));
  for (Index i = 0; i < a2.size(); ++i) a2.data()[i] = spec.contrast * g.normal() / std::sqrt(static_cast<double>(hidden));

  auto make = [&](Index n, std::uint64_t stream) {
    Dataset out;
    out.class_count = spec.classes;
    out.shape = {1, spec.side, spec.side};
    out.features.resize(n, d);
    out.labels.resize(static_cast<std::size_t>(n));
    Vector z(spec.latent);
    for (Index i = 0; i < n; ++i) {
      CounterRng r(spec.seed ^ (stream << 40), static_cast<std::uint64_t>(i));
      const Index y = static_cast<Index>(r.below(static_cast<std::uint64_t>(spec.classes)));
      const Index mode = static_cast<Index>(r.below(static_cast<std::uint64_t>(spec.modes)));
      for (Index k = 0; k < spec.latent; ++k) z(k) = centers(y * spec.modes + mode, k) + spec.noise * r.normal();
      const Vector h = (a1 * z).array().tanh().matrix();
      const Vector x = (a2 * h).array() + spec.offset;
      for (Index k = 0; k < d; ++k) out.features(i, k) = 1.0 / (1.0 + std::exp(-x(k)));
      out.labels[static_cast<std::size_t>(i)] = y;
    }
    return out;
  };
  return {make(spec.train_size, 2), make(spec.test_size, 3)};
}

namespace detail {

inline std::optional<std::string> find_file(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (std::filesystem::exists(dir / n)) return (dir / n).string();
    if (std::filesystem::exists(dir / (n + ".gz"))) return (dir / (n + ".gz")).string();
  }
  return std::nullopt;
}

}  // namespace detail

/// Loads a dataset from `source`:
///   "synthetic"      the built-in generator
///   a directory      MNIST IDX files, or train.csv and test.csv (pixel scale 1/255)
///   empty            $OTFUSE_DATA_DIR if set, otherwise synthetic
inline DataSplit load_data(std::string source, const SyntheticSpec& synthetic = {}) {
  if (source.empty()) {
    const char* env = std::getenv("OTFUSE_DATA_DIR");
    source = env && *env ? env : "synthetic";
  }
  if (source == "synthetic") return synthetic_dataset(synthetic);
  const std::filesystem::path dir(source);
  if (!std::filesystem::is_directory(dir)) throw Error("data source '" + source + "' is not a directory");
  const auto ti = detail::find_file(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  const auto tl = detail::find_file(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  const auto vi = detail::find_file(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  const auto vl = detail::find_file(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
  if (ti && tl && vi && vl) return {load_idx(*ti, *tl), load_idx(*vi, *vl)};
  if (std::filesystem::exists(dir / "train.csv") && std::filesystem::exists(dir / "test.csv")) {
    DataSplit s{load_csv((dir / "train.csv").string(), 1.0 / 255.0), load_csv((dir / "test.csv").string(), 1.0 / 255.0)};
    const Index c = std::max(s.train.class_count, s.test.class_count);
    s.train.class_count = s.test.class_count = c;
    return s;
  }
  throw Error("no IDX or CSV dataset found in '" + source + "'");
}

}  // namespace otfuse
