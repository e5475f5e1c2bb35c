#include "curvlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "curvlab/errors.hpp"
#include "curvlab/seeding.hpp"

namespace curvlab {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error("cannot open " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& file, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24U) | (std::uint32_t{b[at + 1]} << 16U) |
         (std::uint32_t{b[at + 2]} << 8U) | std::uint32_t{b[at + 3]};
}

void append_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24U));
  b.push_back(static_cast<std::uint8_t>(v >> 16U));
  b.push_back(static_cast<std::uint8_t>(v >> 8U));
  b.push_back(static_cast<std::uint8_t>(v));
}

void check_magic(std::uint32_t got, std::uint32_t want, const fs::path& file) {
  if (got != want) {
    throw BadMagic(file.string() + ": magic " + std::to_string(got) + ", expected " +
                   std::to_string(want));
  }
}

void check_length(std::size_t have, std::size_t need, const fs::path& file) {
  if (have < need) {
    throw TruncatedFile(file.string() + ": " + std::to_string(have) + " bytes, header implies " +
                        std::to_string(need));
  }
  if (have > need) {
    throw DimensionMismatch(file.string() + ": " + std::to_string(have - need) +
                            " trailing bytes beyond the declared dimensions");
  }
}

std::vector<int> to_labels(const std::vector<std::uint8_t>& bytes, const fs::path& file) {
  std::vector<int> out(bytes.begin(), bytes.end());
  for (int l : out) {
    if (l >= 10) throw LabelOutOfRange(file.string() + ": label " + std::to_string(l));
  }
  return out;
}

RawSplit mnist_split(const fs::path& images_file, const fs::path& labels_file) {
  IdxImages images = read_idx_images(images_file);
  if (images.rows != 28 || images.cols != 28) {
    throw DimensionMismatch(images_file.string() + ": expected 28x28 images, got " +
                            std::to_string(images.rows) + "x" + std::to_string(images.cols));
  }
  const std::vector<std::uint8_t> labels = read_idx_labels(labels_file);
  if (labels.size() != images.count) {
    throw DimensionMismatch("MNIST image/label counts differ (" + std::to_string(images.count) +
                            " vs " + std::to_string(labels.size()) + ")");
  }
  return {std::move(images.pixels), to_labels(labels, labels_file)};
}

void append_cifar(RawSplit& split, const fs::path& file) {
  CifarRecords rec = read_cifar_batch(file);
  split.pixels.insert(split.pixels.end(), rec.pixels.begin(), rec.pixels.end());
  split.labels.insert(split.labels.end(), rec.labels.begin(), rec.labels.end());
}

// Pixels of the selected examples scaled to [0, 1], one example per column.
Eigen::MatrixXd to_unit_columns(const RawSplit& split, int dim, const std::vector<int>& which) {
  Eigen::MatrixXd m(dim, static_cast<Eigen::Index>(which.size()));
  for (std::size_t j = 0; j < which.size(); ++j) {
    const std::uint8_t* src = split.pixels.data() + static_cast<std::size_t>(which[j]) * dim;
    for (int i = 0; i < dim; ++i) m(i, static_cast<Eigen::Index>(j)) = src[i] / 255.0;
  }
  return m;
}

std::vector<int> iota(int n) {
  std::vector<int> v(n);
  for (int i = 0; i < n; ++i) v[i] = i;
  return v;
}

Normalization fit_normalization(const Eigen::MatrixXd& x, int channels) {
  Normalization norm;
  const Eigen::Index per_channel = x.rows() / channels;
  for (int c = 0; c < channels; ++c) {
    const auto block = x.middleRows(c * per_channel, per_channel);
    const double mean = block.mean();
    const double var = (block.array() - mean).square().mean();
    norm.mean.push_back(mean);
    norm.stddev.push_back(var > 0.0 ? std::sqrt(var) : 1.0);
  }
  return norm;
}

void apply_normalization(const Normalization& norm, Eigen::MatrixXd& x) {
  const auto channels = static_cast<Eigen::Index>(norm.mean.size());
  const Eigen::Index per_channel = x.rows() / channels;
  for (Eigen::Index c = 0; c < channels; ++c) {
    auto block = x.middleRows(c * per_channel, per_channel);
    block.array() = (block.array() - norm.mean[c]) / norm.stddev[c];
  }
}

}  // namespace

IdxImages read_idx_images(const fs::path& file) {
  const std::vector<std::uint8_t> b = read_bytes(file);
  if (b.size() < 16) throw TruncatedFile(file.string() + ": shorter than the IDX image header");
  check_magic(read_be32(b, 0), kIdxImageMagic, file);
  IdxImages img;
  img.count = read_be32(b, 4);
  img.rows = read_be32(b, 8);
  img.cols = read_be32(b, 12);
  const std::size_t n = std::size_t{img.count} * img.rows * img.cols;
  check_length(b.size(), 16 + n, file);
  img.pixels.assign(b.begin() + 16, b.end());
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const fs::path& file) {
  const std::vector<std::uint8_t> b = read_bytes(file);
  if (b.size() < 8) throw TruncatedFile(file.string() + ": shorter than the IDX label header");
  check_magic(read_be32(b, 0), kIdxLabelMagic, file);
  const std::uint32_t count = read_be32(b, 4);
  check_length(b.size(), 8 + std::size_t{count}, file);
  return {b.begin() + 8, b.end()};
}

void write_idx_images(const fs::path& file, const IdxImages& images) {
  std::vector<std::uint8_t> b;
  b.reserve(16 + images.pixels.size());
  append_be32(b, kIdxImageMagic);
  append_be32(b, images.count);
  append_be32(b, images.rows);
  append_be32(b, images.cols);
  b.insert(b.end(), images.pixels.begin(), images.pixels.end());
  write_bytes(file, b);
}

void write_idx_labels(const fs::path& file, const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  append_be32(b, kIdxLabelMagic);
  append_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  write_bytes(file, b);
}

CifarRecords read_cifar_batch(const fs::path& file) {
  const std::vector<std::uint8_t> b = read_bytes(file);
  if (b.empty() || b.size() % kCifarRecordBytes != 0) {
    throw TruncatedFile(file.string() + ": " + std::to_string(b.size()) +
                        " bytes is not a whole number of 3073-byte records");
  }
  const std::size_t n = b.size() / kCifarRecordBytes;
  CifarRecords rec;
  rec.labels.reserve(n);
  rec.pixels.reserve(n * (kCifarRecordBytes - 1));
  for (std::size_t r = 0; r < n; ++r) {
    const auto* row = b.data() + r * kCifarRecordBytes;
    if (row[0] >= 10) {
      throw LabelOutOfRange(file.string() + ": record " + std::to_string(r) + " has label " +
                            std::to_string(row[0]));
    }
    rec.labels.push_back(row[0]);
    rec.pixels.insert(rec.pixels.end(), row + 1, row + kCifarRecordBytes);
  }
  return rec;
}

void write_cifar_batch(const fs::path& file, const CifarRecords& records) {
  std::vector<std::uint8_t> b;
  b.reserve(records.labels.size() * kCifarRecordBytes);
  for (std::size_t r = 0; r < records.labels.size(); ++r) {
    b.push_back(records.labels[r]);
    const auto* px = records.pixels.data() + r * (kCifarRecordBytes - 1);
    b.insert(b.end(), px, px + kCifarRecordBytes - 1);
  }
  write_bytes(file, b);
}

RawDataset load_mnist(const fs::path& dir) {
  RawDataset raw;
  raw.shape = {1, 28, 28};
  raw.train = mnist_split(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  raw.test = mnist_split(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  return raw;
}

RawDataset load_cifar10(const fs::path& dir) {
  RawDataset raw;
  raw.shape = {3, 32, 32};
  for (int i = 1; i <= 5; ++i) append_cifar(raw.train, dir / ("data_batch_" + std::to_string(i) + ".bin"));
  append_cifar(raw.test, dir / "test_batch.bin");
  return raw;
}

RawDataset load_raw(DatasetName name, const fs::path& data_dir) {
  if (name == DatasetName::MNIST5k) {
    for (const fs::path& d : {data_dir, data_dir / "mnist"}) {
      if (fs::exists(d / "train-images-idx3-ubyte")) return load_mnist(d);
    }
    throw Error("no MNIST IDX files under " + data_dir.string());
  }
  for (const fs::path& d : {data_dir, data_dir / "cifar-10-batches-bin", data_dir / "cifar10"}) {
    if (fs::exists(d / "data_batch_1.bin")) return load_cifar10(d);
  }
  throw Error("no CIFAR-10 binary batches under " + data_dir.string());
}

std::string to_string(DatasetName name) {
  return name == DatasetName::MNIST5k ? "mnist5k" : "cifar10_5k";
}

DatasetName parse_dataset(const std::string& s) {
  if (s == "mnist5k" || s == "mnist") return DatasetName::MNIST5k;
  if (s == "cifar10_5k" || s == "cifar10" || s == "cifar") return DatasetName::CIFAR10_5k;
  throw ConfigError("unknown dataset '" + s + "'");
}

Dataset make_subset(const RawDataset& raw, DatasetName name, int n, std::uint64_t seed) {
  if (n < 1 || n > raw.train.size()) {
    throw InsufficientData("requested " + std::to_string(n) + " examples, raw train has " +
                           std::to_string(raw.train.size()));
  }
  Dataset ds;
  ds.name = name;
  ds.shape = raw.shape;
  ds.subset_seed = seed;
  if (seed == 0) {
    ds.source_indices = iota(n);
  } else {
    std::vector<int> perm = permutation(raw.train.size(), derive_seed({seed, 0x5ULL}));
    perm.resize(n);
    std::sort(perm.begin(), perm.end());
    ds.source_indices = std::move(perm);
  }
  const int dim = raw.shape.size();
  ds.train.inputs = to_unit_columns(raw.train, dim, ds.source_indices);
  for (int idx : ds.source_indices) ds.train.labels.push_back(raw.train.labels[idx]);
  ds.test.inputs = to_unit_columns(raw.test, dim, iota(raw.test.size()));
  ds.test.labels = raw.test.labels;

  const int channels = name == DatasetName::MNIST5k ? 1 : raw.shape.channels;
  ds.normalization = fit_normalization(ds.train.inputs, channels);
  apply_normalization(ds.normalization, ds.train.inputs);
  apply_normalization(ds.normalization, ds.test.inputs);
  return ds;
}

Eigen::MatrixXd denormalize(const Dataset& ds, const Eigen::MatrixXd& inputs) {
  Eigen::MatrixXd x = inputs;
  const auto channels = static_cast<Eigen::Index>(ds.normalization.mean.size());
  const Eigen::Index per_channel = x.rows() / channels;
  for (Eigen::Index c = 0; c < channels; ++c) {
    auto block = x.middleRows(c * per_channel, per_channel);
    block.array() = block.array() * ds.normalization.stddev[c] + ds.normalization.mean[c];
  }
  return x;
}

HoldoutSet sample_holdout(const Dataset& ds, int l, std::uint64_t seed) {
  const int n = ds.train.size();
  if (l < 1 || l > n) {
    throw InvalidSize("holdout size " + std::to_string(l) + " outside [1, " + std::to_string(n) +
                      "]");
  }
  HoldoutSet h;
  if (l == n) {
    h.indices = iota(n);
  } else {
    h.indices = permutation(n, derive_seed({seed, 0x401dULL}));
    h.indices.resize(l);
  }
  h.batch = gather(ds.train, h.indices);
  h.id = "l=" + std::to_string(l) + ",seed=" + std::to_string(seed);
  return h;
}

Batch gather(const Batch& source, const std::vector<int>& indices) {
  Batch b;
  b.inputs.resize(source.inputs.rows(), static_cast<Eigen::Index>(indices.size()));
  b.labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    b.inputs.col(static_cast<Eigen::Index>(j)) = source.inputs.col(indices[j]);
    b.labels.push_back(source.labels[indices[j]]);
  }
  return b;
}

std::vector<int> permutation(int n, std::uint64_t seed) {
  std::vector<int> perm = iota(n);
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    // Multiply-shift bounded draw; deterministic across standard libraries.
    const auto bound = static_cast<unsigned __int128>(i + 1);
    const auto j = static_cast<int>((static_cast<unsigned __int128>(rng()) * bound) >> 64U);
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

std::vector<std::vector<int>> batches(int n, int batch_size, std::uint64_t epoch_seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const std::vector<int> perm = permutation(n, epoch_seed);
  std::vector<std::vector<int>> out;
  for (int first = 0; first < n; first += batch_size) {
    const int last = std::min(n, first + batch_size);
    out.emplace_back(perm.begin() + first, perm.begin() + last);
  }
  return out;
}

}  // namespace curvlab
