#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <unistd.h>

#include "curvlab/data.hpp"
#include "curvlab/errors.hpp"

using namespace curvlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("curvlab_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_raw(const fs::path& file, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(file, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_raw(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

IdxImages random_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  IdxImages img{count, rows, cols, {}};
  img.pixels.resize(std::size_t{count} * rows * cols);
  for (auto& px : img.pixels) px = static_cast<std::uint8_t>(rng() & 0xffU);
  return img;
}

std::vector<std::uint8_t> cycle_labels(std::size_t n) {
  std::vector<std::uint8_t> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = static_cast<std::uint8_t>(i % 10);
  return l;
}

void write_mnist_dir(const fs::path& dir, std::uint32_t n_train, std::uint32_t n_test) {
  write_idx_images(dir / "train-images-idx3-ubyte", random_images(n_train, 28, 28, 1));
  write_idx_labels(dir / "train-labels-idx1-ubyte", cycle_labels(n_train));
  write_idx_images(dir / "t10k-images-idx3-ubyte", random_images(n_test, 28, 28, 2));
  write_idx_labels(dir / "t10k-labels-idx1-ubyte", cycle_labels(n_test));
}

CifarRecords random_cifar(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  CifarRecords rec;
  rec.labels = cycle_labels(n);
  rec.pixels.resize(n * 3072);
  for (auto& px : rec.pixels) px = static_cast<std::uint8_t>(rng() & 0xffU);
  return rec;
}

}  // namespace

TEST_CASE("IDX images: header fields, big-endian layout and round trip") {
  TempDir tmp;
  const IdxImages img = random_images(3, 28, 28, 7);
  write_idx_images(tmp.path / "img", img);
  const auto bytes = read_raw(tmp.path / "img");
  REQUIRE(bytes.size() == 16 + 3 * 784);
  CHECK(bytes[0] == 0x00);
  CHECK(bytes[1] == 0x00);
  CHECK(bytes[2] == 0x08);
  CHECK(bytes[3] == 0x03);
  CHECK(bytes[7] == 3);
  CHECK(bytes[11] == 28);

  const IdxImages back = read_idx_images(tmp.path / "img");
  CHECK(back.count == 3);
  CHECK(back.rows == 28);
  CHECK(back.cols == 28);
  CHECK(back.pixels == img.pixels);

  write_idx_labels(tmp.path / "lab", {0, 9, 4});
  CHECK(read_idx_labels(tmp.path / "lab") == std::vector<std::uint8_t>{0, 9, 4});
}

TEST_CASE("IDX images: bad magic, truncation and trailing bytes") {
  TempDir tmp;
  auto bytes = std::vector<std::uint8_t>{0, 0, 8, 1, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28};
  bytes.resize(16 + 784, 0);
  write_raw(tmp.path / "bad_magic", bytes);
  CHECK_THROWS_AS(read_idx_images(tmp.path / "bad_magic"), BadMagic);

  bytes[3] = 3;
  write_raw(tmp.path / "ok", bytes);
  CHECK(read_idx_images(tmp.path / "ok").count == 1);

  auto short_bytes = bytes;
  short_bytes.pop_back();
  write_raw(tmp.path / "short", short_bytes);
  CHECK_THROWS_AS(read_idx_images(tmp.path / "short"), TruncatedFile);

  write_raw(tmp.path / "header_only", {0, 0, 8, 3, 0, 0});
  CHECK_THROWS_AS(read_idx_images(tmp.path / "header_only"), TruncatedFile);

  auto long_bytes = bytes;
  long_bytes.push_back(0);
  write_raw(tmp.path / "long", long_bytes);
  CHECK_THROWS_AS(read_idx_images(tmp.path / "long"), DimensionMismatch);

  write_raw(tmp.path / "labels_magic", {0, 0, 8, 3, 0, 0, 0, 0});
  CHECK_THROWS_AS(read_idx_labels(tmp.path / "labels_magic"), BadMagic);
  write_raw(tmp.path / "labels_short", {0, 0, 8, 1, 0, 0, 0, 2, 5});
  CHECK_THROWS_AS(read_idx_labels(tmp.path / "labels_short"), TruncatedFile);
  CHECK_THROWS_AS(read_idx_images(tmp.path / "missing"), Error);
}

TEST_CASE("MNIST loader validates geometry, counts and labels") {
  TempDir tmp;
  write_mnist_dir(tmp.path, 20, 10);
  const RawDataset raw = load_mnist(tmp.path);
  CHECK(raw.train.size() == 20);
  CHECK(raw.test.size() == 10);
  CHECK(raw.shape.size() == 784);
  CHECK(raw.train.labels[13] == 3);

  write_idx_labels(tmp.path / "train-labels-idx1-ubyte", cycle_labels(19));
  CHECK_THROWS_AS(load_mnist(tmp.path), DimensionMismatch);

  auto labels = cycle_labels(20);
  labels[5] = 10;
  write_idx_labels(tmp.path / "train-labels-idx1-ubyte", labels);
  CHECK_THROWS_AS(load_mnist(tmp.path), LabelOutOfRange);

  write_mnist_dir(tmp.path, 20, 10);
  write_idx_images(tmp.path / "t10k-images-idx3-ubyte", random_images(10, 27, 28, 3));
  CHECK_THROWS_AS(load_mnist(tmp.path), DimensionMismatch);
}

TEST_CASE("CIFAR batches: record layout, truncation and labels") {
  TempDir tmp;
  const CifarRecords rec = random_cifar(4, 11);
  write_cifar_batch(tmp.path / "b.bin", rec);
  const auto bytes = read_raw(tmp.path / "b.bin");
  REQUIRE(bytes.size() == 4 * 3073);
  CHECK(bytes[3073] == 1);
  CHECK(bytes[3074] == rec.pixels[3072]);

  const CifarRecords back = read_cifar_batch(tmp.path / "b.bin");
  CHECK(back.labels == rec.labels);
  CHECK(back.pixels == rec.pixels);

  auto truncated = bytes;
  truncated.pop_back();
  write_raw(tmp.path / "t.bin", truncated);
  CHECK_THROWS_AS(read_cifar_batch(tmp.path / "t.bin"), TruncatedFile);

  auto bad = bytes;
  bad[2 * 3073] = 10;
  write_raw(tmp.path / "l.bin", bad);
  CHECK_THROWS_AS(read_cifar_batch(tmp.path / "l.bin"), LabelOutOfRange);
}

TEST_CASE("CIFAR loader concatenates the five training batches") {
  TempDir tmp;
  const fs::path dir = tmp.path / "cifar-10-batches-bin";
  fs::create_directories(dir);
  for (int i = 1; i <= 5; ++i) {
    write_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), random_cifar(3, i));
  }
  write_cifar_batch(dir / "test_batch.bin", random_cifar(2, 9));
  const RawDataset raw = load_raw(DatasetName::CIFAR10_5k, tmp.path);
  CHECK(raw.train.size() == 15);
  CHECK(raw.test.size() == 2);
  CHECK(raw.shape.channels == 3);
  CHECK(raw.train.pixels.size() == 15 * 3072);
  CHECK(raw.train.pixels[3 * 3072] == random_cifar(3, 2).pixels[0]);
  CHECK_THROWS_AS(load_raw(DatasetName::MNIST5k, tmp.path), Error);
}

TEST_CASE("subsets: first-n selection, normalization and seeded sampling") {
  TempDir tmp;
  write_mnist_dir(tmp.path, 50, 10);
  const RawDataset raw = load_raw(DatasetName::MNIST5k, tmp.path);

  const Dataset first = make_subset(raw, DatasetName::MNIST5k, 30);
  CHECK(first.train.size() == 30);
  CHECK(first.test.size() == 10);
  CHECK(first.source_indices.front() == 0);
  CHECK(first.source_indices.back() == 29);
  CHECK(first.train.inputs.mean() == doctest::Approx(0.0).epsilon(1e-12));
  const double var = first.train.inputs.array().square().mean();
  CHECK(var == doctest::Approx(1.0).epsilon(1e-12));

  const Eigen::MatrixXd unit = denormalize(first, first.train.inputs);
  CHECK(unit(0, 0) == doctest::Approx(raw.train.pixels[0] / 255.0).epsilon(1e-12));
  CHECK(unit(5, 7) == doctest::Approx(raw.train.pixels[7 * 784 + 5] / 255.0).epsilon(1e-12));

  const Dataset a = make_subset(raw, DatasetName::MNIST5k, 30, 42);
  const Dataset b = make_subset(raw, DatasetName::MNIST5k, 30, 42);
  CHECK(a.source_indices == b.source_indices);
  CHECK(std::set<int>(a.source_indices.begin(), a.source_indices.end()).size() == 30);
  CHECK(a.train.inputs == b.train.inputs);
  CHECK(a.source_indices != first.source_indices);

  CHECK_THROWS_AS(make_subset(raw, DatasetName::MNIST5k, 51), InsufficientData);
}

TEST_CASE("CIFAR normalization is per channel") {
  RawDataset raw;
  raw.shape = {3, 2, 2};
  std::mt19937_64 rng(5);
  for (int n = 0; n < 8; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 4; ++i) raw.train.pixels.push_back(static_cast<std::uint8_t>(40 * c + rng() % 60));
    }
    raw.train.labels.push_back(n % 10);
  }
  raw.test = raw.train;
  const Dataset ds = make_subset(raw, DatasetName::CIFAR10_5k, 8);
  REQUIRE(ds.normalization.mean.size() == 3);
  for (int c = 0; c < 3; ++c) {
    const auto block = ds.train.inputs.middleRows(4 * c, 4);
    CHECK(block.mean() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(block.array().square().mean() == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(ds.normalization.mean[2] > ds.normalization.mean[0]);
}

TEST_CASE("holdout sampling") {
  TempDir tmp;
  write_mnist_dir(tmp.path, 40, 5);
  const Dataset ds = make_subset(load_mnist(tmp.path), DatasetName::MNIST5k, 40);

  const HoldoutSet h1 = sample_holdout(ds, 12, 3);
  const HoldoutSet h2 = sample_holdout(ds, 12, 3);
  CHECK(h1.indices == h2.indices);
  CHECK(h1.id == h2.id);
  CHECK(std::set<int>(h1.indices.begin(), h1.indices.end()).size() == 12);
  CHECK(h1.batch.size() == 12);
  CHECK(h1.batch.inputs.col(4) == ds.train.inputs.col(h1.indices[4]));
  CHECK(h1.batch.labels[4] == ds.train.labels[h1.indices[4]]);
  CHECK(sample_holdout(ds, 12, 4).indices != h1.indices);

  const HoldoutSet all = sample_holdout(ds, 40, 9);
  std::vector<int> expect(40);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(all.indices == expect);

  CHECK_THROWS_AS(sample_holdout(ds, 0, 1), InvalidSize);
  CHECK_THROWS_AS(sample_holdout(ds, 41, 1), InvalidSize);
}

TEST_CASE("minibatch streams") {
  const auto epoch = batches(5000, 50, 17);
  REQUIRE(epoch.size() == 100);
  std::vector<int> seen;
  for (const auto& b : epoch) {
    CHECK(b.size() == 50);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  std::sort(seen.begin(), seen.end());
  std::vector<int> expect(5000);
  std::iota(expect.begin(), expect.end(), 0);
  CHECK(seen == expect);

  CHECK(batches(5000, 50, 17) == epoch);
  CHECK(batches(5000, 50, 18) != epoch);

  const auto ragged = batches(7, 3, 1);
  REQUIRE(ragged.size() == 3);
  CHECK(ragged.back().size() == 1);
  CHECK_THROWS_AS(batches(7, 0, 1), ConfigError);
}

TEST_CASE("permutation draws are close to uniform") {
  // Position of element 0 over many seeds; chi-square against uniform on 5 cells.
  std::vector<int> counts(5, 0);
  const int trials = 20000;
  for (int s = 0; s < trials; ++s) {
    const auto p = permutation(5, static_cast<std::uint64_t>(s) + 1);
    counts[std::find(p.begin(), p.end(), 0) - p.begin()]++;
  }
  double chi2 = 0.0;
  for (int c : counts) {
    const double e = trials / 5.0;
    chi2 += (c - e) * (c - e) / e;
  }
  CHECK(chi2 < 18.47);  // 0.999 quantile, 4 degrees of freedom
}

TEST_CASE("dataset names") {
  CHECK(parse_dataset("mnist5k") == DatasetName::MNIST5k);
  CHECK(parse_dataset("cifar10_5k") == DatasetName::CIFAR10_5k);
  CHECK(to_string(DatasetName::CIFAR10_5k) == "cifar10_5k");
  CHECK_THROWS_AS(parse_dataset("svhn"), ConfigError);
}
