#pragma once

// MNIST (IDX) and CIFAR-10 (binary) readers, 5k subsets, Hessian holdout
// sampling and seeded minibatch order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "curvlab/models.hpp"

namespace curvlab {

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;
inline constexpr int kCifarRecordBytes = 3073;
inline constexpr int kCifarRecordsPerBatch = 10000;

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
};

IdxImages read_idx_images(const std::filesystem::path& file);
std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& file);
void write_idx_images(const std::filesystem::path& file, const IdxImages& images);
void write_idx_labels(const std::filesystem::path& file, const std::vector<std::uint8_t>& labels);

// One CIFAR-10 batch file: label byte followed by 3072 CHW pixel bytes.
struct CifarRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // labels.size() * 3072
};

CifarRecords read_cifar_batch(const std::filesystem::path& file);
void write_cifar_batch(const std::filesystem::path& file, const CifarRecords& records);

// Raw split with byte pixels; one example per column after conversion.
struct RawSplit {
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
};

struct RawDataset {
  InputShape shape;
  RawSplit train;
  RawSplit test;
};

// Expects train-images-idx3-ubyte, train-labels-idx1-ubyte,
// t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte in `dir`.
RawDataset load_mnist(const std::filesystem::path& dir);

// Expects data_batch_1.bin .. data_batch_5.bin and test_batch.bin in `dir`.
RawDataset load_cifar10(const std::filesystem::path& dir);

enum class DatasetName { MNIST5k, CIFAR10_5k };

std::string to_string(DatasetName name);
DatasetName parse_dataset(const std::string& s);

// Affine per-channel map x -> (x - mean[c]) / std[c], applied after
// scaling pixels to [0, 1]. MNIST uses a single global channel.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  DatasetName name = DatasetName::MNIST5k;
  InputShape shape;
  Batch train;
  Batch test;
  Normalization normalization;
  std::vector<int> source_indices;  // positions of train examples in the raw file
  std::uint64_t subset_seed = 0;
};

// seed == 0 keeps the first n training examples in file order; any other
// seed draws a seeded sample without replacement.
Dataset make_subset(const RawDataset& raw, DatasetName name, int n = 5000,
                    std::uint64_t seed = 0);

// Undo the normalization (returns pixels in [0, 1]).
Eigen::MatrixXd denormalize(const Dataset& ds, const Eigen::MatrixXd& inputs);

struct HoldoutSet {
  std::vector<int> indices;  // distinct train indices
  Batch batch;
  std::string id;
};

HoldoutSet sample_holdout(const Dataset& ds, int l, std::uint64_t seed);

// Columns `indices` of `source` as a new batch.
Batch gather(const Batch& source, const std::vector<int>& indices);

// Seeded permutation of [0, n) sliced into consecutive batches; the last
// batch is short when batch_size does not divide n.
std::vector<std::vector<int>> batches(int n, int batch_size, std::uint64_t epoch_seed);

// Seeded Fisher-Yates permutation of [0, n).
std::vector<int> permutation(int n, std::uint64_t seed);

// Load the named dataset from `data_dir` (a dataset directory or a root
// containing mnist/ or cifar-10-batches-bin/).
RawDataset load_raw(DatasetName name, const std::filesystem::path& data_dir);

}  // namespace curvlab
