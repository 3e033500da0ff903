#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgl/rng.hpp"
#include "dgl/tensor.hpp"

namespace dgl {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// In-memory labelled images stored in 32-bit floats.
struct Dataset {
  Shape sample{};  // batch = 1
  std::size_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

template <typename T>
struct Batch {
  Tensor<T> x;
  std::vector<int> y;
};

/// Copies the listed samples into a batch.
template <typename T>
Batch<T> gather(const Dataset& data, std::span<const std::size_t> indices);

/// Samples [first, first + count) in storage order.
template <typename T>
Batch<T> slice(const Dataset& data, std::size_t first, std::size_t count);

enum class DatasetKind { Gaussians, Spirals, Cifar10, Idx };

std::string to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& text);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::Gaussians;
  std::size_t classes = 4;
  std::size_t channels = 3;
  std::size_t side = 8;
  std::size_t train_size = 512;
  std::size_t test_size = 512;
  double noise = 1.0;
  double separation = 0.15;  // gaussians: std of class-mean cells relative to noise
  std::uint64_t seed = 7;
  std::string path;        // cifar10: comma-separated training files; idx: image file
  std::string label_path;  // idx: label file
  std::string test_path;   // cifar10: test file; idx: "images,labels" pair
  std::size_t subset = 0;  // 0 = all records

  bool operator==(const DatasetSpec&) const = default;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Builds or reads the train/test split described by `spec`. Synthetic sets are a
/// pure function of the spec; file formats fail with DataError naming the offset.
DataSplit load_dataset(const DatasetSpec& spec);

Dataset make_gaussians(std::size_t classes, std::size_t channels, std::size_t side, std::size_t n, double noise,
                       double separation, std::uint64_t seed, std::uint64_t stream);
Dataset make_spirals(std::size_t classes, std::size_t side, std::size_t n, double noise, std::uint64_t seed,
                     std::uint64_t stream);

/// CIFAR-10 binary records: 1 label byte followed by 3072 pixel bytes (3x32x32, channel-major).
Dataset read_cifar10_binary(const std::string& path, std::size_t limit = 0);
/// IDX pair: unsigned-byte images (magic 0x00000803) and labels (magic 0x00000801), big-endian headers.
Dataset read_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit = 0);

/// Seeded minibatch stream with a fresh permutation per epoch; the last partial batch is dropped.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  std::size_t batch_size() const { return batch_size_; }
  std::size_t epoch() const { return epoch_; }

  /// Resets to the start of epoch `e` with its own permutation.
  void begin_epoch(std::size_t e);
  /// Next batch of the current epoch; false once the epoch is exhausted.
  template <typename T>
  bool next(Batch<T>& out);
  /// Next batch, rolling over into a reshuffled next epoch when needed.
  template <typename T>
  Batch<T> next_cyclic();

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t batches_per_epoch_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace dgl
