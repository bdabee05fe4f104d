#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "multiquant/rng.hpp"
#include "multiquant/tensor.hpp"

namespace mq {

struct DatasetSplit {
  int channels = 1;
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> images;  // n * c * h * w, row-major
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_values() const { return static_cast<int64_t>(channels) * height * width; }
};

struct DatasetHandle {
  DatasetSplit train;
  DatasetSplit test;
  std::string source;
  // pixel normalization applied at load: value = (raw - offset) * scale
  double norm_offset = 0.0;
  double norm_scale = 1.0;
};

// IDX pair: big-endian magic 0x00000803 (images) / 0x00000801 (labels),
// dimension header, raw bytes. Pixels scale to [0, 1].
DatasetSplit load_idx_pair(const std::string& images_path, const std::string& labels_path);

DatasetHandle load_mnist_idx(const std::string& train_images, const std::string& train_labels);
DatasetHandle load_mnist_idx(const std::string& train_images, const std::string& train_labels,
                             const std::string& test_images, const std::string& test_labels);

// first n samples after a seeded shuffle
DatasetSplit subset_split(const DatasetSplit& split, int64_t n, uint64_t seed);

// Gaussian blobs: unit-variance clusters, pairwise mean distance >= 4,
// round-robin labels (balanced within +-1). dim is the image side; the
// test split gets an extra n/5 samples from the same stream.
DatasetHandle make_synthetic(int classes, int dim, int64_t n, uint64_t seed);

struct Batch {
  Tensor images;                // (N,C,H,W)
  Tensor onehot;                // (N,classes)
  std::vector<int> labels;
};

// rows of `split` selected by order[start .. start+count)
Batch make_batch(const DatasetSplit& split, const std::vector<size_t>& order, size_t start,
                 size_t count);

// training-time augmentation: per-sample coin-flip horizontal mirror and/or
// random crop from a 2-pixel zero pad
void augment_batch(Batch& batch, Rng& rng, bool flip, bool crop);

}  // namespace mq
