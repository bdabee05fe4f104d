#include "multiquant/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mq {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header in '" + path + "'");
  return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
         (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

}  // namespace

DatasetSplit load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw std::runtime_error("idx: cannot open images file '" + images_path + "'");
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw std::runtime_error("idx: cannot open labels file '" + labels_path + "'");

  const uint32_t img_magic = read_be32(img, images_path);
  if (img_magic != kImagesMagic)
    throw std::runtime_error("idx: bad images magic in '" + images_path + "' (got " +
                             std::to_string(img_magic) + ")");
  const uint32_t n_images = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);

  const uint32_t lab_magic = read_be32(lab, labels_path);
  if (lab_magic != kLabelsMagic)
    throw std::runtime_error("idx: bad labels magic in '" + labels_path + "' (got " +
                             std::to_string(lab_magic) + ")");
  const uint32_t n_labels = read_be32(lab, labels_path);
  if (n_images != n_labels)
    throw std::runtime_error("idx: " + std::to_string(n_images) + " images but " +
                             std::to_string(n_labels) + " labels");

  DatasetSplit split;
  split.channels = 1;
  split.height = static_cast<int>(rows);
  split.width = static_cast<int>(cols);

  const size_t pixels = static_cast<size_t>(n_images) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
  if (static_cast<size_t>(img.gcount()) != pixels)
    throw std::runtime_error("idx: truncated image payload in '" + images_path + "'");

  std::vector<unsigned char> raw_labels(n_labels);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), n_labels);
  if (static_cast<size_t>(lab.gcount()) != n_labels)
    throw std::runtime_error("idx: truncated label payload in '" + labels_path + "'");

  split.images.resize(pixels);
  for (size_t i = 0; i < pixels; ++i) split.images[i] = raw[i] / 255.0;
  split.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int l : split.labels) max_label = std::max(max_label, l);
  split.classes = max_label + 1;
  return split;
}

DatasetHandle load_mnist_idx(const std::string& train_images, const std::string& train_labels) {
  DatasetHandle h;
  h.train = load_idx_pair(train_images, train_labels);
  h.source = "mnist-idx";
  h.norm_scale = 1.0 / 255.0;
  return h;
}

DatasetHandle load_mnist_idx(const std::string& train_images, const std::string& train_labels,
                             const std::string& test_images, const std::string& test_labels) {
  auto h = load_mnist_idx(train_images, train_labels);
  h.test = load_idx_pair(test_images, test_labels);
  h.test.classes = h.train.classes = std::max(h.train.classes, h.test.classes);
  return h;
}

DatasetSplit subset_split(const DatasetSplit& split, int64_t n, uint64_t seed) {
  if (n <= 0 || n > split.size())
    throw std::invalid_argument("subset: need 1 <= n <= " + std::to_string(split.size()));
  Rng rng(seed);
  auto order = rng.permutation(split.size());
  DatasetSplit out;
  out.channels = split.channels;
  out.height = split.height;
  out.width = split.width;
  out.classes = split.classes;
  const int64_t sv = split.sample_values();
  out.images.resize(n * sv);
  out.labels.resize(n);
  for (int64_t i = 0; i < n; ++i) {
    const size_t src = order[i];
    std::copy_n(split.images.begin() + static_cast<int64_t>(src) * sv, sv,
                out.images.begin() + i * sv);
    out.labels[i] = split.labels[src];
  }
  return out;
}

DatasetHandle make_synthetic(int classes, int dim, int64_t n, uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
  if (dim < 2 || n < 1) throw std::invalid_argument("synthetic: bad dimensions");
  Rng rng(seed);
  const int64_t d = static_cast<int64_t>(dim) * dim;

  // cluster means with pairwise distance >= 4 (unit-variance clusters)
  std::vector<std::vector<double>> means;
  while (static_cast<int>(means.size()) < classes) {
    auto candidate = rng.normal_vector(d, 0.0, 3.0);
    bool ok = true;
    for (const auto& m : means) {
      double dist2 = 0.0;
      for (int64_t i = 0; i < d; ++i) dist2 += (candidate[i] - m[i]) * (candidate[i] - m[i]);
      if (dist2 < 16.0) {
        ok = false;
        break;
      }
    }
    if (ok) means.push_back(std::move(candidate));
  }

  auto fill = [&](DatasetSplit& split, int64_t count) {
    split.channels = 1;
    split.height = dim;
    split.width = dim;
    split.classes = classes;
    split.images.resize(count * d);
    split.labels.resize(count);
    for (int64_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % classes);  // round-robin, balanced
      split.labels[i] = label;
      for (int64_t j = 0; j < d; ++j)
        split.images[i * d + j] = means[label][j] + rng.normal();
    }
  };

  DatasetHandle h;
  h.source = "synthetic";
  fill(h.train, n);
  fill(h.test, std::max<int64_t>(1, n / 5));
  return h;
}

Batch make_batch(const DatasetSplit& split, const std::vector<size_t>& order, size_t start,
                 size_t count) {
  if (start + count > order.size()) throw std::invalid_argument("make_batch: range out of bounds");
  const int64_t sv = split.sample_values();
  std::vector<double> images(count * sv);
  std::vector<double> onehot(count * split.classes, 0.0);
  Batch batch;
  batch.labels.resize(count);
  for (size_t i = 0; i < count; ++i) {
    const size_t src = order[start + i];
    std::copy_n(split.images.begin() + static_cast<int64_t>(src) * sv, sv,
                images.begin() + static_cast<int64_t>(i) * sv);
    batch.labels[i] = split.labels[src];
    onehot[i * split.classes + split.labels[src]] = 1.0;
  }
  batch.images = tensor({static_cast<int>(count), split.channels, split.height, split.width},
                        std::move(images));
  batch.onehot = tensor({static_cast<int>(count), split.classes}, std::move(onehot));
  return batch;
}

void augment_batch(Batch& batch, Rng& rng, bool flip, bool crop) {
  if (!flip && !crop) return;
  const int n = batch.images->shape[0], c = batch.images->shape[1];
  const int h = batch.images->shape[2], w = batch.images->shape[3];
  auto& v = batch.images->v;
  for (int i = 0; i < n; ++i) {
    if (flip && rng.uniform() < 0.5) {
      for (int ic = 0; ic < c; ++ic)
        for (int y = 0; y < h; ++y) {
          double* row = v.data() + ((static_cast<int64_t>(i) * c + ic) * h + y) * w;
          std::reverse(row, row + w);
        }
    }
    if (crop) {
      constexpr int pad = 2;
      const int dy = static_cast<int>(rng.uniform_index(2 * pad + 1)) - pad;
      const int dx = static_cast<int>(rng.uniform_index(2 * pad + 1)) - pad;
      if (dy == 0 && dx == 0) continue;
      for (int ic = 0; ic < c; ++ic) {
        std::vector<double> plane(static_cast<size_t>(h) * w, 0.0);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + dx;
            if (sx < 0 || sx >= w) continue;
            plane[static_cast<size_t>(y) * w + x] =
                v[((static_cast<int64_t>(i) * c + ic) * h + sy) * w + sx];
          }
        }
        std::copy(plane.begin(), plane.end(),
                  v.begin() + ((static_cast<int64_t>(i) * c + ic) * h) * w);
      }
    }
  }
}

}  // namespace mq
